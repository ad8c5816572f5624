"""Toy causal diffusion transformer over latent chunks.

Block = AdaLN self-attention (rope on Q/K, rmsnorm on Q, chunk-causal mask),
multimodal cross-attention (text every layer; audio alternating speak on
even layers / listen on odd, with a split output projection), and an AdaLN
FFN. Scale/shift/gate triples come from a 2-layer MLP on a sinusoidal
timestep embedding, applied per chunk. Reference tokens ride at the end of
the sequence: they self-attend only among themselves, skip cross-attention
entirely (so their K/V never depend on per-chunk conditioning), and carry
timestep 0.

The final projection is residual (output = input + correction), so a model
with all-zero weights is an exact passthrough.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ScheduleError, ShapeError
from .kvcache import AssembledWindow, KvExport, rotate_heads
from .latcore import Tensor2D, rmsnorm_rows, softmax_rows
from .maskgen import AudioWindowSpec, audio_window_mask, chunk_causal_mask, windowed_context_mask
from .ropekit import Position3, RopeParams, SegmentOffsets, ref_position


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    tokens_per_chunk: int = 8
    d_cond: int = 32
    d_ffn: int = 256
    rope_base: float = 10000.0
    rope_axes: Optional[Tuple[int, int, int]] = None
    audio: AudioWindowSpec = field(default_factory=AudioWindowSpec)
    audio_fps: float = 16.0
    video_tokens_per_sec: Optional[float] = None
    ref_layout: Tuple[Tuple[str, int], ...] = (
        ("expression", 1),
        ("expression", 2),
        ("view", 1),
        ("view", 2),
    )
    offsets: SegmentOffsets = field(default_factory=SegmentOffsets)
    ref_t_base: int = 1024

    def __post_init__(self):
        if self.n_layers <= 0 or self.n_layers % 2:
            raise ConfigError(f"n_layers must be positive even, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head_dim must be even for rotary pairs")
        if self.tokens_per_chunk <= 0 or self.d_cond <= 0 or self.d_ffn <= 0:
            raise ConfigError("tokens_per_chunk, d_cond, d_ffn must be positive")
        self.offsets.validate(self.ref_t_base + 1)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base, self.rope_axes)

    @property
    def tokens_rate(self) -> float:
        return self.video_tokens_per_sec or float(self.tokens_per_chunk)

    @property
    def n_ref_tokens(self) -> int:
        return len(self.ref_layout)

    def ref_positions(self) -> Tuple[Position3, ...]:
        return tuple(
            ref_position(self.ref_t_base, rt, si, self.offsets) for rt, si in self.ref_layout
        )

    def to_dict(self) -> Dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "tokens_per_chunk": self.tokens_per_chunk,
            "d_cond": self.d_cond,
            "d_ffn": self.d_ffn,
            "rope_base": self.rope_base,
            "rope_axes": list(self.rope_axes) if self.rope_axes else None,
            "audio": {"speak_window": self.audio.speak_window, "listen_window": self.audio.listen_window},
            "audio_fps": self.audio_fps,
            "video_tokens_per_sec": self.video_tokens_per_sec,
            "ref_layout": [list(x) for x in self.ref_layout],
            "offsets": {
                "table": {k: list(v) for k, v in self.offsets.table.items()},
                "sub_step": self.offsets.sub_step,
            },
            "ref_t_base": self.ref_t_base,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        """Inverse of to_dict; missing keys keep their defaults."""
        kw: Dict = {}
        for key in ("n_layers", "d_model", "n_heads", "tokens_per_chunk", "d_cond",
                    "d_ffn", "rope_base", "audio_fps", "video_tokens_per_sec",
                    "ref_t_base"):
            if key in d:
                kw[key] = d[key]
        if d.get("rope_axes"):
            kw["rope_axes"] = tuple(d["rope_axes"])
        if "audio" in d:
            kw["audio"] = AudioWindowSpec(**d["audio"])
        if "ref_layout" in d:
            kw["ref_layout"] = tuple((rt, si) for rt, si in d["ref_layout"])
        if "offsets" in d:
            kw["offsets"] = SegmentOffsets(
                table={k: tuple(v) for k, v in d["offsets"]["table"].items()},
                sub_step=d["offsets"]["sub_step"],
            )
        unknown = set(d) - {
            "n_layers", "d_model", "n_heads", "tokens_per_chunk", "d_cond", "d_ffn",
            "rope_base", "rope_axes", "audio", "audio_fps", "video_tokens_per_sec",
            "ref_layout", "offsets", "ref_t_base",
        }
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**kw)


@dataclass(frozen=True)
class CondBundle:
    """Per-chunk conditioning: text tokens, dual audio streams, references."""

    text_tokens: Tensor2D
    speak_frames: Tensor2D
    listen_frames: Tensor2D
    ref_tokens: Tensor2D
    mute_speak: bool = False
    mute_listen: bool = False

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in (self.text_tokens, self.speak_frames, self.listen_frames, self.ref_tokens):
            h.update(str(t.a.shape).encode())
            h.update(t.a.tobytes())
        h.update(bytes([self.mute_speak, self.mute_listen]))
        return h.hexdigest()[:16]


def silence_cond(config: ModelConfig, ref_tokens: Tensor2D, n_text: int = 0) -> CondBundle:
    """Muted, zero-audio bundle used for warmup/idle chunks."""
    n_frames = int(round(3 * config.audio_fps))
    z = lambda r, c: Tensor2D(np.zeros((r, c), dtype=np.float32))
    return CondBundle(
        text_tokens=z(n_text, config.d_cond),
        speak_frames=z(n_frames, config.d_cond),
        listen_frames=z(n_frames, config.d_cond),
        ref_tokens=ref_tokens,
        mute_speak=True,
        mute_listen=True,
    )


# ---------------------------------------------------------------------------
# weights


@dataclass
class BlockWeights:
    """One transformer block. Audio branch weights exist only for the
    layer's parity (speak on even layers, listen on odd)."""

    layer: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    g_q: np.ndarray
    w_q_cross: np.ndarray
    g_q_cross: np.ndarray
    w_k_txt: np.ndarray
    w_v_txt: np.ndarray
    w_k_spk: Optional[np.ndarray]
    w_v_spk: Optional[np.ndarray]
    w_k_lis: Optional[np.ndarray]
    w_v_lis: Optional[np.ndarray]
    w_o_txt: np.ndarray
    w_o_aud: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_mod: np.ndarray
    b_mod: np.ndarray

    @property
    def speaks(self) -> bool:
        return self.layer % 2 == 0

    def validate(self, cfg: ModelConfig) -> None:
        if self.speaks:
            if self.w_k_spk is None or self.w_v_spk is None:
                raise ConfigError(f"even layer {self.layer} missing speak branch weights")
            if self.w_k_lis is not None or self.w_v_lis is not None:
                raise ConfigError(f"even layer {self.layer} must not carry listen weights")
        else:
            if self.w_k_lis is None or self.w_v_lis is None:
                raise ConfigError(f"odd layer {self.layer} missing listen branch weights")
            if self.w_k_spk is not None or self.w_v_spk is not None:
                raise ConfigError(f"odd layer {self.layer} must not carry speak weights")
        d = cfg.d_model
        for name in ("w_q", "w_k", "w_v", "w_o", "w_q_cross", "w_o_txt", "w_o_aud"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"layer {self.layer} {name} must be {(d, d)}")

    def audio_branch(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.speaks:
            return self.w_k_spk, self.w_v_spk
        return self.w_k_lis, self.w_v_lis


@dataclass
class ModelWeights:
    wt1: np.ndarray
    bt1: np.ndarray
    wt2: np.ndarray
    bt2: np.ndarray
    blocks: List[BlockWeights]
    w_out: np.ndarray
    w_mod_final: np.ndarray
    b_mod_final: np.ndarray

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out = {
            "time.wt1": self.wt1,
            "time.bt1": self.bt1,
            "time.wt2": self.wt2,
            "time.bt2": self.bt2,
            "final.w_out": self.w_out,
            "final.w_mod": self.w_mod_final,
            "final.b_mod": self.b_mod_final,
        }
        for b in self.blocks:
            pre = f"block{b.layer}."
            for name in (
                "w_q", "w_k", "w_v", "w_o", "g_q", "w_q_cross", "g_q_cross",
                "w_k_txt", "w_v_txt", "w_k_spk", "w_v_spk", "w_k_lis", "w_v_lis",
                "w_o_txt", "w_o_aud", "w1", "b1", "w2", "b2", "w_mod", "b_mod",
            ):
                t = getattr(b, name)
                if t is not None:
                    out[pre + name] = t
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.named_tensors()):
            t = self.named_tensors()[name]
            h.update(name.encode())
            h.update(t.tobytes())
        return h.hexdigest()[:16]


def _gauss(rng: np.random.Generator, shape, scale) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def random_weights(config: ModelConfig, seed: int, scale: float = 0.08) -> ModelWeights:
    """Random small weights; outputs genuinely depend on every branch."""
    rng = np.random.default_rng(seed)
    d, dc, df, hd = config.d_model, config.d_cond, config.d_ffn, config.head_dim
    blocks = []
    for layer in range(config.n_layers):
        speaks = layer % 2 == 0
        blocks.append(
            BlockWeights(
                layer=layer,
                w_q=_gauss(rng, (d, d), scale),
                w_k=_gauss(rng, (d, d), scale),
                w_v=_gauss(rng, (d, d), scale),
                w_o=_gauss(rng, (d, d), scale),
                g_q=np.ones(hd, dtype=np.float32),
                w_q_cross=_gauss(rng, (d, d), scale),
                g_q_cross=np.ones(d, dtype=np.float32),
                w_k_txt=_gauss(rng, (dc, d), scale),
                w_v_txt=_gauss(rng, (dc, d), scale),
                w_k_spk=_gauss(rng, (dc, d), scale) if speaks else None,
                w_v_spk=_gauss(rng, (dc, d), scale) if speaks else None,
                w_k_lis=None if speaks else _gauss(rng, (dc, d), scale),
                w_v_lis=None if speaks else _gauss(rng, (dc, d), scale),
                w_o_txt=_gauss(rng, (d, d), scale),
                w_o_aud=_gauss(rng, (d, d), scale),
                w1=_gauss(rng, (d, df), scale),
                b1=np.zeros(df, dtype=np.float32),
                w2=_gauss(rng, (df, d), scale),
                b2=np.zeros(d, dtype=np.float32),
                w_mod=_gauss(rng, (d, 6 * d), scale),
                b_mod=np.zeros(6 * d, dtype=np.float32),
            )
        )
    return ModelWeights(
        wt1=_gauss(rng, (d, d), scale),
        bt1=np.zeros(d, dtype=np.float32),
        wt2=_gauss(rng, (d, d), scale),
        bt2=np.zeros(d, dtype=np.float32),
        blocks=blocks,
        w_out=_gauss(rng, (d, d), scale),
        w_mod_final=_gauss(rng, (d, 2 * d), scale),
        b_mod_final=np.zeros(2 * d, dtype=np.float32),
    )


def zeros_weights(config: ModelConfig) -> ModelWeights:
    """All-zero weights: the model is an exact passthrough (pure residual)."""
    d, dc, df, hd = config.d_model, config.d_cond, config.d_ffn, config.head_dim
    z = lambda *shape: np.zeros(shape, dtype=np.float32)
    blocks = []
    for layer in range(config.n_layers):
        speaks = layer % 2 == 0
        blocks.append(
            BlockWeights(
                layer=layer,
                w_q=z(d, d), w_k=z(d, d), w_v=z(d, d), w_o=z(d, d),
                g_q=z(hd),
                w_q_cross=z(d, d), g_q_cross=z(d),
                w_k_txt=z(dc, d), w_v_txt=z(dc, d),
                w_k_spk=z(dc, d) if speaks else None,
                w_v_spk=z(dc, d) if speaks else None,
                w_k_lis=None if speaks else z(dc, d),
                w_v_lis=None if speaks else z(dc, d),
                w_o_txt=z(d, d), w_o_aud=z(d, d),
                w1=z(d, df), b1=z(df), w2=z(df, d), b2=z(d),
                w_mod=z(d, 6 * d), b_mod=z(6 * d),
            )
        )
    return ModelWeights(
        wt1=z(d, d), bt1=z(d), wt2=z(d, d), bt2=z(d),
        blocks=blocks,
        w_out=z(d, d), w_mod_final=z(d, 2 * d), b_mod_final=z(2 * d),
    )


def clone_weights(w: ModelWeights) -> ModelWeights:
    blocks = [
        BlockWeights(
            **{
                f: (getattr(b, f).copy() if isinstance(getattr(b, f), np.ndarray) else getattr(b, f))
                for f in b.__dataclass_fields__
            }
        )
        for b in w.blocks
    ]
    return ModelWeights(
        wt1=w.wt1.copy(), bt1=w.bt1.copy(), wt2=w.wt2.copy(), bt2=w.bt2.copy(),
        blocks=blocks,
        w_out=w.w_out.copy(), w_mod_final=w.w_mod_final.copy(), b_mod_final=w.b_mod_final.copy(),
    )


# ---------------------------------------------------------------------------
# numerics helpers


def _silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(np.sqrt(2.0 / np.pi))
    return (0.5 * x * (1.0 + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))).astype(
        np.float32
    )


def _sin_embed(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = np.float64(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


def _modulate(x: np.ndarray, shift: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return x * (1.0 + scale) + shift


_ONES: Dict[int, np.ndarray] = {}


def _norm(x: np.ndarray) -> np.ndarray:
    g = _ONES.get(x.shape[-1])
    if g is None:
        g = _ONES[x.shape[-1]] = np.ones(x.shape[-1], dtype=np.float32)
    return rmsnorm_rows(x, g)


# ---------------------------------------------------------------------------
# the model


@dataclass(frozen=True)
class ForwardResult:
    out_chunks: Tuple[np.ndarray, ...]
    chunk_exports: Tuple[KvExport, ...]
    ref_export: Optional[KvExport]


class CausalToyModel:
    """Config + weights + the two forward paths (joint and cached-chunk)."""

    def __init__(self, config: ModelConfig, weights: ModelWeights):
        for b in weights.blocks:
            b.validate(config)
        if len(weights.blocks) != config.n_layers:
            raise ConfigError(
                f"weights carry {len(weights.blocks)} blocks, config wants {config.n_layers}"
            )
        self.config = config
        self.weights = weights
        self._audio_mask_cache: Dict[Tuple[int, float], np.ndarray] = {}

    # -- timestep conditioning ------------------------------------------------

    def _temb(self, t: float) -> np.ndarray:
        w = self.weights
        s = _sin_embed(float(t), self.config.d_model)
        return _silu(s @ w.wt1 + w.bt1) @ w.wt2 + w.bt2

    def _mod_table(self, ts: Sequence[float]):
        """Per distinct timestep: temb and per-layer 6-way modulation."""
        table = {}
        for t in ts:
            t = float(t)
            if t in table:
                continue
            temb = self._temb(t)
            act = _silu(temb)
            mods = [act @ b.w_mod + b.b_mod for b in self.weights.blocks]
            fin = act @ self.weights.w_mod_final + self.weights.b_mod_final
            table[t] = (mods, fin)
        return table

    # -- audio window masks ----------------------------------------------------

    def _chunk_audio_mask(self, n_frames: int, window: float) -> np.ndarray:
        """Rows = current-chunk tokens sitting in the last second of the 3-s
        audio window (offset 2 s); cols = the window's frames."""
        key = (n_frames, window)
        m = self._audio_mask_cache.get(key)
        if m is None:
            cfg = self.config
            m = audio_window_mask(
                cfg.tokens_per_chunk,
                cfg.tokens_rate,
                n_frames,
                cfg.audio_fps,
                window,
                token_offset_sec=2.0,
            ).m
            self._audio_mask_cache[key] = m
        return m

    # -- attention pieces -------------------------------------------------------

    def _self_attention(
        self,
        b: BlockWeights,
        x_hat: np.ndarray,
        positions: Sequence[Position3],
        mask: np.ndarray,
        hist: Optional[Tuple[np.ndarray, np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]],
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (attn_out, k_pre, v) for the processed rows."""
        cfg = self.config
        n, d = x_hat.shape
        hd, H = cfg.head_dim, cfg.n_heads

        q = x_hat @ b.w_q
        q = rmsnorm_rows(q.reshape(n, H, hd), b.g_q).reshape(n, d)
        q = rotate_heads(q, positions, cfg.rope)
        k_pre = x_hat @ b.w_k
        v = x_hat @ b.w_v
        k_cur = rotate_heads(k_pre, positions, cfg.rope)

        if hist is not None:
            k_vid, v_vid, k_ref, v_ref = hist
            parts_k = [a for a in (k_vid, k_cur, k_ref) if a is not None and a.shape[0]]
            parts_v = [a for a in (v_vid, v, v_ref) if a is not None and a.shape[0]]
            keys = np.concatenate(parts_k, axis=0) if len(parts_k) > 1 else parts_k[0]
            vals = np.concatenate(parts_v, axis=0) if len(parts_v) > 1 else parts_v[0]
        else:
            keys, vals = k_cur, v
        n_k = keys.shape[0]
        if mask.shape != (n, n_k):
            raise ShapeError(f"self-attn mask {mask.shape} != ({n}, {n_k})")

        q3 = q.reshape(n, H, hd).transpose(1, 0, 2)
        k3 = keys.reshape(n_k, H, hd).transpose(1, 0, 2)
        v3 = vals.reshape(n_k, H, hd).transpose(1, 0, 2)
        scores = (q3 @ k3.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(hd))
        flat_mask = np.broadcast_to(mask, (H, n, n_k)).reshape(H * n, n_k)
        attn = softmax_rows(scores.reshape(H * n, n_k), flat_mask).a.reshape(H, n, n_k)
        ctx = (attn @ v3).transpose(1, 0, 2).reshape(n, d)
        return ctx @ b.w_o, k_pre, v

    def _cross_attention(self, b: BlockWeights, x_block: np.ndarray, cond: CondBundle) -> np.ndarray:
        cfg = self.config
        n = x_block.shape[0]
        d = cfg.d_model
        q = rmsnorm_rows(x_block @ b.w_q_cross, b.g_q_cross)
        inv = np.float32(1.0 / np.sqrt(d))

        a_text = np.zeros((n, d), dtype=np.float32)
        if cond.text_tokens.rows:
            kt = cond.text_tokens.a @ b.w_k_txt
            vt = cond.text_tokens.a @ b.w_v_txt
            a_text = softmax_rows((q @ kt.T) * inv).a @ vt

        a_audio = np.zeros((n, d), dtype=np.float32)
        frames = cond.speak_frames if b.speaks else cond.listen_frames
        muted = cond.mute_speak if b.speaks else cond.mute_listen
        if frames.rows and not muted:
            w_k_aud, w_v_aud = b.audio_branch()
            window = cfg.audio.speak_window if b.speaks else cfg.audio.listen_window
            amask = self._chunk_audio_mask(frames.rows, window)
            if amask.shape[0] != n:
                raise ShapeError(
                    f"audio mask rows {amask.shape[0]} != chunk tokens {n}"
                )
            ka = frames.a @ w_k_aud
            va = frames.a @ w_v_aud
            a_audio = softmax_rows((q @ ka.T) * inv, amask).a @ va

        return a_text @ b.w_o_txt + a_audio @ b.w_o_aud

    # -- core loop ---------------------------------------------------------------

    def _run(
        self,
        x: np.ndarray,
        token_t: Sequence[float],
        positions: Sequence[Position3],
        video_blocks: Sequence[Tuple[int, int, Optional[CondBundle]]],
        mask: np.ndarray,
        hist_layers: Optional[Sequence] = None,
    ) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
        """Shared layer loop. Returns (final prediction, k_pre per layer, v per layer)."""
        cfg = self.config
        n = x.shape[0]
        if x.shape != (n, cfg.d_model):
            raise ShapeError(f"sequence must be (n, {cfg.d_model}), got {x.shape}")
        if len(token_t) != n or len(positions) != n:
            raise ShapeError("token_t/positions length mismatch with sequence")

        table = self._mod_table(token_t)
        # gather per-token modulation rows lazily per layer
        distinct = {float(t): i for i, t in enumerate(table)}
        tok_tid = np.asarray([distinct[float(t)] for t in token_t], dtype=np.int64)
        mods_by_t = list(table.values())

        h = x.astype(np.float32).copy()
        ks: List[np.ndarray] = []
        vs: List[np.ndarray] = []
        d = cfg.d_model

        for layer, b in enumerate(self.weights.blocks):
            mod_rows = np.stack([mods_by_t[i][0][layer] for i in range(len(mods_by_t))])
            m = mod_rows[tok_tid]
            sh_sa, sc_sa, g_sa, sh_ff, sc_ff, g_ff = np.split(m, 6, axis=1)

            x_hat = _modulate(_norm(h), sh_sa, sc_sa)
            hist = None
            if hist_layers is not None:
                lw = hist_layers[layer]
                hist = (lw.k_video, lw.v_video, lw.k_ref, lw.v_ref)
            attn, k_pre, v = self._self_attention(b, x_hat, positions, mask, hist)
            ks.append(k_pre)
            vs.append(v)
            h = h + g_sa * attn

            for start, stop, cond in video_blocks:
                if cond is not None:
                    h[start:stop] = h[start:stop] + self._cross_attention(b, h[start:stop], cond)

            x_hat2 = _modulate(_norm(h), sh_ff, sc_ff)
            h = h + g_ff * (_gelu(x_hat2 @ b.w1 + b.b1) @ b.w2 + b.b2)

        fin_rows = np.stack([mods_by_t[i][1] for i in range(len(mods_by_t))])[tok_tid]
        sh_f, sc_f = np.split(fin_rows, 2, axis=1)
        out = x.astype(np.float32) + _modulate(_norm(h), sh_f, sc_f) @ self.weights.w_out
        return out.astype(np.float32), ks, vs

    # -- public paths ---------------------------------------------------------------

    def forward_joint(
        self,
        chunks: Sequence[np.ndarray],
        t_vec: Sequence[float],
        conds: Sequence[CondBundle],
        start_slot: int = 0,
    ) -> ForwardResult:
        """Full causal forward over [chunk 0..n-1][reference tokens]."""
        cfg = self.config
        n_chunks = len(chunks)
        if not (n_chunks == len(t_vec) == len(conds)):
            raise ShapeError("chunks, t_vec, conds must have equal length")
        if n_chunks == 0:
            raise ShapeError("forward_joint needs at least one chunk")
        ref = conds[0].ref_tokens
        for c in conds[1:]:
            if c.ref_tokens.digest() != ref.digest():
                raise ConfigError("reference tokens must be identical across chunks")
        if ref.rows != cfg.n_ref_tokens:
            raise ConfigError(
                f"config wants {cfg.n_ref_tokens} reference tokens, bundle has {ref.rows}"
            )

        tpc = cfg.tokens_per_chunk
        arrays = []
        for i, ch in enumerate(chunks):
            a = ch.a if isinstance(ch, Tensor2D) else np.asarray(ch, dtype=np.float32)
            if a.shape != (tpc, cfg.d_model):
                raise ShapeError(f"chunk {i} must be ({tpc}, {cfg.d_model}), got {a.shape}")
            arrays.append(a)

        x = np.concatenate(arrays + [ref.a], axis=0)
        token_t = [float(t_vec[i]) for i in range(n_chunks) for _ in range(tpc)] + [0.0] * ref.rows
        positions: List[Position3] = []
        for i in range(n_chunks):
            base = (start_slot + i) * tpc
            positions.extend(Position3(base + j) for j in range(tpc))
        positions.extend(cfg.ref_positions())
        video_blocks = [(i * tpc, (i + 1) * tpc, conds[i]) for i in range(n_chunks)]
        mask = chunk_causal_mask(n_chunks, tpc, ref.rows).m

        out, ks, vs = self._run(x, token_t, positions, video_blocks, mask)
        n_vid = n_chunks * tpc
        chunk_exports = tuple(
            KvExport(
                tuple(k[i * tpc : (i + 1) * tpc] for k in ks),
                tuple(v[i * tpc : (i + 1) * tpc] for v in vs),
            )
            for i in range(n_chunks)
        )
        ref_export = KvExport(
            tuple(k[n_vid:] for k in ks), tuple(v[n_vid:] for v in vs)
        )
        return ForwardResult(
            out_chunks=tuple(out[i * tpc : (i + 1) * tpc] for i in range(n_chunks)),
            chunk_exports=chunk_exports,
            ref_export=ref_export,
        )

    def prefill_references(self, ref_tokens: Tensor2D) -> KvExport:
        """Process reference tokens alone; bit-identical to their joint-forward
        export because references never see video or conditioning."""
        cfg = self.config
        if ref_tokens.rows != cfg.n_ref_tokens:
            raise ConfigError(
                f"config wants {cfg.n_ref_tokens} reference tokens, got {ref_tokens.rows}"
            )
        n = ref_tokens.rows
        mask = np.ones((n, n), dtype=bool)
        _, ks, vs = self._run(
            ref_tokens.a,
            [0.0] * n,
            list(cfg.ref_positions()),
            [],
            mask,
        )
        return KvExport(tuple(ks), tuple(vs))

    def forward_chunk(
        self,
        x: np.ndarray,
        t: float,
        cond: CondBundle,
        positions: Sequence[Position3],
        window: Optional[AssembledWindow] = None,
    ) -> Tuple[np.ndarray, KvExport]:
        """One chunk against an assembled history window (cached path)."""
        cfg = self.config
        tpc = cfg.tokens_per_chunk
        a = x.a if isinstance(x, Tensor2D) else np.asarray(x, dtype=np.float32)
        if a.shape != (tpc, cfg.d_model):
            raise ShapeError(f"chunk must be ({tpc}, {cfg.d_model}), got {a.shape}")
        if len(positions) != tpc:
            raise ShapeError(f"need {tpc} positions, got {len(positions)}")

        if window is None:
            mask = np.ones((tpc, tpc), dtype=bool)
            hist_layers = None
        else:
            if window.include_current:
                raise ValueError("forward_chunk wants a history window (include_current=False)")
            retained = tuple(window.chunk_order) + (window.current_index,)
            full = windowed_context_mask(retained, tpc, window.n_ref_tokens).m
            n_hist = window.n_video_tokens
            mask = full[n_hist : n_hist + tpc]
            hist_layers = window.layers

        out, ks, vs = self._run(
            a, [float(t)] * tpc, list(positions), [(0, tpc, cond)], mask, hist_layers
        )
        return out, KvExport(tuple(ks), tuple(vs))


# ---------------------------------------------------------------------------
# schedule-validated prediction wrappers


def _check_levels(t_vec: Sequence[float], allowed: Sequence[float], what: str) -> None:
    for t in t_vec:
        if not any(abs(float(t) - a) < 1e-9 for a in allowed):
            raise ScheduleError(f"{what} timestep {t} not in allowed levels {tuple(allowed)}")
    for a, b in zip(t_vec, t_vec[1:]):
        if float(b) < float(a) - 1e-9:
            raise ScheduleError(f"timestep vector must be non-decreasing, got {list(t_vec)}")


def backbone_predict(
    model: CausalToyModel,
    chunks: Sequence[np.ndarray],
    t_vec: Sequence[float],
    conds: Sequence[CondBundle],
    sched,
    window: Optional[AssembledWindow] = None,
    positions: Optional[Sequence[Position3]] = None,
) -> ForwardResult:
    """Backbone forward: timesteps restricted to {T0, T1}, non-decreasing."""
    _check_levels(t_vec, (sched.T0, sched.T1), "backbone")
    if window is not None:
        if len(chunks) != 1:
            raise ScheduleError("cached backbone path processes exactly one chunk")
        if window.variant != "noisy":
            raise ScheduleError(f"backbone wants the noisy cache, got {window.variant!r}")
        out, export = model.forward_chunk(chunks[0], t_vec[0], conds[0], positions, window)
        return ForwardResult((out,), (export,), None)
    return model.forward_joint(chunks, t_vec, conds)


def refiner_predict(
    model: CausalToyModel,
    chunks: Sequence[np.ndarray],
    t_vec: Sequence[float],
    conds: Sequence[CondBundle],
    sched,
    window: Optional[AssembledWindow] = None,
    positions: Optional[Sequence[Position3]] = None,
) -> ForwardResult:
    """Refiner forward: every timestep must equal T2."""
    _check_levels(t_vec, (sched.T2,), "refiner")
    if window is not None:
        if len(chunks) != 1:
            raise ScheduleError("cached refiner path processes exactly one chunk")
        if window.variant != "clean":
            raise ScheduleError(f"refiner wants the clean cache, got {window.variant!r}")
        out, export = model.forward_chunk(chunks[0], t_vec[0], conds[0], positions, window)
        return ForwardResult((out,), (export,), None)
    return model.forward_joint(chunks, t_vec, conds)


# ---------------------------------------------------------------------------
# checkpoint adapters


def save_model(path, model: CausalToyModel) -> None:
    save_checkpoint(path, model.config.to_dict(), model.weights.named_tensors())


def load_model(path) -> CausalToyModel:
    cfg_dict, tensors = load_checkpoint(path)
    config = ModelConfig.from_dict(cfg_dict)
    blocks = []
    for layer in range(config.n_layers):
        pre = f"block{layer}."
        get = lambda name: tensors.get(pre + name)
        blocks.append(
            BlockWeights(
                layer=layer,
                w_q=get("w_q"), w_k=get("w_k"), w_v=get("w_v"), w_o=get("w_o"),
                g_q=get("g_q"),
                w_q_cross=get("w_q_cross"), g_q_cross=get("g_q_cross"),
                w_k_txt=get("w_k_txt"), w_v_txt=get("w_v_txt"),
                w_k_spk=get("w_k_spk"), w_v_spk=get("w_v_spk"),
                w_k_lis=get("w_k_lis"), w_v_lis=get("w_v_lis"),
                w_o_txt=get("w_o_txt"), w_o_aud=get("w_o_aud"),
                w1=get("w1"), b1=get("b1"), w2=get("w2"), b2=get("b2"),
                w_mod=get("w_mod"), b_mod=get("b_mod"),
            )
        )
    weights = ModelWeights(
        wt1=tensors["time.wt1"], bt1=tensors["time.bt1"],
        wt2=tensors["time.wt2"], bt2=tensors["time.bt2"],
        blocks=blocks,
        w_out=tensors["final.w_out"],
        w_mod_final=tensors["final.w_mod"], b_mod_final=tensors["final.b_mod"],
    )
    return CausalToyModel(config, weights)
