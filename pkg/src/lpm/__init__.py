"""Desk-scale streaming generation stack.

A toy causal backbone/refiner diffusion transformer driven through a
pre-rotation KV cache with sink + sliding-window retention, an overlapped
three-stage pipeline, a full-duplex session runtime with boundary-aligned
control updates, and a four-stage distillation lab with an analytic
mixture teacher.

Submodules stay import-light: pulling in :mod:`lpm` does not load the
service stack (FastAPI) or the distillation lab; import those explicitly.
"""

__version__ = "0.1.0"
