"""surftex: tangent-space latent diffusion for texture synthesis on triangle meshes."""

import os

# On small CPU allocations OpenBLAS's threaded GEMM spin-waits away more
# time than it saves for the matrix sizes used here; single-threaded BLAS
# is faster across the board. Takes effect only if numpy is not yet loaded,
# and never overrides an explicit user setting.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
