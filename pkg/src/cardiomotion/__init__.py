"""Joint unsupervised cardiac motion estimation and weakly-supervised
segmentation for 2D image sequences."""

import os

# One BLAS thread keeps reductions in a fixed order (bit-reproducible runs)
# and avoids spin-wait contention with the numpy-side memory work. Only
# effective if set before numpy loads its BLAS; users can override.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

__version__ = "0.1.0"
