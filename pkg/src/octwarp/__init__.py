"""Reference-free 3D motion correction of orthogonally raster-scanned OCT volumes."""
import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numba  # noqa: E402

__version__ = "0.1.0"


def set_threads(n: int | None = None) -> int:
    """Set the compiled-kernel thread count (``None``: OCTWARP_THREADS or all cores)."""
    if n is None:
        env = os.environ.get("OCTWARP_THREADS")
        n = int(env) if env else numba.config.NUMBA_DEFAULT_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_DEFAULT_NUM_THREADS))
    numba.set_num_threads(n)
    return n
