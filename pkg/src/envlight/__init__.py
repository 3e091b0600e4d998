"""Environment-light estimation by path-traced light Jacobians."""

import numba as _nb

# the installed TBB is older than numba supports
if _nb.config.THREADING_LAYER == "default":
    _nb.config.THREADING_LAYER = "omp"

__version__ = "0.1.0"
