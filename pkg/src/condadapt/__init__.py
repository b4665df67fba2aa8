"""Condition-adaptive input preprocessing for frozen vision tasks."""

import os as _os
import sys as _sys

# The engine runs many small GEMMs; BLAS worker pools cost more than they buy
# (idle spin-wait steals a core) and a fixed thread count keeps reductions
# bit-stable. Prevent the pool before numpy first loads; fall back to runtime
# limiting when numpy is already in the process.
if "numpy" not in _sys.modules:
    _os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
else:
    from ._blas import limit_blas_threads as _limit

    _limit()

__version__ = "0.1.0"
