"""BLAS thread pinning.

The engine's matrices are small; BLAS thread fan-out costs more than it buys
and a fixed thread count also keeps reductions bit-stable. Training entry
points call limit_blas_threads() once per process.
"""

from __future__ import annotations

_limiter = None
_applied = False


def limit_blas_threads(n: int = 1) -> None:
    global _applied, _limiter
    if _applied:
        return
    try:
        from threadpoolctl import threadpool_limits

        # the limiter object must stay alive for the limit to persist
        _limiter = threadpool_limits(limits=n, user_api="blas")
        _applied = True
    except Exception:
        _applied = True  # best effort; engine is correct regardless
