"""Chain-kernel selection: compiled extension if available, else pure Python.

Set ``SHIPLEARN_PURE=1`` to force the pure fallback (used by the
benchmark and the kernel-equivalence tests).
"""

from __future__ import annotations

import os

if os.environ.get("SHIPLEARN_PURE") == "1":
    from shiplearn import _chains_py as _impl
else:
    try:
        from shiplearn import _chains_cy as _impl  # type: ignore[no-redef]
    except ImportError:
        from shiplearn import _chains_py as _impl  # type: ignore[no-redef]

USING_COMPILED: bool = bool(_impl.IS_COMPILED)

hier_simple_chain = _impl.hier_simple_chain
hier_regression_chain = _impl.hier_regression_chain
independent_chain = _impl.independent_chain
pooling_chain = _impl.pooling_chain
pooling_regression_chain = _impl.pooling_regression_chain

__all__ = [
    "USING_COMPILED",
    "hier_simple_chain",
    "hier_regression_chain",
    "independent_chain",
    "pooling_chain",
    "pooling_regression_chain",
]
