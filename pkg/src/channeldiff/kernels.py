"""Kernel backend selection.

Imports the compiled mixture-score kernels when the extension built, falling
back to the numpy reference implementation otherwise.  Set the environment
variable CHANNELDIFF_PURE_PYTHON=1 to force the fallback (used by the
benchmark and by tests that compare the two).
"""

import os

if os.environ.get("CHANNELDIFF_PURE_PYTHON"):
    from . import _score_kernels_np as _impl

    HAVE_COMPILED = False
else:
    try:
        from . import _score_kernels as _impl  # type: ignore[attr-defined]

        HAVE_COMPILED = True
    except ImportError:
        from . import _score_kernels_np as _impl

        HAVE_COMPILED = False

gmm_logpdf = _impl.gmm_logpdf
gmm_score = _impl.gmm_score
gmm_score_hvp = _impl.gmm_score_hvp
