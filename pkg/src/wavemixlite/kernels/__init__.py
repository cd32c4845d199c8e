"""Hot-kernel backend selection.

Prefers the compiled Cython extension; falls back to the numpy versions
when the extension is missing or WAVEMIXLITE_PURE_PY=1 is set.  Both
backends expose the same four functions.
"""

import os

from . import fallback

if os.environ.get("WAVEMIXLITE_PURE_PY"):
    _impl = fallback
    HAVE_COMPILED = False
else:
    try:
        from . import _ckernels as _impl
        HAVE_COMPILED = True
    except ImportError:
        _impl = fallback
        HAVE_COMPILED = False

BACKEND = "compiled" if HAVE_COMPILED else "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward
