"""Hot framing kernels, backed by the compiled extension when it is importable.

Set ``METASEP_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("METASEP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

num_frames = _kernels_py.num_frames
frame = _impl.frame
overlap_add = _impl.overlap_add
