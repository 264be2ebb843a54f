"""Backend selection for the convolution kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels``.  ``BPFPN_KERNELS=python`` forces the
fallback, ``BPFPN_KERNELS=cython`` makes a missing extension an error.
"""

import os

from . import _pykernels

_choice = os.environ.get("BPFPN_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
