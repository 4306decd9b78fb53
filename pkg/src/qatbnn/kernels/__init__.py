"""Hot loops behind the numerical core.

The compiled extension ``_ckernels`` is used when it was built; otherwise the
numpy implementations in ``_pykernels`` are picked up. Set
``QATBNN_KERNELS=numpy`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "numpy"
_impl = _pykernels

if os.environ.get("QATBNN_KERNELS", "").lower() != "numpy":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'numpy'), default active."""
    if name is None:
        return _impl
    if name == "numpy":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["numpy"]
    try:
        from . import _ckernels  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def matmul(a, b):
    return _impl.matmul(a, b)


def conv2d_forward(x, w, stride):
    return _impl.conv2d_forward(x, w, stride)


def conv2d_backward(x, w, dout, stride):
    return _impl.conv2d_backward(x, w, dout, stride)


def fake_quant(x, scale, qmin, qmax):
    return _impl.fake_quant(x, scale, qmin, qmax)
