"""Kernel backend selection.

The compiled extension is used when importable; ``FGFM_KERNELS=python`` forces
the numpy fallback. ``use_backend`` switches temporarily (tests, benchmarks).
"""
import contextlib
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("FGFM_KERNELS", "").lower() == "python" or _ckernels is None:
    _impl = _pykernels
else:
    _impl = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "cython" if _impl is _ckernels and _ckernels is not None else "python"


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}") from None


@contextlib.contextmanager
def use_backend(name):
    global _impl
    previous = _impl
    _impl = get_backend(name)
    try:
        yield _impl
    finally:
        _impl = previous


def conv1d_same(signal, kernel):
    return _impl.conv1d_same(signal, kernel)


def depthwise_conv_fwd(x, k):
    return _impl.depthwise_conv_fwd(x, k)


def depthwise_conv_bwd(g, x, k):
    return _impl.depthwise_conv_bwd(g, x, k)


def topk_indices(x, k):
    return _impl.topk_indices(x, k)


def mhv_select(attn, v, kernel, enhance):
    return _impl.mhv_select(attn, v, kernel, enhance)
