"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
always present. ``YOLOFACE_BACKEND`` (auto|cython|python) overrides the
choice at import time, ``set_backend`` at runtime. ``YOLOFACE_THREADS``
caps the OpenMP thread count used by the compiled kernels.
"""
import os

from . import _numpy_kernels

_BACKENDS = {"python": _numpy_kernels}

try:
    from . import _kernels as _compiled
    _BACKENDS["cython"] = _compiled
except ImportError:
    _compiled = None


def available_backends():
    return sorted(_BACKENDS)


def _initial_backend():
    forced = os.environ.get("YOLOFACE_BACKEND", "auto").strip().lower()
    if forced in ("", "auto"):
        return "cython" if "cython" in _BACKENDS else "python"
    if forced not in _BACKENDS:
        raise ImportError(
            f"YOLOFACE_BACKEND={forced!r} is not available; "
            f"choices: {available_backends()} or 'auto'"
        )
    return forced


_active = _initial_backend()


def active_backend():
    return _active


def set_backend(name):
    """Switch kernel backend; raises KeyError for an unknown/unbuilt one."""
    global _active
    if name not in _BACKENDS:
        raise KeyError(f"backend {name!r} not available; choices: {available_backends()}")
    _active = name


def kernels():
    return _BACKENDS[_active]


def _initial_threads():
    raw = os.environ.get("YOLOFACE_THREADS", "").strip()
    if raw:
        return max(1, int(raw))
    return 0  # 0 = leave the decision to OpenMP


_num_threads = _initial_threads()


def get_num_threads():
    return _num_threads


def set_num_threads(n):
    global _num_threads
    _num_threads = max(0, int(n))
