"""Per-table mutexes usable from inside nogil numba kernels.

Kernels call ``pthread_mutex_lock`` / ``pthread_mutex_unlock`` as external
symbols, passing the address of a mutex stored in a uint8 numpy array.
Linux/glibc only.
"""
import ctypes
import ctypes.util

import llvmlite.binding as llvm
import numpy as np
from numba import types

MUTEX_BYTES = 64

_libc_name = ctypes.util.find_library("c") or "libc.so.6"
llvm.load_library_permanently(_libc_name)
_libc = ctypes.CDLL(_libc_name, use_errno=True)

mutex_lock = types.ExternalFunction("pthread_mutex_lock", types.int32(types.uintp))
mutex_unlock = types.ExternalFunction("pthread_mutex_unlock", types.int32(types.uintp))

_mutex_init = _libc.pthread_mutex_init
_mutex_init.argtypes = [ctypes.c_size_t, ctypes.c_size_t]
_mutex_init.restype = ctypes.c_int


def new_mutexes(count: int) -> np.ndarray:
    """Allocate and initialise ``count`` mutexes, one per row."""
    buf = np.zeros((count, MUTEX_BYTES), dtype=np.uint8)
    base = buf.ctypes.data
    for i in range(count):
        if _mutex_init(base + i * MUTEX_BYTES, 0) != 0:
            raise OSError(ctypes.get_errno(), "pthread_mutex_init failed")
    return buf
