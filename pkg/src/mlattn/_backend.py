"""Kernel backend selection.

The compiled ``_kernels`` extension is used when importable. Setting
``MLATTN_BACKEND=python`` forces the numpy fallback.
"""
import importlib
import os

_NAMES = ("softmax_attention", "softmax_step", "linear_attention",
          "linear_update", "linear_query", "linear_naive_step")


def load(name: str | None = None):
    """Return the kernel module for ``name`` (``"compiled"``/``"python"``/``None`` = auto)."""
    if name is None:
        name = os.environ.get("MLATTN_BACKEND", "auto").lower()
    if name in ("auto", "compiled", "cython"):
        try:
            return importlib.import_module("mlattn._kernels")
        except ImportError:
            if name != "auto":
                raise
    return importlib.import_module("mlattn._pykernels")


kernels = load()
BACKEND = "compiled" if kernels.__name__.endswith("._kernels") else "python"


def available() -> list[str]:
    names = ["python"]
    try:
        importlib.import_module("mlattn._kernels")
    except ImportError:
        pass
    else:
        names.insert(0, "compiled")
    return names


def use(name: str) -> None:
    """Switch the process-wide backend (benchmarks and parity tests)."""
    global kernels, BACKEND
    kernels = load(name)
    BACKEND = "compiled" if kernels.__name__.endswith("._kernels") else "python"
