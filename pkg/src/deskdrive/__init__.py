"""Desk-scale closed-loop driving stack.

Submodules are imported lazily so the CLI can pin BLAS thread counts
before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = ("core", "nn", "sim", "expert", "data", "model", "train",
               "control", "harness")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
