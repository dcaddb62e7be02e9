"""Conditional denoising-diffusion engine for 16x16 single-channel wind fields.

Submodules are imported lazily so the CLI can configure thread limits before
numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "cli",
    "contextunet",
    "data",
    "diffusion",
    "evaluation",
    "noisestore",
    "optim",
    "schedule",
    "training",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
