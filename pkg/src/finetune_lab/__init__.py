"""finetune-lab.

A desk-scale engine for fine-tuning Vision Transformers with layer-wise learning-rate
decay, weight EMA and a configurable augmentation stack, plus an ablation harness.
"""

try:
    from importlib.metadata import version

    __version__ = version("finetune-lab")  # matches project.name in pyproject.toml
except Exception:
    # Fallback for development environments or if package not installed
    __version__ = "unknown"

__all__ = ["__version__"]
