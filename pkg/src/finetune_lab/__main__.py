# src/finetune_lab/__main__.py
import os

# Single-threaded BLAS keeps reductions in a fixed order across runs.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from finetune_lab.cli import app  # noqa: E402
from finetune_lab.config import get_settings  # noqa: E402
from finetune_lab.logging import setup_logging  # noqa: E402


def main():
    setup_logging(get_settings().log_level)
    app()


if __name__ == "__main__":
    main()
