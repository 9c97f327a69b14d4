#!/usr/bin/env python3
import os
import sys
from pathlib import Path

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.absolute()))

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def pin_threads(argv, environ=os.environ):
    """Pin BLAS/OpenMP pools to one thread for --serial; must run before numpy is imported."""
    if "--serial" in argv:
        for name in BLAS_THREAD_VARS:
            environ[name] = "1"
    return environ


def main():
    pin_threads(sys.argv[1:])
    from cli.runner import main as run_cli
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
