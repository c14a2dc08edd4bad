import logging
import os
import sys
from typing import List, Optional

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _requested_threads(argv: List[str]) -> int:
    """--threads from the command line, else DPQ_THREADS, else 0 (library default)"""
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
            break
        if arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
            break
    else:
        value = os.environ.get("DPQ_THREADS", "0")
    try:
        return max(0, int(value))
    except ValueError:
        return 0


def cap_threads(argv: List[str]) -> None:
    """Must run before numpy is imported for the BLAS pools to honour it"""
    threads = _requested_threads(argv)
    if threads > 0:
        for name in THREAD_VARIABLES:
            os.environ[name] = str(threads)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    cap_threads(argv)

    from app.cli.commands import CommandLine
    from app.core.config import settings

    # Set up logging
    logging.basicConfig(
        level=settings.log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logger = logging.getLogger(__name__)

    try:
        return CommandLine().run(argv)
    except Exception as e:
        logger.error(f"Error starting command line: {e}")
        raise


if __name__ == "__main__":
    sys.exit(main())
