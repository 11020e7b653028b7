"""Console entry point: puts the shared layer and the stage handlers on sys.path, then runs the router."""
import logging
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[2]
sys.path[:0] = [str(ROOT / "backend" / "shared" / "python"), str(ROOT / "backend")]

from functions.router import cli_main  # noqa: E402


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(cli_main(sys.argv[1:]))
