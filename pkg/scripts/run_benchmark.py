#!/usr/bin/env python3
"""Run the headline benchmark config and render its charts."""

import sys
from pathlib import Path

from privfl import cli

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "benchmark.ini"


def main() -> int:
    code = cli.main(["run", "--config", str(CONFIG)])
    if code != 0:
        return code
    return cli.main(["chart", "--out", "results/benchmark"])


if __name__ == "__main__":
    sys.exit(main())
