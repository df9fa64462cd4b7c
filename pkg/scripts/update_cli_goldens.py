"""Regenerate the ``--help`` goldens in tests/golden (run after changing CLI options)."""

import contextlib
import io
import os
from pathlib import Path

from prismcad import cli

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"
COMMANDS = ["gen-corpus", "gen-data", "train-2d", "train-3d", "build-index", "reconstruct", "fit-profile",
            "interp", "metrics", "round", "oracle-check"]


def help_text(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.suppress(SystemExit):
        cli.main([*argv, "--help"])
    return buf.getvalue()


if __name__ == "__main__":
    os.environ["COLUMNS"] = "100"
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name in ["main"] + COMMANDS:
        (GOLDEN / f"help_{name}.txt").write_text(help_text([] if name == "main" else [name]))
        print(f"wrote help_{name}.txt")
