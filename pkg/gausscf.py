"""Run the counterfactual toolkit (fit → generate → bench, plus density grids).

Thin wrapper around run_utils.cli so `python gausscf.py ...` and
`uv run gausscf.py ...` keep working; `uv run gauss-cf ...` runs the same thing.
"""

from run_utils.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
