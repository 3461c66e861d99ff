#!/usr/bin/env python3
"""Analyze a small synthetic meta-analysis end to end.

Generates a CSV of arm summaries, runs the analyze command on it, and
prints the report; handy as a smoke test and as a template for real data.
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np  # noqa: E402

from smdmeta import cli  # noqa: E402


def main() -> int:
    rng = np.random.default_rng(42)
    rows = ["study_id,n_t,n_c,mean_t,sd_t,mean_c,sd_c"]
    for i in range(8):
        n_t = int(rng.integers(8, 40))
        n_c = int(rng.integers(8, 40))
        mu = 0.4 + rng.normal(0, 0.4)
        xt = rng.normal(mu, 1.0, n_t)
        xc = rng.normal(0.0, 1.0, n_c)
        rows.append(f"s{i},{n_t},{n_c},{xt.mean():.6f},{xt.std(ddof=1):.6f},"
                    f"{xc.mean():.6f},{xc.std(ddof=1):.6f}")
    with tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False) as fh:
        fh.write("\n".join(rows) + "\n")
        path = fh.name
    try:
        return cli.main(["analyze", "--input", path])
    finally:
        os.unlink(path)


if __name__ == "__main__":
    sys.exit(main())
