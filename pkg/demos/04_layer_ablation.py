"""
Which layer finds the edges?
============================

Train one detector per tap and one on all taps together, then benchmark
each.  The command-line tool does the whole loop; this script sets up a
small synthetic dataset and prints the resulting table.
"""

import argparse
import tempfile
from pathlib import Path

from pixedge import cli

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--work", default=None, help="scratch directory (default: a temp dir)")
parser.add_argument("--n-train", type=int, default=20)
parser.add_argument("--n-test", type=int, default=10)
args = parser.parse_args()
work = Path(args.work or tempfile.mkdtemp(prefix="pixedge-ablate-"))

cli.main(["synth", str(work / "data"), "--n-train", str(args.n_train), "--n-test", str(args.n_test)])
cli.main(["ablate", "--data", str(work / "data"), "--out", str(work / "table"), "--tol-fraction", str(1 / 64)])
print((work / "table" / "table.tex").read_text())
