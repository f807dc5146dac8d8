"""Shared argument handling for the experiment scripts."""

import argparse
import logging
import os
from pathlib import Path


def parser(description: str, datasets=("gauss2", "blobs8")) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--datasets", nargs="+", default=list(datasets), choices=["gauss2", "blobs8"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--cache", type=Path, default=Path("results/cache"),
                   help="ground-truth cache shared between runs")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
