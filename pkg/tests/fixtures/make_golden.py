"""Rebuild the golden inference fixture: ``python tests/fixtures/make_golden.py``.

Trains the toy configuration briefly, sweeps thresholds and stores the staged
maps of ``infer --maps mix`` so later changes can be checked bit for bit.
"""

import shutil
import sys
from pathlib import Path

import numpy as np

from salprop.cli import main

HERE = Path(__file__).parent
RUN = HERE / "golden_run"


def build() -> None:
    if RUN.exists():
        shutil.rmtree(RUN)
    for argv in (
        ["gen", "--config", str(HERE / "tiny.yaml")],
        ["train"],
        ["sweep", "--maps", "mix"],
        ["infer", "--maps", "mix", "--max-dumps", "0"],
    ):
        if main(argv + ["--run", str(RUN)]) != 0:
            sys.exit(f"failed: {argv}")
    with np.load(RUN / "infer" / "mix" / "maps.npz") as z:
        np.savez_compressed(HERE / "golden_mix.npz", **{k: z[k] for k in z.files})
    # keep only what inference needs
    for extra in ("infer", "checkpoints", "manifests", "data/train", "data/val", "train_log.csv"):
        p = RUN / extra
        shutil.rmtree(p) if p.is_dir() else p.unlink()


if __name__ == "__main__":
    build()
