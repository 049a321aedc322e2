"""The run-directory workflow behind the command line.

Layout of a run directory::

    config.yaml                  resolved configuration
    data/{train,val,test}/       datasets in the data-module layout
    checkpoints/stage{1,2,3}.ckpt
    model.ckpt, train_log.csv
    thresholds.json              per-variant thresholds from the sweep
    infer/<variant>/             detections.csv, scores.csv, maps.npz, maps/*.pgm
    eval/<variant>/              metrics.json, metrics.txt
    ablate/                      table.txt, ablate.json
    manifests/<command>.json
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import shutil
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, config_hash, dump, model_config, synth_config, train_config
from .data import DataError, SampleRecord, generate, load_dir, save_dir
from .inference import (
    VARIANTS,
    binarize_largest_cc,
    detect,
    normalize,
    read_detections_csv,
    run_model,
    select_thresholds,
    variant_map,
    fuse,
    write_detections_csv,
    write_pgm_stack,
)
from .metrics import MetricsReport, Prediction, evaluate, format_table
from .net.model import Model
from .net.train import TrainingDiverged, train, write_log_csv

log = logging.getLogger(__name__)

SPLITS = {"train": ("tr", 0, "n_train"), "val": ("va", 1, "n_val"), "test": ("te", 2, "n_test")}
VARIANT_ORDER = ("sal", "det", "mix")
TABLE_LABELS = {"sal": "Sal", "det": "Det", "mix": "Mix"}


class Run:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    @property
    def config_path(self) -> Path:
        return self.root / "config.yaml"

    @property
    def model_path(self) -> Path:
        return self.root / "model.ckpt"

    @property
    def thresholds_path(self) -> Path:
        return self.root / "thresholds.json"

    def infer_dir(self, variant: str) -> Path:
        return self.root / "infer" / variant

    def eval_dir(self, variant: str) -> Path:
        return self.root / "eval" / variant

    def manifest(self, name: str) -> Path:
        return self.root / "manifests" / f"{name}.json"


def versions() -> dict[str, str]:
    return {"salprop": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def write_manifest(run: Run, name: str, cfg: dict, outputs: Sequence[Path], **extra) -> dict:
    manifest = {
        "command": name,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "versions": versions(),
        "outputs": sorted(str(Path(p).relative_to(run.root)) for p in outputs),
        "config": cfg,
    }
    manifest.update(extra)
    path = run.manifest(name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def split_seed(cfg: dict, split: str) -> int:
    return 3 * int(cfg["seed"]) + SPLITS[split][1]


def load_split(run: Run, split: str) -> list[SampleRecord]:
    path = run.data(split)
    if not path.exists():
        raise DataError(f"no {split} split at {path}; run `salprop gen` first")
    return load_dir(path)


def load_model(run: Run, cfg: dict) -> Model:
    if not run.model_path.exists():
        raise DataError(f"no checkpoint at {run.model_path}; run `salprop train` first")
    model = Model.init(model_config(cfg), cfg["seed"])
    try:
        model.load(run.model_path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return model


def _check_variants(variants: Sequence[str]) -> list[str]:
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown map variant(s) {bad}; expected {list(VARIANT_ORDER)}")
    return list(variants)


# -- commands -------------------------------------------------------------------------


def cmd_gen(run: Run, cfg: dict, force: bool = False) -> dict:
    data_root = run.root / "data"
    if data_root.exists() and any(data_root.iterdir()):
        if not force:
            raise DataError(f"{data_root} is not empty; pass --force to overwrite")
        shutil.rmtree(data_root)
    try:
        run.root.mkdir(parents=True, exist_ok=True)
        run.config_path.write_text(dump(cfg))
        outputs = [run.config_path]
        counts = {}
        for split, (prefix, _, n_key) in SPLITS.items():
            records = generate(synth_config(cfg, split_seed(cfg, split)), cfg["data"][n_key], prefix)
            save_dir(records, run.data(split))
            counts[split] = len(records)
            outputs.append(run.data(split))
    except OSError as exc:
        raise DataError(f"cannot write run directory {run.root}: {exc}") from None
    return write_manifest(run, "gen", cfg, outputs, samples=counts)


def cmd_train(run: Run, cfg: dict) -> dict:
    records = load_split(run, "train")
    model = Model.init(model_config(cfg), cfg["seed"])
    ckpt_dir = run.root / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_stage_end(stage: int, m: Model) -> None:
        m.save(ckpt_dir / f"stage{stage}.ckpt")

    log_path = run.root / "train_log.csv"
    try:
        rows = train(records, train_config(cfg), model, on_stage_end)
    except TrainingDiverged as exc:
        write_log_csv(log_path, exc.log_rows)
        model.save(ckpt_dir / "last_good.ckpt")
        raise
    write_log_csv(log_path, rows)
    model.save(run.model_path)
    outputs = [log_path, run.model_path] + sorted(ckpt_dir.glob("stage*.ckpt"))
    final = rows[-1] if rows else None
    return write_manifest(
        run,
        "train",
        cfg,
        outputs,
        steps=len(rows),
        final_losses=None if final is None else {"loss_cls": final.loss_cls, "loss_rpn": final.loss_rpn},
    )


def _model_outputs(run: Run, cfg: dict, split: str):
    records = load_split(run, split)
    model = load_model(run, cfg)
    return records, run_model(model, records, cfg["inference"]["batch_size"])


def cmd_sweep(run: Run, cfg: dict, variants: Sequence[str] = VARIANT_ORDER, split: str = "val") -> dict:
    variants = _check_variants(variants)
    records, outs = _model_outputs(run, cfg, split)
    if not any(r.annotated for r in records):
        raise DataError(f"the {split} split has no annotated samples to sweep thresholds on")
    gt = [r.boxes for r in records]
    table = json.loads(run.thresholds_path.read_text()) if run.thresholds_path.exists() else {}
    for v in variants:
        maps = [variant_map(v, o.sal, o.rpn) for o in outs]
        thr, missing = select_thresholds(maps, gt, cfg["inference"]["grid"], default=cfg["inference"]["default_threshold"])
        if missing:
            log.warning("%s: classes %s have no annotation in %s; using the default threshold", v, missing, split)
        table[v] = {"thresholds": [float(t) for t in thr], "unannotated": missing, "split": split}
    run.thresholds_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return write_manifest(run, "sweep", cfg, [run.thresholds_path], thresholds=table)


def _thresholds(run: Run, variant: str) -> np.ndarray:
    if not run.thresholds_path.exists():
        raise DataError(f"no thresholds at {run.thresholds_path}; run `salprop sweep` first")
    table = json.loads(run.thresholds_path.read_text())
    if variant not in table:
        raise DataError(f"no thresholds for variant {variant!r}; run `salprop sweep --maps {variant}`")
    return np.asarray(table[variant]["thresholds"], dtype=np.float64)


def _write_scores(path: Path, ids: Sequence[str], scores: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id"] + [f"c{k}" for k in range(scores.shape[1])])
        for image_id, row in zip(ids, scores):
            wr.writerow([image_id] + [repr(float(v)) for v in row])


def _read_scores(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        return {row[0]: np.array([float(v) for v in row[1:]]) for row in rd}


def staged_maps(variant: str, sal: np.ndarray, rpn: np.ndarray, thresholds) -> dict[str, np.ndarray]:
    """The intermediate maps of one image: variant input map(s) and the binary mask."""
    if variant == "mix":
        stages = {"sal": normalize(sal), "rpn": normalize(rpn), "fused": fuse(sal, rpn).maps}
        final = stages["fused"]
    else:
        final = variant_map(variant, sal, rpn)
        stages = {VARIANTS[variant]: final}
    stages["binary"] = binarize_largest_cc(final, thresholds).maps
    return stages


def cmd_infer(
    run: Run,
    cfg: dict,
    variants: Sequence[str] = ("mix",),
    split: str = "test",
    max_dumps: int | None = None,
) -> dict:
    variants = _check_variants(variants)
    records, outs = _model_outputs(run, cfg, split)
    ids = [o.image_id for o in outs]
    outputs: list[Path] = []
    summary = {}
    for v in variants:
        thr = _thresholds(run, v)
        d = run.infer_dir(v)
        if d.exists():
            shutil.rmtree(d)
        (d / "maps").mkdir(parents=True)
        dets, maps, staged = [], [], {}
        for i, o in enumerate(outs):
            stages = staged_maps(v, o.sal, o.rpn, thr)
            final = stages["fused" if v == "mix" else VARIANTS[v]]
            maps.append(final)
            dets.append((o.image_id, detect(final, thr)))
            for name, m in stages.items():
                staged.setdefault(name, []).append(m)
                if max_dumps is None or i < max_dumps:
                    write_pgm_stack(d / "maps" / name, o.image_id, m)
        empty = write_detections_csv(d / "detections.csv", dets)
        _write_scores(d / "scores.csv", ids, np.stack([o.scores for o in outs]))
        np.savez_compressed(d / "maps.npz", ids=np.array(ids), **{k: np.stack(m) for k, m in staged.items()})
        if empty:
            log.info("%s: %d empty detections omitted from %s", v, empty, d / "detections.csv")
        summary[v] = {"images": len(outs), "empty_detections": empty, "thresholds": [float(t) for t in thr]}
        outputs += [d / "detections.csv", d / "scores.csv", d / "maps.npz", d / "maps"]
    return write_manifest(run, "infer", cfg, outputs, split=split, summary=summary)


def evaluate_variant(run: Run, cfg: dict, variant: str, records: Sequence[SampleRecord]) -> MetricsReport:
    d = run.infer_dir(variant)
    if not (d / "detections.csv").exists():
        raise DataError(f"no detections for {variant!r} at {d}; run `salprop infer --maps {variant}` first")
    k = len(records[0].labels)
    boxes = read_detections_csv(d / "detections.csv", k)
    scores = _read_scores(d / "scores.csv")
    with np.load(d / "maps.npz") as z:
        map_ids = [str(s) for s in z["ids"]]
        final = z["fused" if variant == "mix" else VARIANTS[variant]]
    maps = dict(zip(map_ids, final))
    preds = []
    for r in records:
        if r.image_id not in scores:
            raise DataError(f"no prediction for image {r.image_id!r} in {d}")
        preds.append(Prediction(r.image_id, scores[r.image_id], boxes.get(r.image_id, [None] * k), maps.get(r.image_id)))
    names = list(cfg["data"]["shapes"])
    return evaluate(preds, records, cfg["metrics"]["kappas"], 4.0, names)


def cmd_eval(run: Run, cfg: dict, variants: Sequence[str] = ("mix",), split: str = "test") -> dict:
    variants = _check_variants(variants)
    records = load_split(run, split)
    outputs, reports = [], {}
    for v in variants:
        rep = evaluate_variant(run, cfg, v, records)
        d = run.eval_dir(v)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.json").write_text(rep.to_json() + "\n")
        (d / "metrics.txt").write_text(rep.to_table(TABLE_LABELS[v]) + "\n")
        outputs += [d / "metrics.json", d / "metrics.txt"]
        reports[v] = rep
    write_manifest(run, "eval", cfg, outputs, split=split)
    return reports


def cmd_ablate(run: Run, cfg: dict, split: str = "test", sweep_split: str = "val", max_dumps: int | None = None) -> str:
    """Sweep, infer and evaluate all three variants; return the comparison table."""
    cmd_sweep(run, cfg, VARIANT_ORDER, sweep_split)
    cmd_infer(run, cfg, VARIANT_ORDER, split, max_dumps)
    reports = cmd_eval(run, cfg, VARIANT_ORDER, split)
    labelled = {TABLE_LABELS[v]: reports[v] for v in VARIANT_ORDER}
    # localisation comparison first (IoU, cDice), then T(IoU) and the shared AUC
    table = "\n\n".join(
        [format_table(labelled, ("iou", "cdice")), format_table(labelled, ("t_iou",)), format_table({"all": reports["mix"]}, ("auc",))]
    )
    d = run.root / "ablate"
    d.mkdir(parents=True, exist_ok=True)
    (d / "table.txt").write_text(table + "\n")
    (d / "ablate.json").write_text(json.dumps({v: reports[v].to_dict() for v in VARIANT_ORDER}, indent=2, sort_keys=True) + "\n")
    write_manifest(run, "ablate", cfg, [d / "table.txt", d / "ablate.json"], split=split)
    return table
