"""End-to-end experiment drivers: direct classification, raw-voxel
ablation, transfer from a large source cohort, and the sample-size curve.

Every run is a pure function of (spec, seeds): reports carry no clocks or
absolute paths, so re-running a spec regenerates every file byte for byte.
Wall-clock timing goes to stdout only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import cvae, embed, forest
from .data import LabeledDataset, load_dataset, preprocess, preprocess_dataset

__all__ = [
    "ExperimentSpec",
    "ExperimentReport",
    "run_direct",
    "run_ablation_raw",
    "run_transfer",
    "run_sample_curve",
    "run_experiment",
    "write_feature_csv",
    "read_feature_csv",
]

KINDS = ("direct", "ablation_raw", "transfer", "sample_curve")
SALIENT_CONDITION = "salient"
SHARED_CONDITION = "shared"
TRANSFER_STOP_THRESHOLD = 5e-3


@dataclass
class ExperimentSpec:
    kind: str
    dataset: object = None
    source_dataset: object = None
    target_dataset: object = None
    source_checkpoint: str = None
    cvae: cvae.CvaeConfig = None
    forest: forest.ForestConfig = field(default_factory=forest.ForestConfig)
    k_list: tuple = (3, 5, 10, 20)
    curve_k: int = 5
    sizes: tuple = ()
    repeats: int = 100
    retrain_repeats: int = 3
    raw_side: int = 16
    embed: bool = True
    tsne: embed.TsneConfig = None
    with_without_arms: bool = True
    seed: int = 0
    output_dir: str = "."

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if isinstance(self.cvae, dict):
            self.cvae = cvae.CvaeConfig(**self.cvae)
        if isinstance(self.forest, dict):
            self.forest = forest.ForestConfig(**self.forest)
        if isinstance(self.tsne, dict):
            self.tsne = embed.TsneConfig(**self.tsne)
        self.k_list = tuple(int(k) for k in self.k_list)
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.kind == "transfer":
            if self.target_dataset is None:
                raise ValueError("transfer needs a target dataset")
            if self.source_dataset is None and self.source_checkpoint is None:
                raise ValueError("transfer needs a source dataset or checkpoint")
        elif self.dataset is None:
            raise ValueError(f"{self.kind} needs a dataset")
        if self.cvae is None and self.kind != "ablation_raw":
            threshold = (TRANSFER_STOP_THRESHOLD if self.kind == "transfer"
                         else 5e-4)
            self.cvae = cvae.CvaeConfig(recon_stop_threshold=threshold)
        if self.raw_side < 2:
            raise ValueError("raw_side must be >= 2")


@dataclass
class ExperimentReport:
    kind: str
    spec: dict
    results: dict
    artifacts: dict
    provenance: dict

    def to_json(self) -> str:
        payload = {
            "kind": self.kind,
            "spec": self.spec,
            "results": self.results,
            "artifacts": self.artifacts,
            "provenance": self.provenance,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _ensure_dataset(obj, side=None) -> LabeledDataset:
    dataset = load_dataset(str(obj)) if isinstance(obj, (str, os.PathLike)) else obj
    # the encoder contract wants normalized volumes at its input side;
    # preprocess is identity on data already in that form
    if side is not None:
        dataset = preprocess_dataset(dataset, side)
    return dataset


def _dataset_echo(obj, dataset: LabeledDataset):
    if isinstance(obj, (str, os.PathLike)):
        return str(obj)
    labels = np.asarray(dataset.labels)
    return {
        "subjects": len(dataset.subjects),
        "positives": int(np.sum(labels == "positive")),
        "controls": int(np.sum(labels == "control")),
    }


def _spec_echo(spec: ExperimentSpec, datasets: dict) -> dict:
    echo = {
        "kind": spec.kind,
        "forest": dataclasses.asdict(spec.forest),
        "k_list": list(spec.k_list),
        "curve_k": spec.curve_k,
        "sizes": list(spec.sizes),
        "repeats": spec.repeats,
        "retrain_repeats": spec.retrain_repeats,
        "raw_side": spec.raw_side,
        "embed": spec.embed,
        "with_without_arms": spec.with_without_arms,
        "seed": spec.seed,
    }
    if spec.cvae is not None:
        echo["cvae"] = dataclasses.asdict(spec.cvae)
    if spec.tsne is not None:
        echo["tsne"] = dataclasses.asdict(spec.tsne)
    echo.update(datasets)
    return echo


def _derive_seed(*parts) -> int:
    """Flatten a tag tuple into one int for APIs that compose seeds."""
    return int(np.random.default_rng(parts).integers(2**31))


def _params_checksum(params) -> str:
    digest = hashlib.sha256()
    for p in params.param_list():
        digest.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
    return digest.hexdigest()


def _condition_features(params, dataset):
    """Table-1 conditions: salient vs shared feature sets for the forest."""
    labels = np.asarray(dataset.labels)
    pos_idx = np.flatnonzero(labels == "positive")
    ctl_idx = np.flatnonzero(labels == "control")
    fm_pos = cvae.extract_features(params, dataset.subset(pos_idx),
                                  cvae.SALIENT, cvae.MEAN)
    fm_ctl = cvae.extract_features(params, dataset.subset(ctl_idx),
                                  cvae.BACKGROUND, cvae.MEAN)
    salient = {
        "ids": list(fm_pos.subject_ids) + list(fm_ctl.subject_ids),
        "labels": np.array(["positive"] * pos_idx.size + ["control"] * ctl_idx.size),
        "values": np.vstack([fm_pos.values, fm_ctl.values]),
        "channels": ["salient"] * pos_idx.size + ["background"] * ctl_idx.size,
    }
    fm_all = cvae.extract_features(params, dataset, cvae.BACKGROUND, cvae.MEAN)
    shared = {
        "ids": list(fm_all.subject_ids),
        "labels": np.asarray(fm_all.labels),
        "values": fm_all.values,
        "channels": ["background"] * len(fm_all.subject_ids),
    }
    return {SALIENT_CONDITION: salient, SHARED_CONDITION: shared}


def _kfold_all(values, labels, k_list, cfg, seed_base):
    reports = {}
    for k in k_list:
        reports[k] = forest.kfold_accuracy(values, labels, k,
                                           seed=seed_base + (k,), config=cfg)
    return reports


def _cv_rows(condition, reports):
    rows = []
    for k in sorted(reports):
        for f, acc in enumerate(reports[k].per_fold_accuracy):
            rows.append(f"{condition},{k},{f},{repr(float(acc))}")
    return rows


def _cv_results(reports):
    return {
        str(k): {
            "per_fold_accuracy": [float(a) for a in r.per_fold_accuracy],
            "mean": r.mean,
            "std": r.std,
        }
        for k, r in reports.items()
    }


def write_feature_csv(path, ids, labels, values):
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        header = ["subject_id", "label"] + [f"f{j}" for j in range(values.shape[1])]
        fh.write(",".join(header) + "\n")
        for i, (sid, lab) in enumerate(zip(ids, labels)):
            row = [str(sid), str(lab)] + [repr(float(v)) for v in values[i]]
            fh.write(",".join(row) + "\n")


def read_feature_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["subject_id", "label"]:
            raise ValueError(f"unexpected feature header {header[:2]}")
        ids, labels, rows = [], [], []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ids.append(parts[0])
            labels.append(parts[1])
            rows.append([float(v) for v in parts[2:]])
    values = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, 0))
    return ids, np.array(labels), values


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _finish(spec, report: ExperimentReport, started: float) -> ExperimentReport:
    os.makedirs(spec.output_dir, exist_ok=True)
    _write(os.path.join(spec.output_dir, "report.json"), report.to_json() + "\n")
    print(f"{spec.kind} experiment finished in {time.perf_counter() - started:.1f}s")
    return report


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------

def run_direct(spec: ExperimentSpec) -> ExperimentReport:
    """Train on the full cohort, classify each Table-1 condition per k."""
    started = time.perf_counter()
    dataset = _ensure_dataset(spec.dataset, spec.cvae.input_side)
    os.makedirs(spec.output_dir, exist_ok=True)
    params, _ = cvae.train(spec.cvae, dataset, rng_seed=spec.seed)
    ckpt = "cvae_checkpoint.bin"
    cvae.save_checkpoint(params, os.path.join(spec.output_dir, ckpt))

    conditions = _condition_features(params, dataset)
    artifacts = {"checkpoint": ckpt}
    results = {"accuracy": {}}
    rows = ["condition,k,fold,accuracy"]
    for ci, cond in enumerate((SALIENT_CONDITION, SHARED_CONDITION)):
        data = conditions[cond]
        fname = f"features_{cond}.csv"
        write_feature_csv(os.path.join(spec.output_dir, fname),
                          data["ids"], data["labels"], data["values"])
        artifacts[f"features_{cond}"] = fname
        reports = _kfold_all(data["values"], data["labels"], spec.k_list,
                             spec.forest, (spec.seed, ci))
        results["accuracy"][cond] = _cv_results(reports)
        rows.extend(_cv_rows(cond, reports))
    _write(os.path.join(spec.output_dir, "accuracy.csv"), "\n".join(rows) + "\n")
    artifacts["accuracy"] = "accuracy.csv"

    if spec.embed:
        results["embedding"] = {}
        tsne_cfg = spec.tsne or embed.TsneConfig(seed=spec.seed)
        for cond in (SALIENT_CONDITION, SHARED_CONDITION):
            data = conditions[cond]
            coords, _ = embed.tsne_embed(data["values"], data["labels"], tsne_cfg)
            base = os.path.join(spec.output_dir, f"embedding_{cond}")
            embed.embedding_to_plot(coords, list(data["labels"]), base,
                                    ids=data["ids"], channels=data["channels"])
            artifacts[f"embedding_{cond}"] = f"embedding_{cond}.csv"
            artifacts[f"embedding_{cond}_svg"] = f"embedding_{cond}.svg"
            results["embedding"][cond] = {
                "silhouette": embed.silhouette_score(coords, data["labels"]),
            }

    provenance = {
        "seed": spec.seed,
        "rng_seed": spec.seed,
        "training": params.training_meta,
        "checkpoint_checksum": _params_checksum(params),
    }
    report = ExperimentReport(
        kind="direct",
        spec=_spec_echo(spec, {"dataset": _dataset_echo(spec.dataset, dataset)}),
        results=results,
        artifacts=artifacts,
        provenance=provenance,
    )
    return _finish(spec, report, started)


def run_ablation_raw(spec: ExperimentSpec) -> ExperimentReport:
    """Identical forest protocol on flattened raw voxels; no encoder."""
    started = time.perf_counter()
    dataset = _ensure_dataset(spec.dataset)
    os.makedirs(spec.output_dir, exist_ok=True)
    rows_feat = []
    for subject in dataset.subjects:
        vol = preprocess(subject.volume, spec.raw_side)
        rows_feat.append(vol.voxels.ravel().astype(np.float64))
    values = np.vstack(rows_feat)
    labels = np.asarray(dataset.labels)

    fname = "raw_features.csv"
    write_feature_csv(os.path.join(spec.output_dir, fname),
                      dataset.ids, labels, values)
    reports = _kfold_all(values, labels, spec.k_list, spec.forest, (spec.seed, 0))
    rows = ["condition,k,fold,accuracy"] + _cv_rows("raw", reports)
    _write(os.path.join(spec.output_dir, "accuracy.csv"), "\n".join(rows) + "\n")

    report = ExperimentReport(
        kind="ablation_raw",
        spec=_spec_echo(spec, {"dataset": _dataset_echo(spec.dataset, dataset)}),
        results={"accuracy": {"raw": _cv_results(reports)},
                 "feature_dimension": int(values.shape[1])},
        artifacts={"raw_features": fname, "accuracy": "accuracy.csv"},
        provenance={"seed": spec.seed, "raw_side": spec.raw_side},
    )
    return _finish(spec, report, started)


def run_sample_curve(spec: ExperimentSpec) -> ExperimentReport:
    """Accuracy vs cohort size on salient-condition features."""
    started = time.perf_counter()
    dataset = _ensure_dataset(spec.dataset, spec.cvae.input_side)
    os.makedirs(spec.output_dir, exist_ok=True)
    params, _ = cvae.train(spec.cvae, dataset, rng_seed=spec.seed)
    ckpt = "cvae_checkpoint.bin"
    cvae.save_checkpoint(params, os.path.join(spec.output_dir, ckpt))

    data = _condition_features(params, dataset)[SALIENT_CONDITION]
    fname = "features_salient.csv"
    write_feature_csv(os.path.join(spec.output_dir, fname),
                      data["ids"], data["labels"], data["values"])
    sizes = spec.sizes or tuple(
        s for s in (10, 20, 40, 60, len(dataset.subjects))
        if s <= len(dataset.subjects))
    points = forest.sample_size_curve(
        data["values"], data["labels"], list(sizes), repeats=spec.repeats,
        k=spec.curve_k, seed=_derive_seed(spec.seed, 1), config=spec.forest)
    _write(os.path.join(spec.output_dir, "curve.csv"), forest.curve_csv(points))

    report = ExperimentReport(
        kind="sample_curve",
        spec=_spec_echo(spec, {"dataset": _dataset_echo(spec.dataset, dataset)}),
        results={"curve": [{"size": p.size, "mean": p.mean, "std": p.std}
                           for p in points]},
        artifacts={"checkpoint": ckpt, "features_salient": fname,
                   "curve": "curve.csv"},
        provenance={"seed": spec.seed, "rng_seed": spec.seed,
                    "training": params.training_meta,
                    "curve_k": spec.curve_k, "repeats": spec.repeats},
    )
    return _finish(spec, report, started)


def _without_transfer_curve(spec, target, sizes):
    """Retrain the encoder on each target subsample and score its features."""
    labels = np.asarray(target.labels)
    per_size = []
    for si, size in enumerate(sizes):
        means = []
        for r in range(spec.retrain_repeats):
            rng = np.random.default_rng((spec.seed, 90, si, r))
            idx = forest._stratified_subsample(labels, size, rng)
            sub = target.subset(idx)
            cfg = dataclasses.replace(
                spec.cvae, seed=int(rng.integers(2**31)))
            sub_params, _ = cvae.train(cfg, sub,
                                       rng_seed=int(rng.integers(2**31)))
            data = _condition_features(sub_params, sub)[SALIENT_CONDITION]
            rep = forest.kfold_accuracy(
                data["values"], data["labels"], spec.curve_k,
                seed=int(rng.integers(2**31)), config=spec.forest)
            means.append(rep.mean)
        arr = np.asarray(means)
        per_size.append({"size": int(size), "mean": float(arr.mean()),
                         "std": float(arr.std())})
    return per_size


def run_transfer(spec: ExperimentSpec) -> ExperimentReport:
    """Pretrain on the source cohort, freeze, classify target features."""
    started = time.perf_counter()
    target_raw = _ensure_dataset(spec.target_dataset)
    os.makedirs(spec.output_dir, exist_ok=True)
    datasets_echo = {
        "target_dataset": _dataset_echo(spec.target_dataset, target_raw)}

    if spec.source_checkpoint is not None:
        params = cvae.load_checkpoint(spec.source_checkpoint)
        datasets_echo["source_checkpoint"] = str(spec.source_checkpoint)
        source_meta = params.training_meta
    else:
        source = _ensure_dataset(spec.source_dataset, spec.cvae.input_side)
        datasets_echo["source_dataset"] = _dataset_echo(spec.source_dataset, source)
        params, _ = cvae.train(spec.cvae, source, rng_seed=spec.seed)
        source_meta = params.training_meta
    ckpt = "source_checkpoint.bin"
    cvae.save_checkpoint(params, os.path.join(spec.output_dir, ckpt))

    target = preprocess_dataset(target_raw, params.config.input_side)
    checksum_before = _params_checksum(params)
    data = _condition_features(params, target)[SALIENT_CONDITION]
    checksum_after = _params_checksum(params)

    fname = "target_features.csv"
    write_feature_csv(os.path.join(spec.output_dir, fname),
                      data["ids"], data["labels"], data["values"])
    reports = _kfold_all(data["values"], data["labels"], spec.k_list,
                         spec.forest, (spec.seed, 5))
    rows = ["condition,k,fold,accuracy"] + _cv_rows("with_transfer", reports)
    _write(os.path.join(spec.output_dir, "accuracy.csv"), "\n".join(rows) + "\n")

    n_target = len(target.subjects)
    sizes = spec.sizes or tuple(s for s in (10, 20) if s <= n_target)
    with_points = forest.sample_size_curve(
        data["values"], data["labels"], list(sizes), repeats=spec.repeats,
        k=spec.curve_k, seed=_derive_seed(spec.seed, 7), config=spec.forest)
    curve_rows = ["size,arm,mean,std"]
    for p in with_points:
        curve_rows.append(f"{p.size},with_transfer,{repr(p.mean)},{repr(p.std)}")
    results = {
        "accuracy": {"with_transfer": _cv_results(reports)},
        "curve": {"with_transfer": [
            {"size": p.size, "mean": p.mean, "std": p.std} for p in with_points]},
    }
    if spec.with_without_arms:
        retrain_target = preprocess_dataset(target_raw, spec.cvae.input_side)
        without = _without_transfer_curve(spec, retrain_target, sizes)
        results["curve"]["without_transfer"] = without
        for p in without:
            curve_rows.append(
                f"{p['size']},without_transfer,{repr(p['mean'])},{repr(p['std'])}")
    _write(os.path.join(spec.output_dir, "transfer_curve.csv"),
           "\n".join(curve_rows) + "\n")

    report = ExperimentReport(
        kind="transfer",
        spec=_spec_echo(spec, datasets_echo),
        results=results,
        artifacts={"source_checkpoint": ckpt, "target_features": fname,
                   "accuracy": "accuracy.csv", "curve": "transfer_curve.csv"},
        provenance={
            "seed": spec.seed,
            "source_training": source_meta,
            "source_checksum_before_extraction": checksum_before,
            "source_checksum_after_extraction": checksum_after,
            "source_frozen": checksum_before == checksum_after,
        },
    )
    return _finish(spec, report, started)


_RUNNERS = {
    "direct": run_direct,
    "ablation_raw": run_ablation_raw,
    "transfer": run_transfer,
    "sample_curve": run_sample_curve,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    return _RUNNERS[spec.kind](spec)
