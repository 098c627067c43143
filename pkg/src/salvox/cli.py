"""Command-line front end: dataset synthesis, training, extraction,
classification, transfer, region correlation, and 2-D embedding.

Every subcommand reads an optional JSON config file, applies flag
overrides, writes a provenance.json with the fully resolved config, and
confines all writes to the run's output directory. Heavy imports happen
after the thread cap is applied so BLAS pools honor --threads.
"""

import argparse
import json
import os
import sys

OUTPUT_DIR_ENV = "SALVOX_OUTPUT_DIR"
_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for runtime
    # failures, so downgrade usage errors to exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _set_threads(n: int):
    for var in _THREAD_VARS:
        os.environ[var] = str(int(n))


def _load_config(path):
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    # a provenance.json from a previous run replays as-is
    if "subcommand" in cfg and isinstance(cfg.get("config"), dict):
        cfg = cfg["config"]
    return cfg


def _resolve(defaults: dict, args, extra_file_keys=()):
    """defaults < config file < explicit flags; unknown file keys fail."""
    resolved = {"threads": 1, **defaults}
    if getattr(args, "config", None):
        file_cfg = _load_config(args.config)
        allowed = set(resolved) | set(extra_file_keys)
        for key, value in file_cfg.items():
            if key not in allowed:
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = value
    for key in list(resolved):
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _output_dir(resolved) -> str:
    out = resolved.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or "."
    os.makedirs(out, exist_ok=True)
    resolved["output_dir"] = out
    return out


def _write_provenance(out_dir, subcommand, resolved):
    from .cvae import CHECKPOINT_VERSION
    from .data import MANIFEST_VERSION, VOLUME_FORMAT_VERSION

    payload = {
        "subcommand": subcommand,
        "config": resolved,
        "artifact_versions": {
            "checkpoint_format": CHECKPOINT_VERSION,
            "manifest_format": MANIFEST_VERSION,
            "volume_format": VOLUME_FORMAT_VERSION,
        },
    }
    path = os.path.join(out_dir, "provenance.json")
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _int_list(text):
    try:
        return [int(part) for part in str(text).split(",") if part != ""]
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}")


def _read_labels_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["subject_id", "label"]:
            raise ValueError(f"{path}: expected subject_id,label header")
        mapping = {}
        for line in fh:
            sid, label = line.rstrip("\n").split(",")
            mapping[sid] = label
    return mapping


def _load_features(resolved):
    from .pipeline import read_feature_csv

    ids, labels, values = read_feature_csv(resolved["features"])
    if resolved.get("labels"):
        mapping = _read_labels_csv(resolved["labels"])
        missing = [sid for sid in ids if sid not in mapping]
        if missing:
            raise ValueError(f"labels file is missing ids {missing[:5]}")
        labels = [mapping[sid] for sid in ids]
    return ids, list(labels), values


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from .data import PhantomConfig, generate_phantoms, save_dataset

    defaults = {
        "n_positive": 42,
        "n_control": 36,
        "side": 64,
        "shared_structure_scale": 1.0,
        "salient_amplitude": 0.6,
        "salient_region_indices": [3, 15],
        "noise_sigma": 0.03,
        "seed": 0,
        "output_dir": None,
    }
    resolved = _resolve(defaults, args)
    out = _output_dir(resolved)
    cfg = {k: v for k, v in resolved.items()
           if k not in ("output_dir", "threads")}
    cfg["salient_region_indices"] = tuple(cfg["salient_region_indices"])
    dataset = generate_phantoms(PhantomConfig(**cfg))
    save_dataset(dataset, out)
    resolved["salient_region_indices"] = list(resolved["salient_region_indices"])
    _write_provenance(out, "synth", resolved)
    print(f"wrote {len(dataset.subjects)} volumes to {out}")
    return 0


_CVAE_DEFAULTS = {
    "input_side": 64,
    "latent_dim": 16,
    "conv_filters": [64, 128],
    "fc_hidden": 128,
    "deconv_filters": [32, 16, 1],
    "kl_weight": 1.0,
    "recon_stop_threshold": 5e-4,
    "max_iterations": 20000,
    "batch_size": 8,
    "adam": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-7},
    "seed": 0,
}

_FOREST_DEFAULTS = {
    "n_trees": 100,
    "max_depth": None,
    "min_samples_split": 2,
    "features_per_split": "sqrt_total",
    "seed": 0,
}


def _cvae_config(section, args=None):
    from .cvae import CvaeConfig

    cfg = dict(_CVAE_DEFAULTS)
    cfg.update(section or {})
    if args is not None:
        for flag, key in (
            ("input_side", "input_side"),
            ("latent_dim", "latent_dim"),
            ("kl_weight", "kl_weight"),
            ("batch_size", "batch_size"),
            ("max_iterations", "max_iterations"),
            ("stop_threshold", "recon_stop_threshold"),
        ):
            value = getattr(args, flag, None)
            if value is not None:
                cfg[key] = value
    return CvaeConfig(**cfg), cfg


def _forest_config(section, args=None):
    from .forest import ForestConfig

    cfg = dict(_FOREST_DEFAULTS)
    cfg.update(section or {})
    if args is not None and getattr(args, "n_trees", None) is not None:
        cfg["n_trees"] = args.n_trees
    return ForestConfig(**cfg), cfg


def cmd_train(args):
    from . import cvae
    from .data import load_dataset, preprocess_dataset

    defaults = {"data": None, "seed": 0, "output_dir": None, "cvae": {}}
    resolved = _resolve(defaults, args)
    if not resolved["data"]:
        raise ValueError("train needs --data pointing at a dataset directory")
    out = _output_dir(resolved)
    config, cfg_echo = _cvae_config(resolved["cvae"], args)
    resolved["cvae"] = cfg_echo

    dataset = preprocess_dataset(load_dataset(resolved["data"]),
                                 config.input_side)
    print(f"training on {len(dataset.subjects)} subjects "
          f"(side {config.input_side}, latent {config.latent_dim})")
    params, trace = cvae.train(config, dataset, rng_seed=resolved["seed"])
    cvae.save_checkpoint(params, os.path.join(out, "checkpoint.bin"))
    lines = ["iteration,loss,recon_mse"]
    for i, (loss, mse) in enumerate(zip(trace["loss"], trace["recon_mse"]), 1):
        lines.append(f"{i},{repr(float(loss))},{repr(float(mse))}")
    with open(os.path.join(out, "trace.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out, "training.json"), "w") as fh:
        fh.write(json.dumps(params.training_meta, indent=2, sort_keys=True) + "\n")
    _write_provenance(out, "train", resolved)
    meta = params.training_meta
    print(f"stopped after {meta['iterations']} iterations "
          f"(converged={meta['converged']}, recon_mse={meta['final_recon_mse']:.6g})")
    return 0


def cmd_extract(args):
    from . import cvae
    from .data import load_dataset, preprocess_dataset
    from .pipeline import write_feature_csv

    defaults = {
        "checkpoint": None,
        "data": None,
        "which": "salient",
        "mode": "mean",
        "noise_seed": 0,
        "output_dir": None,
    }
    resolved = _resolve(defaults, args)
    if not resolved["checkpoint"] or not resolved["data"]:
        raise ValueError("extract needs --checkpoint and --data")
    out = _output_dir(resolved)
    params = cvae.load_checkpoint(resolved["checkpoint"])
    dataset = preprocess_dataset(load_dataset(resolved["data"]),
                                 params.config.input_side)
    features = cvae.extract_features(
        params, dataset, resolved["which"], resolved["mode"],
        noise_seed=resolved["noise_seed"])
    write_feature_csv(os.path.join(out, "features.csv"),
                      features.subject_ids, features.labels, features.values)
    _write_provenance(out, "extract", resolved)
    print(f"wrote {features.values.shape[0]} x {features.values.shape[1]} "
          f"feature rows ({resolved['which']}/{resolved['mode']})")
    return 0


def cmd_classify(args):
    from .forest import cv_report_csv, cv_report_json, kfold_accuracy

    defaults = {
        "features": None,
        "labels": None,
        "k": 10,
        "seed": 0,
        "output_dir": None,
        "forest": {},
    }
    resolved = _resolve(defaults, args)
    if not resolved["features"]:
        raise ValueError("classify needs --features")
    out = _output_dir(resolved)
    config, cfg_echo = _forest_config(resolved["forest"], args)
    resolved["forest"] = cfg_echo
    _, labels, values = _load_features(resolved)
    report = kfold_accuracy(values, labels, resolved["k"],
                            seed=resolved["seed"], config=config)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(cv_report_csv(report))
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(cv_report_json(report) + "\n")
    _write_provenance(out, "classify", resolved)
    print(f"k={report.k} mean accuracy {report.mean:.4f} (std {report.std:.4f})")
    return 0


def cmd_curve(args):
    from .forest import curve_csv, curve_json, sample_size_curve

    defaults = {
        "features": None,
        "labels": None,
        "sizes": None,
        "repeats": 100,
        "k": 3,
        "seed": 0,
        "output_dir": None,
        "forest": {},
    }
    resolved = _resolve(defaults, args)
    if not resolved["features"]:
        raise ValueError("curve needs --features")
    if not resolved["sizes"]:
        raise ValueError("curve needs --sizes")
    resolved["sizes"] = _int_list(resolved["sizes"]) \
        if isinstance(resolved["sizes"], str) else list(resolved["sizes"])
    out = _output_dir(resolved)
    config, cfg_echo = _forest_config(resolved["forest"], args)
    resolved["forest"] = cfg_echo
    _, labels, values = _load_features(resolved)
    points = sample_size_curve(values, labels, resolved["sizes"],
                               repeats=resolved["repeats"], k=resolved["k"],
                               seed=resolved["seed"], config=config)
    with open(os.path.join(out, "curve.csv"), "w") as fh:
        fh.write(curve_csv(points))
    with open(os.path.join(out, "curve.json"), "w") as fh:
        fh.write(curve_json(points) + "\n")
    _write_provenance(out, "curve", resolved)
    for p in points:
        print(f"size {p.size}: mean {p.mean:.4f} (std {p.std:.4f})")
    return 0


def cmd_transfer(args):
    from . import pipeline

    defaults = {
        "source": None,
        "source_checkpoint": None,
        "target": None,
        "k_list": [3, 5, 10, 20],
        "curve_k": 5,
        "sizes": None,
        "repeats": 100,
        "retrain_repeats": 3,
        "with_without_arms": True,
        "seed": 0,
        "output_dir": None,
        "cvae": {},
        "forest": {},
    }
    resolved = _resolve(defaults, args)
    if not resolved["target"]:
        raise ValueError("transfer needs --target")
    for key in ("k_list", "sizes"):
        if isinstance(resolved[key], str):
            resolved[key] = _int_list(resolved[key])
    out = _output_dir(resolved)
    cvae_config, cvae_echo = _cvae_config(
        {**{"recon_stop_threshold": pipeline.TRANSFER_STOP_THRESHOLD},
         **(resolved["cvae"] or {})})
    forest_config, forest_echo = _forest_config(resolved["forest"], args)
    resolved["cvae"], resolved["forest"] = cvae_echo, forest_echo
    spec = pipeline.ExperimentSpec(
        kind="transfer",
        source_dataset=resolved["source"],
        source_checkpoint=resolved["source_checkpoint"],
        target_dataset=resolved["target"],
        cvae=cvae_config,
        forest=forest_config,
        k_list=tuple(resolved["k_list"]),
        curve_k=resolved["curve_k"],
        sizes=tuple(resolved["sizes"] or ()),
        repeats=resolved["repeats"],
        retrain_repeats=resolved["retrain_repeats"],
        with_without_arms=resolved["with_without_arms"],
        seed=resolved["seed"],
        output_dir=out,
    )
    report = pipeline.run_transfer(spec)
    _write_provenance(out, "transfer", resolved)
    for arm, points in report.results["curve"].items():
        for p in points:
            print(f"{arm} size {p['size']}: mean {p['mean']:.4f}")
    return 0


def cmd_rsa(args):
    from . import cvae, rsa
    from .data import load_dataset, preprocess_dataset

    defaults = {
        "checkpoint": None,
        "data": None,
        "samples": 10,
        "permutations": 10000,
        "alpha": 0.05,
        "seed": 0,
        "output_dir": None,
    }
    resolved = _resolve(defaults, args)
    if not resolved["checkpoint"] or not resolved["data"]:
        raise ValueError("rsa needs --checkpoint and --data")
    out = _output_dir(resolved)
    params = cvae.load_checkpoint(resolved["checkpoint"])
    dataset = preprocess_dataset(load_dataset(resolved["data"]),
                                 params.config.input_side)
    report = rsa.rsa_report(
        params, dataset, seed=resolved["seed"], n_samples=resolved["samples"],
        permutations=resolved["permutations"], alpha=resolved["alpha"])
    with open(os.path.join(out, "rsa.csv"), "w") as fh:
        fh.write(rsa.rsa_csv(report))
    with open(os.path.join(out, "rsa.svg"), "w") as fh:
        fh.write(rsa.render_rsa_svg(report))
    summary = {
        "flagged_regions": report.flagged_regions,
        "distinguishing_regions": report.distinguishing_regions,
        "alpha": report.alpha,
        "n_samples": report.n_samples,
        "permutations": report.permutations,
        "excluded": report.excluded,
    }
    with open(os.path.join(out, "rsa.json"), "w") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_provenance(out, "rsa", resolved)
    flagged = ", ".join(report.flagged_regions) or "none"
    print(f"flagged regions: {flagged}")
    return 0


def cmd_tsne(args):
    from .embed import TsneConfig, embedding_to_plot, trace_csv, tsne_embed

    defaults = {
        "features": None,
        "perplexity": None,
        "iterations": 1000,
        "learning_rate": 200.0,
        "init": "pca",
        "seed": 0,
        "output_dir": None,
    }
    resolved = _resolve(defaults, args)
    if not resolved["features"]:
        raise ValueError("tsne needs --features")
    out = _output_dir(resolved)
    config = TsneConfig(
        perplexity=resolved["perplexity"], iterations=resolved["iterations"],
        learning_rate=resolved["learning_rate"], init=resolved["init"],
        seed=resolved["seed"])
    ids, labels, values = _load_features(resolved)
    coords, trace = tsne_embed(values, labels, config)
    embedding_to_plot(coords, labels, os.path.join(out, "embedding"), ids=ids)
    with open(os.path.join(out, "trace.csv"), "w") as fh:
        fh.write(trace_csv(trace))
    _write_provenance(out, "tsne", resolved)
    print(f"embedded {len(ids)} rows; final KL {trace[-1]:.4f}")
    return 0


def cmd_pipeline(args):
    from . import cvae as cvae_mod
    from . import pipeline, rsa
    from .data import (PhantomConfig, generate_phantoms, load_dataset,
                       preprocess_dataset, save_dataset)

    defaults = {
        "dataset": None,
        "synth": None,
        "source_dataset": None,
        "source_synth": None,
        "k_list": [3, 5, 10, 20],
        "curve_k": 5,
        "sizes": None,
        "repeats": 100,
        "retrain_repeats": 3,
        "raw_side": 16,
        "embed": True,
        "rsa": {},
        "seed": 0,
        "output_dir": None,
        "cvae": {},
        "transfer_cvae": {},
        "forest": {},
        "tsne": None,
    }
    resolved = _resolve(defaults, args)
    out = _output_dir(resolved)
    seed = resolved["seed"]

    if resolved["synth"] is not None:
        synth_cfg = dict(resolved["synth"])
        synth_cfg["salient_region_indices"] = tuple(
            synth_cfg.get("salient_region_indices", [3, 15]))
        dataset = generate_phantoms(PhantomConfig(**synth_cfg))
        save_dataset(dataset, os.path.join(out, "data"))
        print(f"synthesized {len(dataset.subjects)} subjects")
    elif resolved["dataset"]:
        dataset = load_dataset(resolved["dataset"])
    else:
        raise ValueError("pipeline needs a dataset path or a synth section")

    cvae_config, cvae_echo = _cvae_config(resolved["cvae"])
    forest_config, forest_echo = _forest_config(resolved["forest"])
    resolved["cvae"], resolved["forest"] = cvae_echo, forest_echo
    tsne_config = None
    if resolved["tsne"]:
        from .embed import TsneConfig
        tsne_config = TsneConfig(**resolved["tsne"])
    dataset = preprocess_dataset(dataset, cvae_config.input_side)
    common = dict(forest=forest_config, k_list=tuple(resolved["k_list"]),
                  seed=seed)

    print("stage 1/4: direct classification")
    pipeline.run_direct(pipeline.ExperimentSpec(
        kind="direct", dataset=dataset, cvae=cvae_config,
        embed=resolved["embed"], tsne=tsne_config,
        output_dir=os.path.join(out, "direct"), **common))

    print("stage 2/4: raw-voxel ablation")
    pipeline.run_ablation_raw(pipeline.ExperimentSpec(
        kind="ablation_raw", dataset=dataset, raw_side=resolved["raw_side"],
        output_dir=os.path.join(out, "ablation"), **common))

    if resolved["source_synth"] is not None or resolved["source_dataset"]:
        print("stage 3/4: transfer")
        if resolved["source_synth"] is not None:
            src_cfg = dict(resolved["source_synth"])
            src_cfg["salient_region_indices"] = tuple(
                src_cfg.get("salient_region_indices", [3, 15]))
            source = generate_phantoms(PhantomConfig(**src_cfg))
            save_dataset(source, os.path.join(out, "source_data"))
        else:
            source = load_dataset(resolved["source_dataset"])
        transfer_cvae, _ = _cvae_config(
            {**{"recon_stop_threshold": pipeline.TRANSFER_STOP_THRESHOLD},
             **(resolved["transfer_cvae"] or resolved["cvae"] or {})})
        pipeline.run_transfer(pipeline.ExperimentSpec(
            kind="transfer", source_dataset=source, target_dataset=dataset,
            cvae=transfer_cvae, curve_k=resolved["curve_k"],
            sizes=tuple(resolved["sizes"] or ()), repeats=resolved["repeats"],
            retrain_repeats=resolved["retrain_repeats"],
            output_dir=os.path.join(out, "transfer"), **common))
    else:
        print("stage 3/4: transfer skipped (no source dataset)")

    if dataset.region_table is not None:
        print("stage 4/4: region correlation")
        rsa_dir = os.path.join(out, "rsa")
        os.makedirs(rsa_dir, exist_ok=True)
        params = cvae_mod.load_checkpoint(
            os.path.join(out, "direct", "cvae_checkpoint.bin"))
        rsa_cfg = {"samples": 10, "permutations": 10000, "alpha": 0.05}
        rsa_cfg.update(resolved["rsa"] or {})
        resolved["rsa"] = rsa_cfg
        report = rsa.rsa_report(
            params, dataset, seed=seed, n_samples=rsa_cfg["samples"],
            permutations=rsa_cfg["permutations"], alpha=rsa_cfg["alpha"])
        with open(os.path.join(rsa_dir, "rsa.csv"), "w") as fh:
            fh.write(rsa.rsa_csv(report))
        with open(os.path.join(rsa_dir, "rsa.svg"), "w") as fh:
            fh.write(rsa.render_rsa_svg(report))
        flagged = ", ".join(report.flagged_regions) or "none"
        print(f"flagged regions: {flagged}")
    else:
        print("stage 4/4: region correlation skipped (no region table)")

    _write_provenance(out, "pipeline", resolved)
    print(f"pipeline complete; artifacts under {out}")
    return 0


# ---------------------------------------------------------------------------
# argument surface
# ---------------------------------------------------------------------------

def _common_flags(sub):
    sub.add_argument("--config", help="JSON config file (flags override it)")
    sub.add_argument("--seed", type=int, help="base random seed (default 0)")
    sub.add_argument("--out", dest="output_dir",
                     help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")
    sub.add_argument("--threads", type=int, default=None,
                     help="thread cap for numeric kernels (default 1)")


def build_parser() -> _Parser:
    parser = _Parser(prog="salvox",
                     description="volumetric contrastive-latent toolkit")
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("synth", parents=[], help="generate a phantom cohort",
                        description="Generate a labeled phantom cohort.")
    _common_flags(p)
    p.add_argument("--n-positive", type=int, dest="n_positive",
                   help="positive subjects (default 42)")
    p.add_argument("--n-control", type=int, dest="n_control",
                   help="control subjects (default 36)")
    p.add_argument("--side", type=int, help="volume side length (default 64)")
    p.add_argument("--salient-amplitude", type=float, dest="salient_amplitude",
                   help="planted effect amplitude (default 0.6)")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma",
                   help="voxel noise sigma (default 0.03)")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train the two-channel autoencoder",
                        description="Train on a dataset directory.")
    _common_flags(p)
    p.add_argument("--data", help="dataset directory (required)")
    p.add_argument("--input-side", type=int, dest="input_side",
                   help="encoder input side, multiple of 8 (default 64)")
    p.add_argument("--latent-dim", type=int, dest="latent_dim",
                   help="latent dimension per channel (default 16)")
    p.add_argument("--kl-weight", type=float, dest="kl_weight",
                   help="KL term weight (default 1.0)")
    p.add_argument("--batch-size", type=int, dest="batch_size",
                   help="per-class batch size (default 8)")
    p.add_argument("--max-iterations", type=int, dest="max_iterations",
                   help="iteration cap (default 20000)")
    p.add_argument("--stop-threshold", type=float, dest="stop_threshold",
                   help="reconstruction MSE stop threshold (default 5e-4)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("extract", help="extract latent features",
                        description="Extract per-subject latent features.")
    _common_flags(p)
    p.add_argument("--checkpoint", help="trained checkpoint file (required)")
    p.add_argument("--data", help="dataset directory (required)")
    p.add_argument("--which", choices=("salient", "background"),
                   help="latent channel (default salient)")
    p.add_argument("--mode", choices=("mean", "sampled"),
                   help="posterior mean or one sample (default mean)")
    p.add_argument("--noise-seed", type=int, dest="noise_seed",
                   help="sampling noise seed (default 0)")
    p.set_defaults(func=cmd_extract)

    p = subs.add_parser("classify", help="K-fold forest accuracy",
                        description="Cross-validated forest accuracy.")
    _common_flags(p)
    p.add_argument("--features", help="feature CSV (required)")
    p.add_argument("--labels", help="optional subject_id,label CSV override")
    p.add_argument("--k", type=int, help="fold count (default 10)")
    p.add_argument("--n-trees", type=int, dest="n_trees",
                   help="trees per forest (default 100)")
    p.set_defaults(func=cmd_classify)

    p = subs.add_parser("curve", help="accuracy vs sample size",
                        description="Accuracy against training-set size.")
    _common_flags(p)
    p.add_argument("--features", help="feature CSV (required)")
    p.add_argument("--labels", help="optional subject_id,label CSV override")
    p.add_argument("--sizes", help="comma-separated sizes, e.g. 10,20,40 (required)")
    p.add_argument("--repeats", type=int, help="subsamples per size (default 100)")
    p.add_argument("--k", type=int, help="fold count per subsample (default 3)")
    p.add_argument("--n-trees", type=int, dest="n_trees",
                   help="trees per forest (default 100)")
    p.set_defaults(func=cmd_curve)

    p = subs.add_parser("transfer", help="pretrain, freeze, classify target",
                        description="Source-pretrained encoder on a target cohort.")
    _common_flags(p)
    p.add_argument("--source", help="source dataset directory")
    p.add_argument("--source-checkpoint", dest="source_checkpoint",
                   help="reuse a pretrained source checkpoint")
    p.add_argument("--target", help="target dataset directory (required)")
    p.add_argument("--k-list", dest="k_list",
                   help="comma-separated fold counts (default 3,5,10,20)")
    p.add_argument("--curve-k", type=int, dest="curve_k",
                   help="fold count for the size curve (default 5)")
    p.add_argument("--sizes", help="comma-separated curve sizes (default 10,20)")
    p.add_argument("--repeats", type=int,
                   help="with-transfer subsamples per size (default 100)")
    p.add_argument("--retrain-repeats", type=int, dest="retrain_repeats",
                   help="without-transfer retrainings per size (default 3)")
    p.add_argument("--n-trees", type=int, dest="n_trees",
                   help="trees per forest (default 100)")
    p.set_defaults(func=cmd_transfer)

    p = subs.add_parser("rsa", help="latent-vs-region correlation report",
                        description="Region correlation over latent samples.")
    _common_flags(p)
    p.add_argument("--checkpoint", help="trained checkpoint file (required)")
    p.add_argument("--data", help="dataset directory with region table (required)")
    p.add_argument("--samples", type=int,
                   help="latent samples per channel (default 10)")
    p.add_argument("--permutations", type=int,
                   help="permutations for the null (default 10000)")
    p.add_argument("--alpha", type=float,
                   help="significance level (default 0.05)")
    p.set_defaults(func=cmd_rsa)

    p = subs.add_parser("tsne", help="2-D embedding of a feature CSV",
                        description="Exact 2-D stochastic-neighbor embedding.")
    _common_flags(p)
    p.add_argument("--features", help="feature CSV (required)")
    p.add_argument("--labels", help="optional subject_id,label CSV override")
    p.add_argument("--perplexity", type=float,
                   help="target perplexity (default min(30, (n-1)/3))")
    p.add_argument("--iterations", type=int,
                   help="gradient iterations (default 1000)")
    p.add_argument("--learning-rate", type=float, dest="learning_rate",
                   help="gradient step size (default 200)")
    p.add_argument("--init", choices=("pca", "random"),
                   help="initial layout (default pca)")
    p.set_defaults(func=cmd_tsne)

    p = subs.add_parser("pipeline", help="run every experiment stage",
                        description="Direct, ablation, transfer, and region "
                                    "correlation in one run.")
    _common_flags(p)
    p.add_argument("--dataset", help="existing dataset directory")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1

    threads = args.threads
    if threads is None and getattr(args, "config", None):
        try:
            threads = _load_config(args.config).get("threads")
        except (OSError, ValueError, json.JSONDecodeError):
            threads = None  # surfaced properly by the handler
    _set_threads(threads or 1)

    try:
        return int(args.func(args) or 0)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
