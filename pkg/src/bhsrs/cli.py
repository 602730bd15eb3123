"""Command-line front end.

Every command writes its CSV/PGM/container outputs plus a JSON run manifest.
Options resolve as: command-line flags, then ``--config`` file, then defaults.
A config file is TOML (top-level keys and/or a table named after the command)
or a previous run manifest, whose resolved config is replayed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .container import content_hash, save
from .dataset import (TEST, SplitAssignment, extract_patches, load_labels, make_blob_cube, overlap_histogram,
                      read_envi, read_pgm, write_envi, write_pgm)
from .experiment import (build_features, load_checkpoint, load_features, make_split, predict_coords, run_repeat,
                         save_checkpoint, save_features, summarize)
from .features import DEFAULT_LAMBDAS
from .layers import BAYESIAN, FREQUENTIST, NetworkSpec
from .pruning import prune_sweep
from .training import DEFAULT_FRACTIONS, TrainConfig, metrics, uncertainty, uncertainty_filter_curve

logger = logging.getLogger("bhsrs")

MODES = {"bayesian": BAYESIAN, "bnn": BAYESIAN, "cnn": FREQUENTIST, "frequentist": FREQUENTIST}

DEFAULTS = {
    "convert": {"input": None, "output": None, "data": None, "labels": None, "features": "emap",
                "lambdas": list(DEFAULT_LAMBDAS), "pca_target": 0.99},
    "train": {"features": None, "labels": None, "out": None, "mode": "bayesian", "seed": 0, "repeats": 20,
              "epochs": 300, "batch_size": 16, "lr": 1e-3, "mc_samples": 1, "ensemble": 50, "augment": True,
              "widths": [128, 256, 512], "patch": 9, "prior_sigma": 0.1, "pixels_per_class": 20,
              "val_fraction": 0.1, "split": "cc"},
    "prune": {"checkpoint": None, "features": None, "labels": None, "out": None, "step": 0.1,
              "max_fraction": 0.9, "draws": 0, "seed": 0},
    "uncertainty": {"checkpoint": None, "features": None, "labels": None, "out": None, "draws": 50,
                    "reduction": "trace", "kind": "aleatoric", "fractions": list(DEFAULT_FRACTIONS), "seed": 0},
    "split-stats": {"labels": None, "out": None, "policy": "cc", "pixels_per_class": 20, "val_fraction": 0.1,
                    "seed": 0, "patch_size": 9, "max_distance": None},
    "synth": {"out": None, "height": 64, "width": 64, "bands": 8, "classes": 4, "regions": 4, "noise": 0.35,
              "seed": 0},
}
REQUIRED = {
    "convert": ("input", "output"),
    "train": ("features", "out"),
    "prune": ("checkpoint", "features", "out"),
    "uncertainty": ("checkpoint", "features", "out"),
    "split-stats": ("labels", "out"),
    "synth": ("out",),
}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def version_string() -> str:
    """``git describe`` output when run from a checkout, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_config_file(path, command: str) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        manifest = json.loads(path.read_text())
        if manifest.get("command") not in (None, command):
            raise CliError(f"{path} is a manifest for {manifest['command']!r}, not {command!r}")
        return dict(manifest.get("config", {}))
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    table = data.pop(command, {})
    flat = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
    flat.update({k.replace("-", "_"): v for k, v in table.items()})
    return flat


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    config = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        from_file = load_config_file(args.config, command)
        unknown = set(from_file) - set(config)
        if unknown:
            raise CliError(f"unknown {command} option(s) in {args.config}: {', '.join(sorted(unknown))}")
        config.update(from_file)
    config.update({k: v for k, v in vars(args).items() if k in config and v is not None})
    missing = [k for k in REQUIRED[command] if config.get(k) is None]
    if missing:
        raise CliError(f"missing required option(s): {', '.join(missing)}")
    return config


def write_manifest(path, command: str, config: dict, inputs: list, seeds: list[int], started: float,
                   outputs: list, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): file_hash(p) for p in inputs if p is not None},
        "seeds": seeds,
        "version": version_string(),
        "duration_s": round(time.time() - started, 3),
        "outputs": {str(p): file_hash(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_inputs(features_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    features, cached_labels, _ = load_features(features_path)
    if labels_path is not None:
        labels = load_labels(labels_path)
    elif cached_labels is not None:
        labels = cached_labels
    else:
        raise CliError(f"{features_path} carries no labels; pass a labels file")
    if labels.shape != features.shape[:2]:
        raise CliError(f"labels shape {labels.shape} does not match features {features.shape[:2]}")
    return features, labels


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(n_jobs: int) -> int:
    cap = os.environ.get("BHSRS_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_jobs, limit))


def _eval_coords(meta: dict, labels: np.ndarray) -> np.ndarray:
    """Test pixels of the checkpoint's split, or every labeled pixel when it has none."""
    if meta.get("split"):
        split = SplitAssignment.from_json(meta["split"])
        if split.roles.shape != labels.shape:
            raise CliError(f"checkpoint split shape {split.roles.shape} does not match labels {labels.shape}")
        return split.coords(TEST)
    return np.argwhere(labels > 0)


# ---------------------------------------------------------------- commands


def cmd_convert(cfg: dict, started: float) -> dict:
    src = Path(cfg["input"])
    if src.suffix.lower() == ".pgm":
        cube = read_pgm(src).astype(np.float64)[:, :, None]
        data_file = None
    else:
        cube, _ = read_envi(src, cfg["data"])
        data_file = cfg["data"] or next((src.with_suffix(s) for s in (".raw", ".img", ".dat", ".bsq", ".bil", ".bip")
                                         if src.with_suffix(s).exists()), None)
    labels = load_labels(cfg["labels"]) if cfg["labels"] else None
    if labels is not None and labels.shape != cube.shape[:2]:
        raise CliError(f"labels shape {labels.shape} does not match cube {cube.shape[:2]}")
    params = {"features": cfg["features"], "lambdas": list(cfg["lambdas"]), "pca_target": cfg["pca_target"]}
    features = build_features(cube, labels, tuple(cfg["lambdas"]), cfg["pca_target"], cfg["features"])
    source = content_hash(np.asarray(cube, dtype=np.float64), *(() if labels is None else (labels,)))
    out = Path(cfg["output"])
    save_features(out, features, labels, params, source)
    manifest = out.with_name(out.name + ".manifest.json")
    write_manifest(manifest, "convert", cfg, [src, data_file, cfg["labels"]], [], started, [out],
                   {"feature_shape": list(features.shape)})
    print(f"wrote {out} features {features.shape}")
    return {"features": features, "labels": labels}


def _repeat_job(features, labels, spec, cfg, seed):
    config = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["mc_samples"], cfg["ensemble"], seed,
                         bool(cfg["augment"]))
    return run_repeat(features, labels, spec, config, cfg["pixels_per_class"], cfg["val_fraction"], cfg["split"])


def cmd_train(cfg: dict, started: float) -> dict:
    if cfg["mode"] not in MODES:
        raise CliError(f"unknown mode {cfg['mode']!r}; choose bayesian or cnn")
    if cfg["repeats"] < 1:
        raise CliError("repeats must be >= 1")
    features, labels = _load_inputs(cfg["features"], cfg["labels"])
    out = _out_dir(cfg["out"])
    n_classes = int(labels.max())
    spec = NetworkSpec(features.shape[2], n_classes, tuple(cfg["widths"]), patch=cfg["patch"],
                       mode=MODES[cfg["mode"]], prior_sigma=cfg["prior_sigma"])
    seeds = [cfg["seed"] + r for r in range(cfg["repeats"])]
    with ThreadPoolExecutor(_threads(len(seeds))) as pool:
        results = list(pool.map(lambda s: _repeat_job(features, labels, spec, cfg, s), seeds))

    outputs, rows = [], []
    for r, res in enumerate(results):
        config = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["mc_samples"], cfg["ensemble"],
                             res.seed, bool(cfg["augment"]))
        ckpt = out / f"checkpoint_r{r:02d}.hsrs"
        save_checkpoint(ckpt, res.network, config, res.train_result, res.split, {"repeat": r})
        trace = write_csv(out / f"trace_r{r:02d}.csv", ["epoch", "train_loss", "train_nll", "val_loss", "val_kappa"],
                          [(e.epoch, e.train_loss, e.train_nll, e.val_loss, e.val_kappa) for e in res.train_result.history])
        outputs += [ckpt, trace]
        e, s = res.ensemble_metrics, res.single_metrics
        rows.append((r, res.seed, res.train_result.best_epoch, res.train_result.best_kappa,
                     e.kappa, e.overall_accuracy, e.average_accuracy, s.kappa, s.overall_accuracy, s.average_accuracy))
    outputs.append(write_csv(out / "metrics.csv",
                             ["repeat", "seed", "best_epoch", "val_kappa", "ensemble_kappa", "ensemble_oa",
                              "ensemble_aa", "single_kappa", "single_oa", "single_aa"], rows))
    table = {"ensemble": summarize([r.ensemble_metrics for r in results]),
             "single": summarize([r.single_metrics for r in results])}
    outputs.append(write_csv(out / "summary.csv",
                             ["prediction", "kappa_mean", "kappa_std", "oa_mean", "oa_std", "aa_mean", "aa_std"],
                             [(name, *t["kappa"], *t["overall_accuracy"], *t["average_accuracy"])
                              for name, t in table.items()]))
    write_manifest(out / "manifest.json", "train", cfg, [cfg["features"], cfg["labels"]], seeds, started, outputs,
                   {"summary": table})
    k_mean, k_std = table["ensemble"]["kappa"]
    print(f"{cfg['mode']} kappa {k_mean:.4f} +/- {k_std:.4f} over {len(seeds)} repeat(s)")
    return {"results": results, "summary": table}


def cmd_prune(cfg: dict, started: float) -> dict:
    network, meta, _ = load_checkpoint(cfg["checkpoint"])
    features, labels = _load_inputs(cfg["features"], cfg["labels"])
    out = _out_dir(cfg["out"])
    coords = _eval_coords(meta, labels)
    batch = extract_patches(features, coords, network.spec.patch, labels)
    curve = prune_sweep(network, batch.patches, batch.labels, cfg["step"], cfg["max_fraction"],
                        cfg["draws"] or None, cfg["seed"])
    csv_path = write_csv(out / "prune.csv", ["fraction", "kappa", "retention_ratio"],
                         zip(curve.fractions, curve.kappas, curve.retention))
    masks = {f"f{m.fraction:.4f}/mask.{i}": keep.astype(np.uint8) for m in curve.masks for i, keep in enumerate(m.keep)}
    mask_path = out / "masks.hsrs"
    save(mask_path, {"format": "prune-masks", "checkpoint": file_hash(cfg["checkpoint"]),
                     "fractions": [float(f) for f in curve.fractions]}, masks)
    drop = curve.drop_fraction()
    write_manifest(out / "manifest.json", "prune", cfg, [cfg["checkpoint"], cfg["features"], cfg["labels"]],
                   [cfg["seed"]], started, [csv_path, mask_path], {"drop_fraction": drop})
    print(f"kappa falls below 70% retention at fraction {drop}" if drop is not None
          else "kappa stays above 70% retention over the sweep")
    return {"curve": curve}


def cmd_uncertainty(cfg: dict, started: float) -> dict:
    if cfg["kind"] not in ("aleatoric", "epistemic", "total"):
        raise CliError(f"unknown uncertainty kind {cfg['kind']!r}")
    network, meta, _ = load_checkpoint(cfg["checkpoint"])
    features, labels = _load_inputs(cfg["features"], cfg["labels"])
    out = _out_dir(cfg["out"])
    coords = _eval_coords(meta, labels)
    truth = labels[coords[:, 0], coords[:, 1]] - 1
    network.reseed(cfg["seed"])
    ensemble = predict_coords(network, features, coords, cfg["draws"])
    report = uncertainty(ensemble, cfg["reduction"])
    scores = {"aleatoric": report.aleatoric, "epistemic": report.epistemic,
              "total": report.aleatoric + report.epistemic}[cfg["kind"]]
    predicted = ensemble.predicted
    k = network.spec.n_classes
    fractions = [float(f) for f in cfg["fractions"]]
    rows = []
    for policy in ("most-uncertain", "random"):
        kappas = uncertainty_filter_curve(predicted, truth, scores, fractions, policy, cfg["seed"], k)
        rows += [(f, policy, kv) for f, kv in zip(fractions, kappas)]
    curve_path = write_csv(out / "filter_curve.csv", ["fraction", "policy", "kappa"], rows)
    pixel_path = write_csv(out / "pixels.csv", ["row", "col", "truth", "predicted", "aleatoric", "epistemic"],
                           zip(coords[:, 0], coords[:, 1], truth + 1, predicted + 1, report.aleatoric,
                               report.epistemic))
    # correctness map: 0 not evaluated, 1 wrong, 2 correct
    correct = np.zeros(labels.shape, dtype=np.int64)
    correct[coords[:, 0], coords[:, 1]] = np.where(predicted == truth, 2, 1)
    # uncertainty map: 16-bit, scaled to the largest score
    umap = np.zeros(labels.shape, dtype=np.int64)
    top = float(scores.max(initial=0.0))
    if top > 0:
        umap[coords[:, 0], coords[:, 1]] = np.rint(scores / top * 65535).astype(np.int64)
    write_pgm(out / "correctness.pgm", correct)
    write_pgm(out / "uncertainty.pgm", umap)
    outputs = [curve_path, pixel_path, out / "correctness.pgm", out / "uncertainty.pgm"]
    write_manifest(out / "manifest.json", "uncertainty", cfg, [cfg["checkpoint"], cfg["features"], cfg["labels"]],
                   [cfg["seed"]], started, outputs,
                   {"metrics": {key: v for key, v in metrics(predicted, truth, k).as_dict().items() if key != "confusion"},
                    "uncertainty_scale": top})
    print(f"filtered {len(truth)} pixels; kappa {rows[0][2]:.4f} before filtering")
    return {"ensemble": ensemble, "report": report, "rows": rows}


def cmd_split_stats(cfg: dict, started: float) -> dict:
    labels = load_labels(cfg["labels"])
    out = _out_dir(cfg["out"])
    split = make_split(labels, cfg["policy"], cfg["pixels_per_class"], cfg["val_fraction"], cfg["seed"])
    hist = overlap_histogram(split, labels, cfg["patch_size"], cfg["max_distance"])
    csv_path = write_csv(out / "overlap.csv", ["distance", "fraction_below"], zip(hist.thresholds, hist.fraction_below))
    split_path = out / "split.json"
    split_path.write_text(split.to_json() + "\n")
    write_manifest(out / "manifest.json", "split-stats", cfg, [cfg["labels"]], [cfg["seed"]], started,
                   [csv_path, split_path], {"headline_overlap": hist.headline, "split_flags": split.flags})
    print(f"{cfg['policy']} split: {100 * hist.headline:.2f}% of evaluation pixels within distance "
          f"{cfg['patch_size']} of a same-class training pixel")
    return {"split": split, "histogram": hist}


def cmd_synth(cfg: dict, started: float) -> dict:
    out = _out_dir(cfg["out"])
    cube = make_blob_cube(cfg["height"], cfg["width"], cfg["bands"], cfg["classes"], cfg["regions"],
                          noise=cfg["noise"], seed=cfg["seed"])
    raw = write_envi(out / "cube.hdr", cube.data)
    write_pgm(out / "labels.pgm", cube.labels)
    outputs = [out / "cube.hdr", raw, out / "labels.pgm"]
    write_manifest(out / "manifest.json", "synth", cfg, [], [cfg["seed"]], started, outputs)
    print(f"wrote synthetic cube {cube.data.shape} to {out}")
    return {"cube": cube}


COMMANDS = {"convert": cmd_convert, "train": cmd_train, "prune": cmd_prune, "uncertainty": cmd_uncertainty,
            "split-stats": cmd_split_stats, "synth": cmd_synth}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bhsrs", description="Bayesian CNN for limited-data hyperspectral "
                                                              "image classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML options file or a previous run manifest")
        return p

    p = add("convert", "Run the EMAP-PCA feature pipeline on an ENVI cube (or PGM) and cache the result.")
    p.add_argument("input", nargs="?", help="ENVI header (.hdr) or single-band .pgm")
    p.add_argument("output", nargs="?", help="feature cache to write (.hsrs)")
    p.add_argument("--data", help="ENVI data file if not next to the header")
    p.add_argument("--labels", help="ground-truth labels (.pgm or ENVI header); 0 = unlabeled")
    p.add_argument("--features", choices=("emap", "raw"))
    p.add_argument("--lambdas", type=_int_list, help="area thresholds, comma separated")
    p.add_argument("--pca-target", type=float, help="explained-variance fraction kept by each PCA")

    p = add("train", "Train and test over repeated connected-component splits.")
    p.add_argument("features", nargs="?", help="feature cache from 'convert'")
    p.add_argument("labels", nargs="?", help="labels file; defaults to labels stored in the cache")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--seed", type=int, help="repeat r uses seed + r")
    p.add_argument("--repeats", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mc-samples", type=int, help="Monte Carlo draws per ELBO evaluation")
    p.add_argument("--ensemble", type=int, help="test-time draws T")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--widths", type=_int_list, help="conv widths, comma separated")
    p.add_argument("--patch", type=int)
    p.add_argument("--prior-sigma", type=float)
    p.add_argument("--pixels-per-class", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--split", choices=("cc", "random"))

    p = add("prune", "Global pruning sweep of a trained checkpoint (fraction,kappa,retention_ratio).")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("features", nargs="?")
    p.add_argument("labels", nargs="?")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--step", type=float)
    p.add_argument("--max-fraction", type=float)
    p.add_argument("--draws", type=int, help="ensemble draws per evaluation (0 = posterior mean)")
    p.add_argument("--seed", type=int)

    p = add("uncertainty", "Uncertainty filtering curve and per-pixel correctness/uncertainty maps.")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("features", nargs="?")
    p.add_argument("labels", nargs="?")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--draws", type=int)
    p.add_argument("--reduction", choices=("trace", "predicted"))
    p.add_argument("--kind", choices=("aleatoric", "epistemic", "total"))
    p.add_argument("--fractions", type=_float_list)
    p.add_argument("--seed", type=int)

    p = add("split-stats", "Train/test patch overlap histogram (distance,fraction_below).")
    p.add_argument("labels", nargs="?")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--policy", choices=("cc", "random"))
    p.add_argument("--pixels-per-class", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--max-distance", type=int)

    p = add("synth", "Write a synthetic blob cube (ENVI) and its labels (PGM).")
    p.add_argument("out", nargs="?", help="output directory")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--regions", type=int, help="regions per class")
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    return parser


def run(argv: list[str] | None = None) -> dict:
    """Parse and execute; raises on failure. Returns the command's in-memory results."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args.command, args)
    return COMMANDS[args.command](cfg, time.time())


def main(argv: list[str] | None = None) -> int:
    try:
        run(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - report every failure as a structured message
        command = next((a for a in (argv if argv is not None else sys.argv[1:]) if a in COMMANDS), "bhsrs")
        print(f"bhsrs {command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
