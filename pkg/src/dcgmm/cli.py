"""Experiment runner: train, continual, oracle-compare, grid, sample, outlier-sweep.

Every command is driven by a flat key=value config (see :mod:`dcgmm.config`)
and is deterministic given (config, seed): CSVs and checkpoints are
byte-identical across runs.  The wall_ms column of measurement CSVs is
therefore taken from a zero clock.  Exit codes: 0 success, 1 runtime
failure, 2 config/usage error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import continual as cl
from . import em
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ExperimentConfig, format_config, grid_configs,
                     load_config, parse_grid_spec)
from .data import LabeledDataset, load_idx
from .errors import CapabilityError, ConfigError
from .gmm import bmu_responsibilities, full_log_likelihood, train_gmm
from .images import tile_images, write_pgm
from .model import (DcgmmModel, GmmLayerSpec, build_model, parse_architecture,
                    validate_architecture)
from .layers import FoldingSpec
from .tensor import Tensor4


def _data_root() -> Path:
    return Path(os.environ.get("DCGMM_DATA_DIR", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _data_root() / p


def _require_file(path: str, key: str) -> Path:
    if not path:
        raise ConfigError(f"config key {key} is required for this command")
    p = _resolve(path)
    if not p.is_file():
        raise ConfigError(f"{key}: dataset file not found: {p}")
    return p


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    train = load_idx(_require_file(cfg["data.train_images"], "data.train_images"),
                     _require_file(cfg["data.train_labels"], "data.train_labels"),
                     name=cfg["data.name"] or "train")
    test = load_idx(_require_file(cfg["data.test_images"], "data.test_images"),
                    _require_file(cfg["data.test_labels"], "data.test_labels"),
                    name=cfg["data.name"] or "test")
    return train, test


def model_from_config(cfg: ExperimentConfig, input_shape, seed: int) -> DcgmmModel:
    arch = cfg["model.arch"]
    if not arch:
        raise ConfigError("config key model.arch is required")
    return build_model(
        arch, input_shape,
        eps=cfg["train.eps"], eps_classifier=cfg.eps_classifier,
        mu_range=cfg["gmm.mu_range"], d_max=cfg["gmm.d_max"],
        sigma0=cfg.sigma0, sigma_inf=cfg["gmm.sigma_inf"], alpha=cfg.alpha,
        delta=cfg["gmm.delta"], warmup_fraction=cfg["train.warmup_fraction"],
        annealing=cfg["gmm.annealing"], seed=seed)


def train_model(cfg: ExperimentConfig, train_ds: LabeledDataset, seed: int,
                measure=None) -> DcgmmModel:
    """Train a model for cfg's epochs; `measure(iteration, report)` is called
    at the evenly spaced measurement points."""
    model = model_from_config(cfg, train_ds.samples.shape[1:], seed)
    batch = cfg["train.batch"]
    iters = cl.iterations_for(len(train_ds), batch, cfg["train.epochs"])
    points = set(cl.measurement_points(iters, cfg["train.n_measure"]))
    model.begin_training(iters)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    supervised = model.linear is not None
    stream = None
    t = 0
    while t < iters:
        order = rng.permutation(len(train_ds))
        for start in range(0, len(train_ds), batch):
            if t >= iters:
                break
            idx = order[start:start + batch]
            x = Tensor4(train_ds.samples.array[idx])
            y = train_ds.one_hot(idx) if supervised else None
            report = model.train_step(x, y)
            t += 1
            if measure is not None and t in points:
                measure(t, report)
    return model


def _prototype_patch_hw(model: DcgmmModel, layer_index: int) -> tuple[int, int]:
    """Displayable patch extents for a GMM layer's centroid vectors."""
    d = model.gmm_params[layer_index].dim
    prev = model.specs[layer_index - 1] if layer_index > 0 else None
    if isinstance(prev, FoldingSpec):
        in_c = model.shapes[layer_index - 1][2]
        if in_c == 1:
            return prev.fy, prev.fx
    side = int(math.isqrt(d))
    return (side, d // side) if side * side == d else (1, d)


def dump_prototypes(model: DcgmmModel, out_dir: Path) -> list[Path]:
    paths = []
    for i in model.gmm_layer_indices:
        p = model.gmm_params[i]
        gh, gw = p.grid
        ph, pw = _prototype_patch_hw(model, i)
        imgs = p.mu.reshape(p.n_components, -1)[:, :ph * pw].reshape(-1, ph, pw)
        tile = tile_images(imgs, gh, gw)
        path = out_dir / f"layer{i}_prototypes.pgm"
        write_pgm(tile, path)
        paths.append(path)
    return paths


def cmd_train(cfg: ExperimentConfig, out_dir: Path, seed: int) -> int:
    train_ds, test_ds = load_datasets(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []

    def measure(t, report):
        rows.append([t] + [repr(report.gmm_losses[i]) for i in sorted(report.gmm_losses)]
                    + ([repr(report.ce_loss)] if report.ce_loss is not None else []))

    model = train_model(cfg, train_ds, seed, measure=measure)
    gmm_cols = [f"layer{i}_loss" for i in model.gmm_layer_indices]
    has_ce = any(len(r) > 1 + len(gmm_cols) for r in rows)
    with open(out_dir / "loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration"] + gmm_cols + (["ce_loss"] if has_ce else []))
        w.writerows(rows)
    save_checkpoint(model, out_dir / "model.ckpt")
    dump_prototypes(model, out_dir)
    test_ll = full_log_likelihood(
        test_ds.samples.flatten_features(), model.gmm_params[model.top_gmm_index]
    ) if model.shapes[model.top_gmm_index][:2] == (1, 1) else float("nan")
    print(f"trained {cfg['model.arch']} for {cfg['train.epochs']} epochs; "
          f"checkpoint at {out_dir / 'model.ckpt'}")
    if not math.isnan(test_ll):
        print(f"test log-likelihood: {test_ll:.2f}")
    return 0


def cmd_sample(args) -> int:
    model = load_checkpoint(args.checkpoint)
    count = args.count
    sheet = model.sample(count, class_index=args.class_index, top_s=args.top_s,
                         seed=args.seed, sharpen_iters=args.sharpen_iters,
                         sharpen_eps=args.sharpen_eps)
    imgs = sheet.array.mean(axis=3)   # grayscale sheet even for multi-channel data
    tag = "any" if args.class_index is None else f"class{args.class_index}"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"samples_{tag}_s{args.top_s}.pgm"
    write_pgm(tile_images(imgs), path)
    print(f"wrote {count} samples to {path}")
    return 0


def _flat_gmm_spec(cfg: ExperimentConfig, input_shape):
    specs = parse_architecture(cfg["model.arch"])
    shapes = validate_architecture(specs, input_shape)
    gmm_layers = [i for i, s in enumerate(specs) if isinstance(s, GmmLayerSpec)]
    if len(gmm_layers) != 1 or shapes[gmm_layers[0]][:2] != (1, 1):
        raise CapabilityError(
            "oracle-compare needs a flat architecture: a single GMM layer "
            "seeing the whole sample (H=W=1)")
    return specs[gmm_layers[0]]


def cmd_oracle_compare(cfg: ExperimentConfig, out_dir: Path, seed: int) -> int:
    train_ds, test_ds = load_datasets(cfg)
    gspec = _flat_gmm_spec(cfg, train_ds.samples.shape[1:])
    k = gspec.k
    x_train = train_ds.samples.flatten_features()
    x_eval = test_ds.samples.flatten_features()[:1000]

    params, _ = train_gmm(
        x_train, k, epochs=cfg["train.epochs"], batch_size=cfg["train.batch"],
        eps=cfg["train.eps"], mu_range=cfg["gmm.mu_range"], d_max=cfg["gmm.d_max"],
        sigma0=cfg.sigma0, sigma_inf=cfg["gmm.sigma_inf"], alpha=cfg.alpha,
        delta=cfg["gmm.delta"], warmup_fraction=cfg["train.warmup_fraction"],
        annealing=cfg["gmm.annealing"], seed=seed, grid=gspec.resolved_grid())
    from .gmm import log_weighted_densities_batch
    sgd_ll = full_log_likelihood(x_eval, params)
    sgd_assign = np.argmax(log_weighted_densities_batch(x_eval, params), axis=1)
    sgd_resp = float(np.mean(bmu_responsibilities(x_eval, params)))

    init = em.init_from_kmeans(x_train, k, seed=seed)
    fitted, _, _ = em.em_fit(x_train, k, init, seed=seed)
    em_ll = em.log_likelihood(x_eval, fitted)
    em_assign = np.argmax(em.responsibilities(x_eval, fitted), axis=1)
    em_resp = float(np.mean(np.max(em.responsibilities(x_eval, fitted), axis=1)))

    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, ll, assign, resp in (("sgd", sgd_ll, sgd_assign, sgd_resp),
                                   ("em", em_ll, em_assign, em_resp)):
        db = em.davies_bouldin(x_eval, assign)
        dunn = em.dunn_index(x_eval, assign)
        rows.append([name, repr(ll), repr(db), repr(dunn), repr(resp)])
    with open(out_dir / "oracle_compare.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["algo", "final_log_likelihood", "davies_bouldin", "dunn",
                    "mean_max_responsibility"])
        w.writerows(rows)
    for r in rows:
        print("  ".join(str(v) for v in r))
    rel = abs(sgd_ll - em_ll) / max(abs(em_ll), 1e-12)
    print(f"relative log-likelihood gap: {rel * 100:.2f}%")
    return 0


def cmd_continual(cfg: ExperimentConfig, out_dir: Path, seed: int) -> int:
    train_ds, test_ds = load_datasets(cfg)
    spec = cl.slt_spec(cfg["continual.slt"], permutation_seed=seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    reps = cfg["continual.repetitions"]
    batch = cfg["train.batch"]
    n_measure = cfg["train.n_measure"]
    epochs1 = cfg["continual.epochs_t1"]
    spt = cfg["continual.samples_per_task"] or None

    def make_learner(rep_seed):
        return cl.DcgmmLearner(
            cfg["model.arch"], train_ds.samples.shape[1:], eps=cfg["train.eps"],
            eps_classifier=cfg.eps_classifier, mu_range=cfg["gmm.mu_range"],
            d_max=cfg["gmm.d_max"], sigma0=cfg.sigma0,
            sigma_inf=cfg["gmm.sigma_inf"], alpha=cfg.alpha,
            delta=cfg["gmm.delta"], warmup_fraction=cfg["train.warmup_fraction"],
            annealing=cfg["gmm.annealing"], seed=rep_seed)

    baseline_data = cl.slt_data_from_datasets(train_ds, test_ds, cl.slt_spec("D10"))
    slt_data = cl.slt_data_from_datasets(train_ds, test_ds, spec)
    n_tasks = slt_data.n_tasks
    schedule = (cl.doubling_schedule(epochs1, n_tasks)
                if cfg["continual.double_epochs"] else [epochs1] * n_tasks)

    all_records = []
    baselines, finals = [], []
    for rep in range(reps):
        rep_seed = seed + rep
        base_records = cl.gmr_train(
            make_learner(rep_seed), baseline_data, epochs_schedule=[epochs1],
            batch_size=batch, n_measure=n_measure, seed=rep_seed,
            experiment_id=f"baseline-r{rep}")
        baselines.append(base_records[-1].accuracy_baseline)
        all_records.extend(base_records)
        if spec.name != "D10":
            records = cl.gmr_train(
                make_learner(rep_seed), slt_data, epochs_schedule=schedule,
                batch_size=batch, samples_per_task=spt,
                top_s=cfg["continual.top_s"],
                sigma_reset=cfg["continual.sigma_reset"], n_measure=n_measure,
                seed=rep_seed, experiment_id=f"{spec.name}-r{rep}",
                replay=cfg["continual.replay"])
            finals.append(records[-1].accuracy_baseline)
            all_records.extend(records)
    cl.write_records_csv(all_records, out_dir / "records.csv")
    b_mean, b_std = float(np.mean(baselines)), float(np.std(baselines))
    lines = [f"D10 baseline accuracy: {100 * b_mean:.1f} +- {100 * b_std:.1f}"]
    if finals:
        diffs = [b - f for b, f in zip(baselines, finals)]
        lines.append(f"{spec.name} final accuracy: {100 * np.mean(finals):.1f} "
                     f"+- {100 * np.std(finals):.1f}")
        lines.append(f"{spec.name} diff to baseline: {100 * np.mean(diffs):.1f} "
                     f"+- {100 * np.std(diffs):.1f}")
        lines.append(f"{spec.name} omega_all: "
                     f"{100 * cl.omega_all(float(np.mean(finals)), b_mean):.1f}")
    summary = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_grid(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base = base.with_overrides({"seed": args.seed})
    with open(args.grid, "r", encoding="utf-8") as f:
        grid = parse_grid_spec(f.read())
    out_dir = Path(args.out)
    cfg_dir = out_dir / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    manifest_rows = []
    varied = sorted(grid.axes)
    config_paths = []
    for exp_id, overrides, cfg in grid_configs(base, grid):
        path = cfg_dir / f"{exp_id}.conf"
        path.write_text(format_config(cfg))
        config_paths.append((exp_id, path))
        manifest_rows.append([exp_id, str(path.relative_to(out_dir))]
                             + [str(overrides[k]) for k in varied]
                             + [str(overrides["seed"])])
    with open(out_dir / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["experiment_id", "config"] + varied + ["seed"])
        w.writerows(manifest_rows)
    print(f"wrote {len(manifest_rows)} configs to {cfg_dir}")
    if args.run:
        from concurrent.futures import ProcessPoolExecutor
        runs = [(str(p), str(out_dir / "runs" / exp_id)) for exp_id, p in config_paths]
        if args.workers > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                codes = list(pool.map(_run_train_config, runs))
        else:
            codes = [_run_train_config(r) for r in runs]
        bad = [c for c in codes if c != 0]
        print(f"ran {len(runs)} experiments, {len(bad)} failures")
        return 1 if bad else 0
    return 0


def _run_train_config(pair) -> int:
    config_path, out_dir = pair
    cfg = load_config(config_path)
    return cmd_train(cfg, Path(out_dir), cfg["seed"])


def cmd_outlier_sweep(cfg: ExperimentConfig, out_dir: Path, seed: int,
                      checkpoint: str | None) -> int:
    train_ds, test_ds = load_datasets(cfg)
    inlier_text = cfg["outlier.inlier_classes"]
    if not inlier_text:
        raise ConfigError("outlier.inlier_classes is required (e.g. '0,1,2,3,4')")
    inlier_classes = sorted(int(c) for c in inlier_text.split(","))
    outlier_classes = sorted(set(range(test_ds.class_count)) - set(inlier_classes))
    if checkpoint:
        model = load_checkpoint(checkpoint)
    else:
        model = train_model(cfg.with_overrides({"model.arch": cfg["model.arch"]}),
                            train_ds.filter_classes(inlier_classes), seed)
    seen = test_ds.filter_classes(inlier_classes)
    unseen = test_ds.filter_classes(outlier_classes)
    scores_in = model.outlier_scores(seen.samples)
    scores_out = model.outlier_scores(unseen.samples)
    stats = model.stats[model.top_gmm_index]
    c_grid = np.linspace(-2.0, 2.0, 41)
    rows = []
    curve = []
    for c in c_grid:
        thr = stats.mean - c * math.sqrt(stats.var)
        rate_in = float(np.mean(scores_in >= thr))
        rate_out = float(np.mean(scores_out >= thr))
        rows.append([repr(float(c)), repr(rate_in), repr(rate_out)])
        curve.append((1.0 - rate_out, 1.0 - rate_in))   # (TPR, FPR) for outliers
    auc = sweep_auc(scores_in, scores_out, stats, c_grid)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "outlier_sweep.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["c", "inlier_rate_seen", "inlier_rate_unseen"])
        w.writerows(rows)
    print(f"outlier sweep AUC: {auc:.3f} "
          f"(classes {inlier_classes} vs {outlier_classes})")
    return 0


def sweep_auc(scores_in: np.ndarray, scores_out: np.ndarray, stats,
              c_grid: np.ndarray) -> float:
    """Trapezoid AUC of the ROC traced by sweeping the threshold factor.

    Outliers are the positive class: TPR is the fraction of unseen-class
    scores below the threshold, FPR the fraction of seen-class scores below
    it.  Endpoints (0,0) and (1,1) close the curve.
    """
    pts = [(0.0, 0.0)]
    for c in sorted(c_grid, reverse=True):
        thr = stats.mean - c * math.sqrt(stats.var)
        fpr = float(np.mean(scores_in < thr))
        tpr = float(np.mean(scores_out < thr))
        pts.append((fpr, tpr))
    pts.append((1.0, 1.0))
    pts.sort()
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return auc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcgmm",
        description="Deep convolutional Gaussian mixture model experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to a key=value experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--workers", type=int, default=1)

    add_common(sub.add_parser("train", help="train a model, dump checkpoint/CSV/PGM"))
    add_common(sub.add_parser("continual",
                              help="run a sequential-learning-task experiment"))
    add_common(sub.add_parser("oracle-compare",
                              help="SGD vs batch-EM comparison on a flat GMM"))

    g = sub.add_parser("grid", help="expand a base config over a parameter grid")
    add_common(g)
    g.add_argument("--grid", required=True, help="grid spec file")
    g.add_argument("--run", action="store_true", help="also run every config")

    s = sub.add_parser("sample", help="generate samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="class_index", type=int, default=None)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--top-s", dest="top_s", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sharpen-iters", type=int, default=0)
    s.add_argument("--sharpen-eps", type=float, default=0.1)
    s.add_argument("--out", default="out")

    o = sub.add_parser("outlier-sweep",
                       help="inlier/outlier rates over the threshold factor")
    add_common(o)
    o.add_argument("--checkpoint", default=None,
                   help="score with an existing checkpoint instead of training")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "sample":
            return cmd_sample(args)
        if args.command == "grid":
            return cmd_grid(args)
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg["seed"]
        if args.seed is not None:
            cfg = cfg.with_overrides({"seed": args.seed})
        out_dir = Path(args.out)
        if args.command == "train":
            return cmd_train(cfg, out_dir, seed)
        if args.command == "continual":
            return cmd_continual(cfg, out_dir, seed)
        if args.command == "oracle-compare":
            return cmd_oracle_compare(cfg, out_dir, seed)
        if args.command == "outlier-sweep":
            return cmd_outlier_sweep(cfg, out_dir, seed, args.checkpoint)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:   # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
