"""Experiment harness: configs, sweeps, reports.

Every run is a pure function of its config (seeds included), so two
invocations with the same config produce byte-identical CSVs apart
from the wall-time columns. Grid cells derive their own seeds from the
base seed and the cell key; datasets are derived per sample-count so
every beta in a sweep sees the same data.

Commands write CSV rows (sweeps) or JSON (bound verification, merged
reports). The report merger computes the transition beta: the first
grid beta at which random-label training accuracy falls below 0.5.
"""

from __future__ import annotations

import concurrent.futures
import copy
import csv
import json
import os
import time

import numpy as np

from . import data_io, infotheory, nuisance_lab, vnn
from .numeric_core import Rng, derive_seed


class ConfigError(ValueError):
    """Invalid experiment configuration."""


DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "jobs": 1,
    "dataset": {
        # digits: bundled synthetic digit glyphs; gaussian: separable
        # class blobs; idx: external IDX image/label files.
        "source": "digits",
        "n_train": 512,
        "n_test": 2048,
        "normalize": True,
        "idx_images": "",
        "idx_labels": "",
        "gaussian_d": 16,
        "gaussian_margin": 6.0,
        "num_classes": 10,
    },
    "model": {
        "hidden": [128, 128],
        "activation": "relu",
        "noise": "log-normal",
        "init_log_alpha": -6.0,
    },
    "train": {
        "beta": 0.1,
        "epochs": 60,
        "batch_size": 128,
        "learning_rate": 0.02,
        "lr_decay_epochs": [40],
        "lr_decay_factor": 0.1,
        "momentum": 0.9,
    },
    "sweep": {
        "betas": [0.05, 3.0],
        "n_values": [512],
        "label_mode": "random",
    },
    "corruption": {
        "levels": [0.0, 0.5, 1.0],
        "beta": 0.1,
        "n": 2048,
        "max_epochs": 500,
        "plateau_epochs": 10,
        "plateau_tol": 1e-3,
    },
    "nuisance": {
        "betas": [0.01, 0.1, 1.0],
        "n": 2048,
        "num_squares": 10,
        "square_size": 4,
        "intensity": 1.0,
        "epochs": 60,
        "calibration_rhos": [0.0, 0.5, 0.8],
        "calibration_n": 50000,
        "disc_epochs": 30,
    },
    "bounds": {
        "dim_x": 512,
        "dim_z": 4,
        "alphas": [0.1, 0.5, 1.0],
        "mc_samples": 100000,
        "flat_k": 8,
    },
}

SWEEP_COLUMNS = [
    "kind", "beta", "n", "label_mode", "corruption", "seed", "epochs_run",
    "train_acc", "test_acc", "ce_nats_per_sample", "info_nats",
    "info_nats_per_sample", "seconds", "error",
]
NUISANCE_COLUMNS = [
    "kind", "beta", "rho", "seed", "mi_nats", "mi_se", "train_acc",
    "disc_heldout_loss", "seconds", "error",
]
HISTORY_COLUMNS = [
    "epoch", "ce_nats_per_sample", "train_acc", "info_nats",
    "info_nats_per_sample", "seconds",
]
TIMING_COLUMNS = ("seconds",)


def merge_config(overrides: dict, base: dict = None) -> dict:
    """Defaults overlaid with overrides; unknown keys are errors."""
    base = copy.deepcopy(DEFAULTS if base is None else base)
    if not isinstance(overrides, dict):
        raise ConfigError(f"config must be a table, got {type(overrides).__name__}")
    for key, value in overrides.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be a table")
            for sub, subval in value.items():
                if sub not in base[key]:
                    raise ConfigError(f"unknown config key {key}.{sub}")
                base[key][sub] = subval
        else:
            base[key] = value
    return base


def validate_config(cfg: dict) -> dict:
    """Cross-field checks shared by every command."""
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be at least 1")
    if not cfg["sweep"]["betas"] or not cfg["sweep"]["n_values"]:
        raise ConfigError("sweep grids must be nonempty")
    if cfg["sweep"]["label_mode"] not in ("random", "real"):
        raise ConfigError("sweep.label_mode must be 'random' or 'real'")
    if not all(0.0 <= c <= 1.0 for c in cfg["corruption"]["levels"]):
        raise ConfigError("corruption levels must lie in [0, 1]")
    if not cfg["corruption"]["beta"] < 1.0:
        raise ConfigError("corruption sweep needs beta < 1 (the sweep studies the fitting regime)")
    if not cfg["nuisance"]["betas"]:
        raise ConfigError("nuisance.betas must be nonempty")
    if cfg["dataset"]["source"] not in ("digits", "gaussian", "idx"):
        raise ConfigError(f"unknown dataset source {cfg['dataset']['source']!r}")
    if cfg["model"]["noise"] not in ("log-normal", "gaussian-multiplicative"):
        raise ConfigError("model.noise must be log-normal or gaussian-multiplicative")
    if cfg["train"]["beta"] < 0:
        raise ConfigError("train.beta must be nonnegative")
    return cfg


def build_dataset(cfg: dict, n_train: int, base_seed: int) -> tuple:
    """Train and test splits for the configured source.

    The generation seed depends only on (base seed, source, n_train),
    so every cell with the same sample count sees identical data.
    """
    ds = cfg["dataset"]
    rng = Rng(derive_seed(base_seed, "dataset", ds["source"], n_train))
    n_test = int(ds["n_test"])
    if ds["source"] == "digits":
        full = data_io.synthetic_digit_dataset(n_train + n_test, rng)
        train = full.subset(slice(0, n_train)).flattened()
        test = full.subset(slice(n_train, n_train + n_test)).flattened()
    elif ds["source"] == "gaussian":
        d = int(ds["gaussian_d"])
        full = data_io.synthetic_gaussian_dataset(
            d, n_train + n_test, int(ds["num_classes"]), float(ds["gaussian_margin"]), rng)
        train = full.subset(slice(0, n_train))
        test = full.subset(slice(n_train, n_train + n_test))
    else:
        if not ds["idx_images"] or not ds["idx_labels"]:
            raise ConfigError("idx source needs dataset.idx_images and dataset.idx_labels")
        full = data_io.load_idx(ds["idx_images"], ds["idx_labels"]).flattened()
        if len(full) < n_train + n_test:
            raise ConfigError(f"IDX data has {len(full)} samples, need {n_train + n_test}")
        perm = rng.permutation(len(full))
        train = full.subset(perm[:n_train])
        test = full.subset(perm[n_train:n_train + n_test])
    if ds["normalize"]:
        train, test, _stats = data_io.standardize(train, test)
    return train, test


def make_network(cfg: dict, input_dim: int, num_classes: int, seed: int) -> vnn.NetworkState:
    sizes = (input_dim, *[int(h) for h in cfg["model"]["hidden"]], num_classes)
    return vnn.init_network(
        sizes,
        noise=vnn.NoiseModel(cfg["model"]["noise"]),
        init_log_alpha=float(cfg["model"]["init_log_alpha"]),
        rng=Rng(derive_seed(seed, "init")),
        hidden_activation=cfg["model"]["activation"],
    )


def make_train_config(cfg: dict, beta: float, seed: int, epochs: int = None,
                      constant_lr: bool = False) -> vnn.TrainConfig:
    tr = cfg["train"]
    return vnn.TrainConfig(
        beta=float(beta),
        epochs=int(tr["epochs"] if epochs is None else epochs),
        batch_size=int(tr["batch_size"]),
        learning_rate=float(tr["learning_rate"]),
        lr_decay_epochs=() if constant_lr else tuple(int(e) for e in tr["lr_decay_epochs"]),
        lr_decay_factor=float(tr["lr_decay_factor"]),
        momentum=float(tr["momentum"]),
        seed=seed,
        init_log_alpha=float(cfg["model"]["init_log_alpha"]),
        noise=vnn.NoiseModel(cfg["model"]["noise"]),
    )


def _train_cell(cfg: dict, beta: float, n_train: int, label_mode: str,
                corruption: float) -> dict:
    """Train one grid cell and measure it; shared by both sweeps."""
    t0 = time.perf_counter()
    base_seed = cfg["seed"]
    train_split, test_split = build_dataset(cfg, n_train, base_seed)
    p = 1.0 if label_mode == "random" else float(corruption)
    labels = train_split.labels
    if p > 0.0:
        labels = data_io.corrupt_labels(
            labels, p, train_split.num_classes,
            Rng(derive_seed(base_seed, "corrupt", n_train, p)))
    cell_seed = derive_seed(base_seed, "cell", beta, n_train, label_mode, corruption)
    net = make_network(cfg, train_split.features.shape[1], train_split.num_classes, cell_seed)
    if label_mode == "corruption":
        # Run-to-convergence cells: CE plateau decides the stop, so the
        # fixed-epoch decay schedule does not apply (it would freeze a
        # run long before the plateau criterion could mean anything).
        stop = plateau_stop(int(cfg["corruption"]["plateau_epochs"]),
                            float(cfg["corruption"]["plateau_tol"]))
        tc = make_train_config(cfg, beta, cell_seed,
                               epochs=int(cfg["corruption"]["max_epochs"]),
                               constant_lr=True)
    else:
        stop = None
        tc = make_train_config(cfg, beta, cell_seed)
    net, history = vnn.train(net, train_split.features, labels, tc, stop=stop)
    train_acc, train_ce = vnn.evaluate(net, train_split.features, labels)
    test_acc, _test_ce = vnn.evaluate(net, test_split.features, test_split.labels)
    info = vnn.info_nats(net)
    return {
        "kind": "cell",
        "beta": beta,
        "n": n_train,
        "label_mode": label_mode,
        "corruption": p,
        "seed": cell_seed,
        "epochs_run": len(history),
        "train_acc": train_acc,
        "test_acc": test_acc,
        "ce_nats_per_sample": train_ce,
        "info_nats": info,
        "info_nats_per_sample": info / n_train,
        "seconds": time.perf_counter() - t0,
        "error": "",
        "_net": net,
        "_history": history,
    }


def plateau_stop(plateau_epochs: int, tol: float):
    """Stop once the train CE has moved less than tol over the last
    plateau_epochs epochs."""
    def stop(history):
        if len(history) < plateau_epochs:
            return False
        ces = [r.train_ce_nats for r in history.records[-plateau_epochs:]]
        return max(ces) - min(ces) < tol
    return stop


def _cell_worker(args: tuple) -> dict:
    """Module-level so process pools can pickle it."""
    cfg, beta, n_train, label_mode, corruption = args
    try:
        row = _train_cell(cfg, beta, n_train, label_mode, corruption)
        row.pop("_net"), row.pop("_history")
        return row
    except Exception as exc:  # per-cell failures land in the errors column
        return {
            "kind": "cell", "beta": beta, "n": n_train, "label_mode": label_mode,
            "corruption": corruption, "seed": "", "epochs_run": "", "train_acc": "",
            "test_acc": "", "ce_nats_per_sample": "", "info_nats": "",
            "info_nats_per_sample": "", "seconds": "", "error": f"{type(exc).__name__}: {exc}",
        }


def _run_cells(cells: list, jobs: int) -> list:
    if jobs <= 1:
        return [_cell_worker(c) for c in cells]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell_worker, cells))


def run_beta_n_sweep(cfg: dict) -> list:
    """One row per (beta, n) cell; random mode fully corrupts labels."""
    sweep = cfg["sweep"]
    cells = [(cfg, float(beta), int(n), sweep["label_mode"], 0.0)
             for beta in sweep["betas"] for n in sweep["n_values"]]
    rows = _run_cells(cells, int(cfg["jobs"]))
    rows.sort(key=lambda r: (float(r["beta"]), int(r["n"])))
    return rows


def run_corruption_sweep(cfg: dict) -> list:
    """One row per corruption level, trained to the CE plateau."""
    cor = cfg["corruption"]
    cells = [(cfg, float(cor["beta"]), int(cor["n"]), "corruption", float(level))
             for level in cor["levels"]]
    rows = _run_cells(cells, int(cfg["jobs"]))
    rows.sort(key=lambda r: float(r["corruption"]))
    return rows


def run_nuisance_experiment(cfg: dict) -> list:
    """Calibration rows (analytic Gaussian cases) followed by one row
    per beta: train on cluttered digits, estimate I(z; n)."""
    nz = cfg["nuisance"]
    base_seed = cfg["seed"]
    rows = []
    disc_cfg = nuisance_lab.DiscriminatorConfig(epochs=int(nz["disc_epochs"]))
    for rho in nz["calibration_rhos"]:
        t0 = time.perf_counter()
        rng = Rng(derive_seed(base_seed, "calibration", rho))
        z, n_arr = nuisance_lab.synthetic_correlated_gaussian(
            float(rho), int(nz["calibration_n"]), rng)
        est = nuisance_lab.estimate_mi(z, n_arr, disc_cfg, rng)
        rows.append({
            "kind": "calibration", "beta": "", "rho": float(rho),
            "seed": derive_seed(base_seed, "calibration", rho),
            "mi_nats": est.value, "mi_se": est.std_error, "train_acc": "",
            "disc_heldout_loss": est.discriminator_loss,
            "seconds": time.perf_counter() - t0, "error": "",
        })

    n = int(nz["n"])
    clean = data_io.synthetic_digit_dataset(
        n, Rng(derive_seed(base_seed, "nuisance-data", n)))
    clutter_cfg = nuisance_lab.ClutterConfig(
        num_squares=int(nz["num_squares"]), square_size=int(nz["square_size"]),
        intensity=float(nz["intensity"]), seed=derive_seed(base_seed, "clutter", n))
    samples = nuisance_lab.generate_cluttered(
        clean.features, clean.labels, clutter_cfg, Rng(clutter_cfg.seed))
    x_img, y, masks = nuisance_lab.cluttered_arrays(samples)
    x = x_img.reshape(n, -1)
    mean, sd = float(x.mean()), float(x.std())
    x = (x - mean) / sd

    for beta in nz["betas"]:
        t0 = time.perf_counter()
        try:
            cell_seed = derive_seed(base_seed, "nuisance-cell", beta)
            net = make_network(cfg, x.shape[1], clean.num_classes, cell_seed)
            tc = make_train_config(cfg, float(beta), cell_seed, epochs=int(nz["epochs"]))
            net, _history = vnn.train(net, x, y, tc)
            train_acc, _ce = vnn.evaluate(net, x, y)
            z = nuisance_lab.hidden_representation(net, x)
            est = nuisance_lab.estimate_mi(
                z, masks.reshape(n, -1), disc_cfg, Rng(derive_seed(base_seed, "nuisance-mi", beta)))
            rows.append({
                "kind": "beta-cell", "beta": float(beta), "rho": "", "seed": cell_seed,
                "mi_nats": est.value, "mi_se": est.std_error, "train_acc": train_acc,
                "disc_heldout_loss": est.discriminator_loss,
                "seconds": time.perf_counter() - t0, "error": "",
            })
        except Exception as exc:
            rows.append({
                "kind": "beta-cell", "beta": float(beta), "rho": "", "seed": "",
                "mi_nats": "", "mi_se": "", "train_acc": "", "disc_heldout_loss": "",
                "seconds": "", "error": f"{type(exc).__name__}: {exc}",
            })
    return rows


def run_bounds_verification(cfg: dict) -> dict:
    """Exercise every identity and inequality; returns a JSON-ready
    report with one entry per check."""
    bd = cfg["bounds"]
    base_seed = cfg["seed"]
    checks = []

    def check(name, passed, **detail):
        entry = {"name": name, "passed": bool(passed)}
        entry.update(detail)
        checks.append(entry)

    dim_x, dim_z = int(bd["dim_x"]), int(bd["dim_z"])
    rng = Rng(derive_seed(base_seed, "bounds"))
    w = rng.standard_normal((dim_z, dim_x)) / np.sqrt(dim_x)
    x = rng.standard_normal((int(bd["mc_samples"]), dim_x))
    for alpha in bd["alphas"]:
        alpha = float(alpha)
        cf = infotheory.duality_closed_form(w, alpha, x)
        mc = infotheory.mc_mi_gaussian(w, alpha, x)
        combined_se = float(np.hypot(cf.std_error, mc.std_error))
        gap = abs(cf.value - mc.value)
        check(f"duality-identity-alpha-{alpha}", gap <= 3 * combined_se,
              closed_form=cf.value, mc=mc.value, gap=gap, tol=3 * combined_se)
        b = infotheory.bound_fn(alpha)
        per_comp = mc.value / dim_z
        tol = 0.05 + 3 * mc.std_error / dim_z
        check(f"single-layer-tightness-alpha-{alpha}",
              b <= per_comp <= b + tol,
              bound=b, per_component=per_comp, upper=b + tol)

    grid = np.exp(np.linspace(np.log(1e-3), np.log(50.0), 12))
    bvals = [infotheory.bound_fn(a) for a in grid]
    check("bound-fn-positive-decreasing",
          all(v > 0 for v in bvals) and all(a > b for a, b in zip(bvals, bvals[1:])),
          grid=list(grid), values=bvals)

    # Flat-minima chain on a diagonal quadratic.
    k = int(bd["flat_k"])
    qrng = Rng(derive_seed(base_seed, "bounds-quadratic"))
    wq = qrng.standard_normal((k,)) + 2.0
    hq = np.abs(qrng.standard_normal((k,))) + 0.5
    beta = 0.1
    alpha_star = infotheory.optimal_alpha_quadratic(wq, hq, beta)
    exact = infotheory.info_in_weights(np.log(alpha_star))
    bound = infotheory.flat_minima_bound(wq, hq, beta)
    check("flat-minima-jensen", bound >= exact - 1e-12, bound=bound, exact=exact)
    a1 = infotheory.optimal_alpha_quadratic(wq[:1], hq[:1], beta)
    check("flat-minima-k1-equality",
          abs(infotheory.flat_minima_bound(wq[:1], hq[:1], beta)
              - infotheory.info_in_weights(np.log(a1))) < 1e-9)

    net = vnn.init_network((8, 6, 4), rng=Rng(derive_seed(base_seed, "bounds-net")),
                           init_log_alpha=-2.0)
    ml = infotheory.multilayer_bound(net)
    per_layer = [infotheory.single_layer_bound(l, l.in_dim).total_upper
                 for l in net.dense_layers]
    check("multilayer-is-min", abs(ml - min(per_layer)) < 1e-12,
          multilayer=ml, per_layer=per_layer)

    pb = infotheory.pac_bayes_bound(50.0, 10.0, 100, lam=1.0, l_max=float(np.log(10.0)))
    check("pac-bayes-example", abs(pb - 1.4605170185988092) < 1e-9, value=pb)
    kls = [infotheory.pac_bayes_bound(50.0, kl, 100, lam=1.0, l_max=1.0)
           for kl in (0.0, 1.0, 2.0, 5.0, 10.0)]
    check("pac-bayes-monotone-in-kl", all(a < b for a, b in zip(kls, kls[1:])), values=kls)

    gm_grid = np.exp(np.linspace(np.log(1e-3), 0.0, 10))
    gm = [infotheory.kl_gaussmult_numeric(a) for a in gm_grid]
    check("gaussmult-kl-decreasing", all(a > b for a, b in zip(gm, gm[1:])), values=gm)
    table_err = max(abs(infotheory.kl_gaussmult_numeric(a) - infotheory.kl_gaussmult_quadrature(a))
                    for a in (1e-4, 3e-3, 0.02, 0.17, 0.5, 0.93))
    check("gaussmult-table-matches-quadrature", table_err <= 1e-6, max_error=table_err)

    return {
        "schema": "vibnet-bounds-report-v1",
        "all_passed": all(c["passed"] for c in checks),
        "checks": checks,
    }


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: list, columns: list) -> None:
    """Fixed column order, repr floats, '.' decimal, UTF-8."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_value(row.get(col, "")) for col in columns])


def read_csv(path) -> tuple:
    """(columns, rows as dicts of strings); malformed rows raise
    ConfigError naming the file and line."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty CSV, no header") from None
        rows = []
        for lineno, parts in enumerate(reader, start=2):
            if not parts:
                continue
            if len(parts) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            rows.append(dict(zip(header, parts)))
    return header, rows


def history_rows(history: vnn.TrainHistory) -> list:
    return [{
        "epoch": r.epoch,
        "ce_nats_per_sample": r.train_ce_nats,
        "train_acc": r.train_accuracy,
        "info_nats": r.info_nats,
        "info_nats_per_sample": r.info_nats_per_sample,
        "seconds": r.seconds,
    } for r in history.records]


def transition_beta(rows: list):
    """First grid beta at which random-label train accuracy drops
    below 0.5; None if it never does."""
    random_rows = [r for r in rows
                   if r.get("label_mode") == "random" and r.get("train_acc") not in ("", None)]
    for row in sorted(random_rows, key=lambda r: float(r["beta"])):
        if float(row["train_acc"]) < 0.5:
            return float(row["beta"])
    return None


def merge_reports(csv_paths: list) -> dict:
    """Merge sweep CSVs into one machine-readable summary.

    Rows are bucketed by their kind column; the summary carries every
    row (so the merge is lossless), plus the transition-beta estimate
    when random-label sweep rows are present. Order-independent: rows
    are sorted by their cell keys.
    """
    buckets = {}
    for path in csv_paths:
        _header, rows = read_csv(path)
        for row in rows:
            buckets.setdefault(row.get("kind", "unknown"), []).append(row)
    for kind, rows in buckets.items():
        rows.sort(key=lambda r: json.dumps(r, sort_keys=True))
    summary = {
        "schema": "vibnet-report-v1",
        "sources": sorted(os.path.basename(str(p)) for p in csv_paths),
        "row_counts": {kind: len(rows) for kind, rows in buckets.items()},
        "rows": buckets,
    }
    cells = buckets.get("cell", [])
    tb = transition_beta(cells)
    if tb is not None:
        summary["transition_beta"] = tb
    corruption_rows = [r for r in cells if r.get("label_mode") == "corruption"
                       and r.get("info_nats_per_sample") not in ("", None)]
    if corruption_rows:
        by_level = sorted(corruption_rows, key=lambda r: float(r["corruption"]))
        summary["corruption_info_nats_per_sample"] = {
            r["corruption"]: float(r["info_nats_per_sample"]) for r in by_level}
        summary["corruption_increase_nats_per_sample"] = (
            float(by_level[-1]["info_nats_per_sample"]) - float(by_level[0]["info_nats_per_sample"]))
        summary["random_label_entropy_reference"] = float(np.log(10.0))
    return summary
