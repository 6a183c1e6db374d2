"""Experiment orchestration: the train -> evaluate -> attack -> measure loop.

One experiment trains a classifier for a fixed number of epochs and, at a
configurable stride, records clean accuracy, robust accuracy under a
gradient attack, and the packet spreads dx/dp over a seeded sample of input
dimensions.  Everything is a pure function of the master seed, so two runs
with the same config produce identical numbers (only the timing column can
differ).

Artifacts per run: results.csv (fixed schema), a model checkpoint, and a
run-manifest.txt echoing the resolved configuration.  Feature mode freezes
a trained extractor, retrains a fresh head, and measures packets over the
extracted-feature space instead of pixels.
"""

from __future__ import annotations

import csv
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks, data, nn, uncertainty

__all__ = [
    "ExperimentConfig", "EpochRecord", "CSV_HEADER",
    "run_experiment", "run_feature_mode", "verify_oracles", "emit_plots",
    "padded_limits",
    "parse_config_file", "config_from_mapping", "config_to_mapping",
]

CSV_HEADER = "epoch,train_loss,clean_acc,robust_acc,dx,dp,dx_se,dp_se,seconds"


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"               # "mnist" | "cifar10"
    data_dir: str = "data/mnist"
    model: str = "cnn3-mnist"
    mode: str = "pixel"                  # "pixel" | "feature"
    label_mode: str = "single-class"     # "single-class" | "class-mean"
    focus_label: int = 8
    epochs: int = 10
    stride: int = 1
    train_size: int = 2000
    test_size: int = 1000
    eval_subset: int = 1024
    n_dims: int = 32
    outdir: str = "runs/out"
    seed: int = 0
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    attack: attacks.AttackConfig = field(default_factory=attacks.AttackConfig)
    quad: uncertainty.QuadratureConfig = field(
        default_factory=uncertainty.QuadratureConfig)

    def __post_init__(self):
        if self.dataset not in ("mnist", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.mode not in ("pixel", "feature"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.label_mode not in ("single-class", "class-mean"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.stride < 1 or self.epochs % self.stride != 0:
            raise ValueError("measurement stride must divide epochs")
        if self.n_dims < 1:
            raise ValueError("n_dims must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    clean_acc: float
    robust_acc: float
    dx: float
    dp: float
    dx_se: float
    dp_se: float
    seconds: float

    def csv_row(self):
        nums = [self.train_loss, self.clean_acc, self.robust_acc,
                self.dx, self.dp, self.dx_se, self.dp_se]
        return (f"{self.epoch}," + ",".join(f"{v:.12g}" for v in nums)
                + f",{self.seconds:.3f}")


# ---------------------------------------------------------------- plumbing

def _tag(name):
    return zlib.crc32(name.encode())


def _load_dataset(cfg, part):
    if cfg.dataset == "mnist":
        return data.load_mnist(cfg.data_dir, part)
    root = Path(cfg.data_dir)
    sub = root / part if (root / part).exists() else root
    return data.load_cifar10(sub)


def _measure_labels(cfg, dataset):
    if cfg.label_mode == "single-class":
        return [int(cfg.focus_label)]
    return sorted(int(c) for c in np.unique(dataset.labels))


def _sample_dims(cfg, labels, total_dims):
    """Fixed per-class dimension sample, shared across all epochs."""
    n = min(cfg.n_dims, total_dims)
    dims = {}
    for label in labels:
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _tag("dims"), label)))
        dims[label] = sorted(int(i) for i in
                             rng.choice(total_dims, size=n, replace=False))
    return dims


def _measure(model, cfg, quad, x_base, dims_by_label, domain, clamp_c,
             total_dims):
    stats, skipped = [], {}
    for label, dims in dims_by_label.items():
        st, sk = uncertainty.measure_dimensions(
            model, label, x_base, dims, quad, domain=domain,
            clamp_c=clamp_c, total_dims=total_dims)
        st.sort(key=lambda s: s.dim)
        stats.extend(st)
        if sk:
            skipped[label] = sk
    return uncertainty.aggregate(stats, mode=cfg.label_mode,
                                 skipped=skipped, quad=quad)


def _write_manifest(cfg, path, extra=None):
    lines = [f"{k} = {v}" for k, v in config_to_mapping(cfg).items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _epoch_loop(cfg, model, train_ds, eval_ds, measured, train_params=None):
    """Shared train/evaluate/measure loop; `measured` maps a frozen model to
    an UncertaintyReport.  Appends rows to results.csv as it goes."""
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    tcfg = replace(cfg.train, seed=cfg.seed, epochs=1)
    state = nn.OptimizerState()
    records = []
    with open(outdir / "results.csv", "w") as f:
        f.write(CSV_HEADER + "\n")
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            mean_loss = nn.train_epoch(model, train_ds, tcfg, state,
                                       epoch - 1, param_names=train_params)
            if epoch % cfg.stride != 0:
                continue
            clean = nn.accuracy(model, eval_ds)
            robust = attacks.robust_accuracy(model, eval_ds, cfg.attack,
                                             clamp_c=cfg.train.clamp_c)
            report = measured(model)
            rec = EpochRecord(epoch, mean_loss, clean, robust,
                              report.dx, report.dp, report.dx_se,
                              report.dp_se, time.perf_counter() - t0)
            records.append(rec)
            f.write(rec.csv_row() + "\n")
            f.flush()
    return records


def run_experiment(cfg):
    """Run one experiment; returns the EpochRecord list and writes
    results.csv, model checkpoint, and run manifest under cfg.outdir."""
    if cfg.mode == "feature":
        return run_feature_mode(cfg)
    train_full = _load_dataset(cfg, "train")
    test_full = _load_dataset(cfg, "test")
    train_ds = data.subset(train_full, min(cfg.train_size, len(train_full)),
                           seed=cfg.seed)
    test_ds = data.subset(test_full, min(cfg.test_size, len(test_full)),
                          seed=cfg.seed + 1)
    eval_ds = data.subset(test_ds, min(cfg.eval_subset, len(test_ds)),
                          seed=cfg.seed + 2)

    model = nn.build_model(cfg.model, seed=cfg.seed)
    x_base = data.compute_baseline(train_ds).x_base
    labels = _measure_labels(cfg, train_ds)
    dims = _sample_dims(cfg, labels, train_ds.dim)
    quad = replace(cfg.quad, seed=(cfg.seed, _tag("quad")))

    def measured(m):
        return _measure(m, cfg, quad, x_base, dims, (0.0, 1.0),
                        cfg.train.clamp_c, train_ds.dim)

    records = _epoch_loop(cfg, model, train_ds, eval_ds, measured)
    nn.save_model(model, Path(cfg.outdir) / "model.upkt")
    _write_manifest(cfg, Path(cfg.outdir) / "run-manifest.txt",
                    {"resolved.quad_seed": quad.seed,
                     "resolved.dims": {k: v for k, v in dims.items()}})
    return records


def run_feature_mode(cfg):
    """Train the full model, freeze the extractor, retrain a fresh head on
    extracted features, and measure packets over the feature space."""
    train_full = _load_dataset(cfg, "train")
    test_full = _load_dataset(cfg, "test")
    train_ds = data.subset(train_full, min(cfg.train_size, len(train_full)),
                           seed=cfg.seed)
    test_ds = data.subset(test_full, min(cfg.test_size, len(test_full)),
                          seed=cfg.seed + 1)
    eval_ds = data.subset(test_ds, min(cfg.eval_subset, len(test_ds)),
                          seed=cfg.seed + 2)

    model = nn.build_model(cfg.model, seed=cfg.seed)
    pretrain = replace(cfg.train, seed=cfg.seed, epochs=cfg.epochs)
    nn.train(model, train_ds, pretrain)

    extractor, head = nn.split(model)
    feat_train = data.to_features(train_ds, extractor)
    feat_eval_raw = data.to_features(eval_ds, extractor)
    # the attack and packet domains come from the training features
    feat_eval = data.Dataset(feat_eval_raw.images, feat_eval_raw.labels,
                             kind="feature", lo=feat_train.lo,
                             hi=feat_train.hi)
    nn.reinit_head(model, cfg.seed)
    head._graphs.clear()

    x_base = data.compute_baseline(feat_train).x_base
    labels = _measure_labels(cfg, feat_train)
    dims = _sample_dims(cfg, labels, feat_train.dim)
    quad = replace(cfg.quad, seed=(cfg.seed, _tag("quad")))
    domain = (feat_train.lo, feat_train.hi)

    def measured(m):
        return _measure(m, cfg, quad, x_base, dims, domain,
                        cfg.train.clamp_c, feat_train.dim)

    records = _epoch_loop(cfg, head, feat_train, feat_eval, measured,
                          train_params=head.param_names)
    nn.save_model(model, Path(cfg.outdir) / "model.upkt")
    _write_manifest(cfg, Path(cfg.outdir) / "run-manifest.txt",
                    {"resolved.quad_seed": quad.seed,
                     "resolved.feature_dim": feat_train.dim,
                     "resolved.dims": {k: v for k, v in dims.items()}})
    return records


# ---------------------------------------------------------------- oracles

def verify_oracles(out=None):
    """Run the closed-form validation suite; returns (passed, report lines).

    Every check compares a measured quantity against an analytic value at a
    stated tolerance, so a fresh checkout either passes in well under a
    minute or points at the broken stage.
    """
    from .packet import AnalyticPacket
    lines = []
    ok = True

    def check(name, measured, expected, tol):
        nonlocal ok
        good = abs(measured - expected) <= tol
        ok = ok and good
        lines.append(f"{'PASS' if good else 'FAIL'} {name}: "
                     f"measured={measured:.6g} expected={expected:.6g} "
                     f"tol={tol:.2g}")

    for s in (0.5, 1.0, 2.0):
        for seed in (0, 1, 2):
            pkt = AnalyticPacket("gaussian", 0.0, s)
            q = uncertainty.QuadratureConfig(n=100000, seed=seed)
            sx, _ = uncertainty.sigma_x(pkt, q)
            sp, _ = uncertainty.sigma_p(pkt, q)
            check(f"gaussian s={s} seed={seed} sigma_x*sigma_p",
                  sx * sp, 0.5, 0.01)

    pkt = AnalyticPacket("gaussian", 0.0, 1.0)
    q = uncertainty.QuadratureConfig(n=100000, seed=0)
    sx, se_sx = uncertainty.sigma_x(pkt, q)
    check("gaussian sigma_x", sx, 1 / np.sqrt(2), 4 * se_sx + 1e-4)
    sp, se_sp = uncertainty.sigma_p(pkt, q)
    check("gaussian sigma_p", sp, 1 / np.sqrt(2), 4 * se_sp + 1e-4)

    rc = AnalyticPacket("raised-cosine", 0.0, 1.0)
    ex_sx, ex_sp = rc.sigma_exact()
    sx, se_sx = uncertainty.sigma_x(rc, q)
    check("raised-cosine sigma_x", sx, ex_sx, 4 * se_sx + 1e-4)
    sp, se_sp = uncertainty.sigma_p(rc, q)
    check("raised-cosine sigma_p", sp, ex_sp, 4 * se_sp + 1e-4)

    tq = uncertainty.QuadratureConfig(estimator="trapezoid", grid=8193)
    val, se = uncertainty.integrate(lambda t: t * t, 0.0, 2.0, tq)
    check("trapezoid integral of t^2 on [0,2]", val, 8 / 3, 6 * se + 1e-9)
    val, se = uncertainty.integrate(
        lambda t: t * t, 0.0, 2.0, uncertainty.QuadratureConfig(n=100000))
    check("mc integral of t^2 on [0,2]", val, 8 / 3, 4 * se)

    class _Uniform:
        lo, hi, beta, taper_w = 0.0, 1.0, 1.0, 0.0

        def psi(self, t):
            return np.ones_like(np.asarray(t, dtype=np.float64))

        def dpsi(self, t):
            return np.zeros_like(np.asarray(t, dtype=np.float64))

        def psi_dpsi(self, t):
            return self.psi(t), self.dpsi(t)

    sx, se_sx = uncertainty.sigma_x(_Uniform(), tq)
    check("uniform psi sigma_x", sx, 1 / np.sqrt(12), 4 * se_sx + 1e-6)

    t = np.linspace(pkt.lo + 1e-4, pkt.hi - 1e-4, 101)
    fd = (pkt.psi(t + 1e-5) - pkt.psi(t - 1e-5)) / 2e-5
    check("gaussian dpsi vs finite difference",
          float(np.abs(pkt.dpsi(t) - fd).max()), 0.0, 1e-6)

    res = uncertainty.commutator_check(pkt)
    check("gaussian commutator residual", res, 0.0, 1e-4)
    h = (pkt.hi - pkt.lo) / 1e3
    r1 = uncertainty.commutator_check(pkt, h=h)
    r2 = uncertainty.commutator_check(pkt, h=h / 2)
    check("commutator residual O(h^2) ratio", r1 / r2, 4.0, 0.5)

    lin_sx, _ = uncertainty.sigma_x(_Linear(), tq)
    check("linear psi sigma_x", lin_sx, np.sqrt(3 / 80), 1e-6)
    check("linear psi commutator residual",
          uncertainty.commutator_check(_Linear()), 0.0, 1e-9)

    for line in lines:
        if out is not None:
            out(line)
    return ok, lines


class _Linear:
    """psi(t) = sqrt(3) t on [0,1]: unit norm, all moments closed-form."""
    lo, hi, beta, taper_w = 0.0, 1.0, 1.0, 0.0

    def psi(self, t):
        return np.sqrt(3.0) * np.asarray(t, dtype=np.float64)

    def dpsi(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), np.sqrt(3.0))

    def psi_dpsi(self, t):
        return self.psi(t), self.dpsi(t)


# ---------------------------------------------------------------- plots

def _read_results(csv_path):
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{csv_path}: empty results file")
        if header != CSV_HEADER.split(","):
            raise ValueError(f"{csv_path}: unexpected header {header}")
        rows = [[float(v) for v in row] for row in reader]
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    cols = np.array(rows, dtype=np.float64).T
    return dict(zip(CSV_HEADER.split(","), cols))


def padded_limits(*columns, pad=0.05):
    """(lo, hi) covering every value with a relative margin on each side."""
    values = np.concatenate([np.asarray(c, dtype=np.float64).reshape(-1)
                             for c in columns])
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    return lo - pad * span, hi + pad * span


def emit_plots(csv_path, outdir=None):
    """Render accuracy.svg and uncertainty.svg from a results file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = _read_results(csv_path)
    outdir = Path(outdir) if outdir else Path(csv_path).parent
    outdir.mkdir(parents=True, exist_ok=True)
    epoch = cols["epoch"]

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epoch, cols["clean_acc"], marker="o", label="clean accuracy")
    ax.plot(epoch, cols["robust_acc"], marker="s", label="robust accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_xlim(*padded_limits(epoch))
    ax.set_ylim(*padded_limits(cols["clean_acc"], cols["robust_acc"]))
    ax.legend()
    fig.tight_layout()
    acc_path = outdir / "accuracy.svg"
    fig.savefig(acc_path)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(epoch, cols["dx"], yerr=cols["dx_se"], marker="o",
                color="tab:blue", label="dx")
    ax.set_xlabel("epoch")
    ax.set_ylabel("dx", color="tab:blue")
    ax.set_xlim(*padded_limits(epoch))
    ax.set_ylim(*padded_limits(cols["dx"]))
    ax2 = ax.twinx()
    ax2.errorbar(epoch, cols["dp"], yerr=cols["dp_se"], marker="s",
                 color="tab:red", label="dp")
    ax2.set_ylabel("dp", color="tab:red")
    ax2.set_ylim(*padded_limits(cols["dp"]))
    fig.tight_layout()
    unc_path = outdir / "uncertainty.svg"
    fig.savefig(unc_path)
    plt.close(fig)
    return acc_path, unc_path


# ---------------------------------------------------------------- config

_TOP_KEYS = {
    "dataset": str, "data_dir": str, "model": str, "mode": str,
    "label_mode": str, "focus_label": int, "epochs": int, "stride": int,
    "train_size": int, "test_size": int, "eval_subset": int, "n_dims": int,
    "outdir": str, "seed": int,
}
_TRAIN_KEYS = {"lr": float, "batch_size": int, "optimizer": str,
               "momentum": float, "clamp_c": float}
_ATTACK_KEYS = {"kind": str, "eps": float, "epsilon": float, "alpha": float,
                "steps": int, "signed": bool}
_QUAD_KEYS = {"n": int, "estimator": str, "grid": int}


def _convert(value, typ):
    if typ is bool:
        low = str(value).strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return typ(value)


def parse_config_file(path):
    """Flat `key = value` lines with dotted sections; '#' starts a comment."""
    mapping = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        mapping[key] = value
    return mapping


def config_from_mapping(mapping):
    """Build an ExperimentConfig from dotted string keys (file or CLI)."""
    top, train_kw, attack_kw, quad_kw = {}, {}, {}, {}
    for key, value in mapping.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section == "train" and name in _TRAIN_KEYS:
                train_kw[name] = _convert(value, _TRAIN_KEYS[name])
            elif section == "attack" and name in _ATTACK_KEYS:
                dest = "epsilon" if name == "eps" else name
                attack_kw[dest] = _convert(value, _ATTACK_KEYS[name])
            elif section == "quad" and name in _QUAD_KEYS:
                quad_kw[name] = _convert(value, _QUAD_KEYS[name])
            else:
                raise KeyError(f"unknown config key {key!r}")
        elif key in _TOP_KEYS:
            top[key] = _convert(value, _TOP_KEYS[key])
        else:
            raise KeyError(f"unknown config key {key!r}")
    return ExperimentConfig(
        train=nn.TrainConfig(**train_kw),
        attack=attacks.AttackConfig(**attack_kw),
        quad=uncertainty.QuadratureConfig(**quad_kw),
        **top)


def config_to_mapping(cfg):
    """Dotted key/value view of a config; inverse of config_from_mapping."""
    out = {k: getattr(cfg, k) for k in _TOP_KEYS}
    for name in _TRAIN_KEYS:
        out[f"train.{name}"] = getattr(cfg.train, name)
    out["attack.kind"] = cfg.attack.kind
    out["attack.eps"] = cfg.attack.epsilon
    out["attack.alpha"] = cfg.attack.alpha
    out["attack.steps"] = cfg.attack.steps
    out["attack.signed"] = cfg.attack.signed
    for name in _QUAD_KEYS:
        out[f"quad.{name}"] = getattr(cfg.quad, name)
    return out
