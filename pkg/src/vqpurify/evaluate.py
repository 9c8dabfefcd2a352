"""Purification deployment, evaluation metrics and the seed-aggregated experiment reports."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import LabeledImageSet, gen_synthetic, read_cifar10_binary
from .errors import ConfigError, DimensionError, VQPurifyError
from .nets import Classifier, Generator
from .poison import TriggerSpec, apply_trigger_test, gradient_align_poison, make_trigger, poison_train
from .train import ClassifierConfig, TrainConfig, train_classifier, train_purifier

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
TEST_SEED_OFFSET = 10007


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def purify(x: np.ndarray, G: Generator, passes: int = 1) -> np.ndarray:
    """Apply the generator ``passes`` times."""
    if passes < 1:
        raise ConfigError(f"passes must be >= 1, got {passes}")
    out = x
    for _ in range(passes):
        out = G.reconstruct(out)
    return out


def _maybe_purify(images: np.ndarray, purifier: Generator | None, passes: int) -> np.ndarray:
    return images if purifier is None else purify(images, purifier, passes)


def predictions(classifier: Classifier, images: np.ndarray, purifier: Generator | None = None,
                passes: int = 1) -> np.ndarray:
    return classifier.predict(_maybe_purify(images, purifier, passes))


def psr_selection(test_set: LabeledImageSet, target_label: int) -> np.ndarray:
    idx = np.flatnonzero(test_set.labels != target_label)
    if idx.size == 0:
        raise ConfigError(f"no test images outside target class {target_label}")
    return idx


def poison_success_rate(classifier: Classifier, test_set: LabeledImageSet, spec: TriggerSpec,
                        purifier: Generator | None = None, passes: int = 1) -> float:
    """Percent of triggered non-target test images classified as the target label."""
    sel = test_set.subset(psr_selection(test_set, spec.target_label))
    pred = predictions(classifier, apply_trigger_test(sel, spec).images, purifier, passes)
    return 100.0 * int(np.sum(pred == spec.target_label)) / len(pred)


def natural_accuracy(classifier: Classifier, test_set: LabeledImageSet,
                     purifier: Generator | None = None, passes: int = 1) -> float:
    if len(test_set) == 0:
        raise ConfigError("empty test set")
    pred = predictions(classifier, test_set.images, purifier, passes)
    return 100.0 * int(np.sum(pred == test_set.labels)) / len(pred)


def psnr(x: np.ndarray, y: np.ndarray, max_value: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"psnr shapes differ: {x.shape} vs {y.shape}")
    err = float(np.mean((x - y) ** 2))
    if err == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * math.log10(max_value ** 2 / err))


def reconstruction_stats(images: np.ndarray, purifier: Generator | None,
                         passes: int = 1) -> tuple[float, float]:
    """(mean per-image PSNR, mean MSE) of clean images against their purified versions."""
    out = _maybe_purify(images, purifier, passes)
    psnrs = [psnr(a, b) for a, b in zip(images, out)]
    mse = float(np.mean((images.astype(np.float64) - out) ** 2))
    return float(np.mean(psnrs)), mse


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRICS = ("psr_percent", "nat_acc_percent", "psnr_db_mean", "recon_mse_mean")


@dataclass
class SeedResult:
    seed: int
    psr_percent: float = float("nan")
    nat_acc_percent: float = float("nan")
    psnr_db_mean: float = float("nan")
    recon_mse_mean: float = float("nan")
    status: str = "ok"
    extras: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


@dataclass
class EvalReport:
    psr_percent: float
    nat_acc_percent: float
    psnr_db_mean: float
    recon_mse_mean: float
    config_echo: str
    seeds: list[int]
    std_devs: dict[str, float] | None
    per_seed: list[SeedResult]

    @property
    def failed(self) -> bool:
        return any(not r.ok for r in self.per_seed)

    @classmethod
    def aggregate(cls, per_seed: list[SeedResult], config_echo: str = "") -> "EvalReport":
        per_seed = sorted(per_seed, key=lambda r: r.seed)
        good = [r for r in per_seed if r.ok]
        means, stds = {}, {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in good], dtype=np.float64)
            means[m] = float(vals.mean()) if len(vals) else float("nan")
            stds[m] = float(vals.std()) if len(vals) else float("nan")
        return cls(**means, config_echo=config_echo, seeds=[r.seed for r in per_seed],
                   std_devs=stds if len(per_seed) > 1 else None, per_seed=per_seed)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", *METRICS, "status"])
        for r in self.per_seed:
            w.writerow([f"seed={r.seed}", *(_fmt(getattr(r, m)) for m in METRICS), r.status])
        w.writerow(["mean", *(_fmt(getattr(self, m)) for m in METRICS),
                    "failed" if self.failed else "ok"])
        if self.std_devs is not None:
            w.writerow(["std", *(_fmt(self.std_devs[m]) for m in METRICS), ""])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())

    def summary(self) -> str:
        def pm(m):
            s = "" if self.std_devs is None else f" +- {self.std_devs[m]:.2f}"
            return f"{getattr(self, m):.2f}{s}"
        lines = [f"seeds: {','.join(map(str, self.seeds))}",
                 f"poison success rate (%): {pm('psr_percent')}",
                 f"natural accuracy (%):    {pm('nat_acc_percent')}",
                 f"reconstruction PSNR (dB): {pm('psnr_db_mean')}",
                 f"reconstruction MSE:      {self.recon_mse_mean:.6f}"]
        for r in self.per_seed:
            if not r.ok:
                lines.append(f"seed {r.seed}: {r.status}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiment pipeline
# ---------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    d = cfg.data
    if d.source == "synthetic":
        return (gen_synthetic(d.n_train_per_class, d.n_classes, d.seed),
                gen_synthetic(d.n_test_per_class, d.n_classes, d.seed + TEST_SEED_OFFSET))
    if d.source == "cifar10":
        if not d.path:
            raise ConfigError("data.path is required for data.source = cifar10")
        return read_cifar10_binary(d.path, "train"), read_cifar10_binary(d.path, "test")
    raise ConfigError(f"unknown data.source {d.source!r}")


def purifier_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    p = cfg.purifier
    return TrainConfig(learning_rate=p.learning_rate, batch_size=p.batch_size, epochs=p.epochs,
                       beta=p.beta, lambda_gan=p.lambda_gan, codebook_K=p.codebook_K, seed=seed,
                       latent_dim=p.latent_dim, width=p.width, n_res_blocks=p.n_res_blocks,
                       disc_layers=p.disc_layers, reinit_dead_codes=p.reinit_dead_codes,
                       gan_warmup_epochs=p.gan_warmup_epochs)


def classifier_config(cfg: ExperimentConfig, seed: int) -> ClassifierConfig:
    c = cfg.classifier
    return ClassifierConfig(learning_rate=c.learning_rate, batch_size=c.batch_size, epochs=c.epochs,
                            width=c.width, depth=c.depth, seed=seed,
                            lr_schedule=c.lr_schedule)


def grad_align_target(test_set: LabeledImageSet, target_label: int, seed: int) -> int:
    """Index of the test image the gradient-alignment attack tries to flip."""
    pool = psr_selection(test_set, target_label)
    return int(np.random.default_rng([seed, 0x6A]).choice(pool))


@dataclass
class SeedArtifacts:
    """Models and sets produced by one seed's run, kept for audits and dumps."""
    train_set: LabeledImageSet | None = None
    test_set: LabeledImageSet | None = None
    poisoned: object = None
    purifier: Generator | None = None
    classifier: Classifier | None = None
    train_log: object = None


def run_seed(cfg: ExperimentConfig, seed: int, data=None, out_dir=None,
             artifacts: SeedArtifacts | None = None) -> SeedResult:
    """Poison, (optionally) purify and train, then evaluate one seed."""
    result = SeedResult(seed)
    art = artifacts if artifacts is not None else SeedArtifacts()
    stage = "data"
    try:
        train_set, test_set = data if data is not None else load_data(cfg)
        art.train_set, art.test_set = train_set, test_set
        a = cfg.attack
        stage = "poison"
        spec = make_trigger(a.budget, a.poison_fraction, a.target_label, seed,
                            shape=train_set.images.shape[1:])
        target_idx = None
        if a.type == "trigger":
            poisoned = poison_train(train_set, spec)
        elif a.type == "grad_align":
            surrogate = train_classifier(train_set, None, classifier_config(cfg, seed + 5000))
            target_idx = grad_align_target(test_set, a.target_label, seed)
            poisoned = gradient_align_poison(train_set, surrogate, test_set.images[target_idx],
                                             a.target_label, a.budget, a.poison_fraction,
                                             a.grad_align_steps, seed)
            result.extras["cos_improved_fraction"] = poisoned.diagnostics["improved_fraction"]
        elif a.type == "none":
            poisoned = None
        else:
            raise ConfigError(f"unknown attack.type {a.type!r}")
        art.poisoned = poisoned
        train_data = poisoned.dataset if poisoned is not None else train_set

        purifier = None
        if cfg.purifier.enabled:
            stage = "train-purifier"
            log_path = Path(out_dir) / f"purifier_log_seed{seed}.csv" if out_dir else None
            purifier, _, train_log = train_purifier(train_data, purifier_config(cfg, seed), log_path)
            art.purifier, art.train_log = purifier, train_log
            result.extras["distinct_codes"] = train_log.final_distinct_codes

        stage = "train-classifier"
        clf = train_classifier(train_data, purifier, classifier_config(cfg, seed))
        art.classifier = clf

        stage = "evaluate"
        passes = cfg.eval.passes
        test_purifier = purifier if cfg.eval.test_time_purify else None
        result.nat_acc_percent = natural_accuracy(clf, test_set, test_purifier, passes)
        if a.type == "grad_align":
            pred = predictions(clf, test_set.images[target_idx:target_idx + 1], test_purifier, passes)
            result.psr_percent = 100.0 * float(pred[0] == a.target_label)
        else:
            result.psr_percent = poison_success_rate(clf, test_set, spec, test_purifier, passes)
        result.psnr_db_mean, result.recon_mse_mean = reconstruction_stats(test_set.images, purifier, passes)
    except VQPurifyError as exc:
        log.error("seed %d failed during %s: %s", seed, stage, exc)
        result.status = f"failed:{stage}"
    return result


def run_experiment(cfg: ExperimentConfig, out_dir=None, data=None,
                   artifacts: dict[int, SeedArtifacts] | None = None) -> EvalReport:
    cfg.validate()
    if not cfg.eval.seeds:
        raise ConfigError("eval.seeds must be non-empty")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        cfg.echo(out_dir)
    if data is None:
        data = load_data(cfg)
    per_seed = []
    for seed in sorted(cfg.eval.seeds):
        art = SeedArtifacts()
        per_seed.append(run_seed(cfg, seed, data, out_dir, art))
        if artifacts is not None:
            artifacts[seed] = art
    report = EvalReport.aggregate(per_seed, cfg.to_text())
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "report.csv")
        (Path(out_dir) / "summary.txt").write_text(report.summary())
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

AXES = {"codebook_K": ("purifier", "codebook_K"), "model_width": ("purifier", "width")}
AXIS_ALIASES = {"K": "codebook_K", "width": "model_width"}


@dataclass
class AblationGrid:
    axis: str
    points: list[tuple[float, EvalReport]]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, *METRICS, *(f"{m}_std" for m in METRICS), "status"])
        for value, rep in self.points:
            stds = rep.std_devs or {m: float("nan") for m in METRICS}
            w.writerow([value, *(_fmt(getattr(rep, m)) for m in METRICS),
                        *(_fmt(stds[m]) for m in METRICS), "failed" if rep.failed else "ok"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())


def with_axis_value(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    section, key = AXES[axis]
    return cfg.replace_field(section, key, value)


def ablate(axis: str, values, base: ExperimentConfig, out_dir=None, data=None,
           cache: dict | None = None) -> AblationGrid:
    """One experiment per axis value, everything else fixed.

    ``cache`` maps an already-computed axis value to its report, so a grid can
    reuse a run made elsewhere with an identical configuration.
    """
    axis = AXIS_ALIASES.get(axis, axis)
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    values = sorted(set(int(v) for v in values))
    if len(values) < 2:
        raise ConfigError("an ablation needs at least two distinct values")
    if data is None:
        data = load_data(base)
    points = []
    for v in values:
        if cache is not None and v in cache:
            points.append((v, cache[v]))
            continue
        sub = Path(out_dir) / f"{axis}={v}" if out_dir is not None else None
        try:
            rep = run_experiment(with_axis_value(base, axis, v), sub, data)
        except VQPurifyError as exc:
            log.error("ablation point %s=%s failed: %s", axis, v, exc)
            rep = EvalReport.aggregate([SeedResult(s, status="failed:config") for s in base.eval.seeds])
        points.append((v, rep))
    grid = AblationGrid(axis, points)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        grid.write_csv(Path(out_dir) / "ablation.csv")
    return grid


def prediction_dump(classifier: Classifier, test_set: LabeledImageSet, spec: TriggerSpec,
                    purifier: Generator | None = None, passes: int = 1) -> str:
    """Per-sample CSV: index, label, clean prediction, triggered prediction (blank for target class)."""
    clean = predictions(classifier, test_set.images, purifier, passes)
    trig = predictions(classifier, apply_trigger_test(test_set, spec).images, purifier, passes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label", "pred_clean", "pred_triggered"])
    for i, (y, pc, pt) in enumerate(zip(test_set.labels, clean, trig)):
        w.writerow([i, int(y), int(pc), "" if y == spec.target_label else int(pt)])
    return buf.getvalue()


def rates_from_dump(text: str, target_label: int) -> tuple[float, float]:
    """(PSR, natural accuracy) recomputed from a prediction dump."""
    rows = list(csv.DictReader(io.StringIO(text)))
    correct = sum(int(r["pred_clean"]) == int(r["label"]) for r in rows)
    trig = [r for r in rows if r["pred_triggered"] != ""]
    hits = sum(int(r["pred_triggered"]) == target_label for r in trig)
    return 100.0 * hits / len(trig), 100.0 * correct / len(rows)
