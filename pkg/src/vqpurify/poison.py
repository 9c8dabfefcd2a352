"""Clean-label poisoning at desk scale: a fixed l-inf trigger and a gradient-alignment attack."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledImageSet
from .errors import ConfigError
from .nets import Classifier
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TriggerSpec:
    pattern: np.ndarray            # (3, H, W), every entry in [-budget, budget]
    budget: float = 8 / 255
    poison_fraction: float = 0.01
    target_label: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.poison_fraction <= 1:
            raise ConfigError(f"poison_fraction must be in (0, 1], got {self.poison_fraction}")
        b = np.float32(self.budget)
        self.pattern = np.clip(np.asarray(self.pattern, dtype=np.float32), -b, b)

    def header(self) -> str:
        return (f"# budget={self.budget!r} poison_fraction={self.poison_fraction!r} "
                f"target_label={self.target_label} seed={self.seed}")


@dataclass
class PoisonedDataset:
    base: LabeledImageSet
    poisoned_indices: list[int]
    spec: TriggerSpec | None
    dataset: LabeledImageSet       # the poisoned copy actually used for training
    diagnostics: dict = field(default_factory=dict)


def poison_count(n: int, fraction: float) -> int:
    """round(fraction * n), halves rounded up."""
    return int(np.floor(fraction * n + 0.5))


def make_trigger(budget: float = 8 / 255, poison_fraction: float = 0.01, target_label: int = 0,
                 seed: int = 0, shape=(3, 32, 32)) -> TriggerSpec:
    """Pseudo-random +-budget pattern, one sign per channel-pixel."""
    if budget < 0:
        raise ConfigError(f"budget must be non-negative, got {budget}")
    rng = np.random.default_rng([seed, 0x7219])
    signs = rng.integers(0, 2, size=shape).astype(np.float32) * 2 - 1
    return TriggerSpec(signs * np.float32(budget), budget, poison_fraction, target_label, seed)


def add_trigger(images: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    return np.clip(images + pattern[None], 0.0, 1.0).astype(np.float32)


def _select_target_samples(ds: LabeledImageSet, target: int, fraction: float, seed: int) -> np.ndarray:
    k = poison_count(len(ds), fraction)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    pool = np.flatnonzero(ds.labels == target)
    if len(pool) < k:
        raise ConfigError(f"class {target} has {len(pool)} samples, attack needs {k}")
    rng = np.random.default_rng([seed, 0x5E1])
    return np.sort(rng.choice(pool, size=k, replace=False))


def poison_train(ds: LabeledImageSet, spec: TriggerSpec) -> PoisonedDataset:
    """Add the trigger to round(alpha*N) target-class samples; labels are left untouched."""
    if not 0 <= spec.target_label < ds.n_classes:
        raise ConfigError(f"target label {spec.target_label} not in [0, {ds.n_classes})")
    idx = _select_target_samples(ds, spec.target_label, spec.poison_fraction, spec.seed)
    images = ds.images.copy()
    flags = ds.poison_flags.copy()
    if idx.size:
        images[idx] = add_trigger(images[idx], spec.pattern)
        flags[idx] = True
    out = LabeledImageSet(images, ds.labels.copy(), flags, ds.n_classes)
    return PoisonedDataset(ds, idx.tolist(), spec, out)


def apply_trigger_test(ds: LabeledImageSet, spec: TriggerSpec) -> LabeledImageSet:
    if len(ds) == 0:
        return ds.with_images(ds.images.copy())
    return ds.with_images(add_trigger(ds.images, spec.pattern))


# ---------------------------------------------------------------------------
# gradient alignment
# ---------------------------------------------------------------------------

def _as_float64(model: Classifier) -> Classifier:
    m = copy.deepcopy(model)
    for p in m.parameters():
        p.data = p.data.astype(np.float64)
        p.grad = None
    return m


def _param_grad(model: Classifier, x: np.ndarray, label: int) -> np.ndarray:
    params = model.parameters()
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = T.cross_entropy(model(Tensor(x, dtype=np.float64)), np.array([label]))
    tape.backward(loss)
    return np.concatenate([p.grad.ravel() for p in params])


def _input_grad(model: Classifier, x: np.ndarray, label: int) -> np.ndarray:
    xt = Tensor(x, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = T.cross_entropy(model(xt), np.array([label]))
    tape.backward(loss)
    for p in model.parameters():
        p.grad = None
    return xt.grad


def _shift_params(model: Classifier, direction: np.ndarray, scale: float) -> None:
    offset = 0
    for p in model.parameters():
        p.data += scale * direction[offset:offset + p.size].reshape(p.shape)
        offset += p.size


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-30))


def alignment_input_gradient(model: Classifier, x: np.ndarray, label: int,
                             target_grad: np.ndarray) -> tuple[float, np.ndarray]:
    """Cosine between the sample's parameter gradient and ``target_grad``, and its input gradient.

    The input gradient of the cosine is a mixed second derivative. With
    v = d cos / d g held fixed it equals d/dx <grad_theta L(x), v>, obtained here
    as a central difference of input gradients at theta +- eps*v.
    """
    g = _param_grad(model, x, label)
    gn, tn = np.linalg.norm(g), np.linalg.norm(target_grad)
    cos = float(g @ target_grad / (gn * tn + 1e-30))
    v = target_grad / (gn * tn + 1e-30) - cos * g / (gn * gn + 1e-30)
    theta_norm = np.sqrt(sum(float(np.sum(p.data ** 2)) for p in model.parameters()))
    eps = 1e-4 * max(theta_norm, 1.0) / (np.linalg.norm(v) + 1e-30)
    _shift_params(model, v, eps)
    plus = _input_grad(model, x, label)
    _shift_params(model, v, -2 * eps)
    minus = _input_grad(model, x, label)
    _shift_params(model, v, eps)
    return cos, (plus - minus) / (2 * eps)


def gradient_align_poison(ds: LabeledImageSet, surrogate: Classifier, target_image: np.ndarray,
                          target_label: int, budget: float = 8 / 255, poison_fraction: float = 0.01,
                          steps: int = 10, seed: int = 0) -> PoisonedDataset:
    """Perturb target-class samples so their training gradient points along the target's.

    Each poison takes ``steps`` signed steps of size budget/4 that raise the
    cosine alignment, projected back into the budget ball and the [0, 1] box.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if not 0 <= target_label < ds.n_classes:
        raise ConfigError(f"target label {target_label} not in [0, {ds.n_classes})")
    idx = _select_target_samples(ds, target_label, poison_fraction, seed)
    model = _as_float64(surrogate)
    target = np.asarray(target_image, dtype=np.float64)[None]
    target_grad = _param_grad(model, target, target_label)
    step = budget / 4

    images = ds.images.copy()
    flags = ds.poison_flags.copy()
    before, after, failed = [], [], []
    kept = []
    for i in idx:
        x0 = ds.images[i].astype(np.float64)[None]
        delta = np.zeros_like(x0)
        cos0 = None
        ok = True
        for _ in range(steps):
            cos, grad = alignment_input_gradient(model, x0 + delta, target_label, target_grad)
            if not np.isfinite(grad).all():
                ok = False
                break
            if cos0 is None:
                cos0 = cos
            delta = np.clip(delta + step * np.sign(grad), -budget, budget)
            delta = np.clip(x0 + delta, 0.0, 1.0) - x0
        if not ok:
            failed.append(int(i))
            log.warning("non-finite alignment gradient for sample %d; left clean", i)
            continue
        cos_final = cosine(_param_grad(model, x0 + delta, target_label), target_grad)
        before.append(cos0)
        after.append(cos_final)
        images[i] = (x0 + delta)[0].astype(np.float32)
        flags[i] = True
        kept.append(int(i))
    out = LabeledImageSet(images, ds.labels.copy(), flags, ds.n_classes)
    diag = {"cos_before": before, "cos_after": after, "failed": failed,
            "improved_fraction": float(np.mean(np.array(after) >= np.array(before))) if after else 0.0}
    return PoisonedDataset(ds, kept, None, out, diag)
