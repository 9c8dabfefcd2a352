import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqpurify.data import LabeledImageSet, gen_synthetic
from vqpurify.errors import ConfigError
from vqpurify.nets import ClassifierSpec, build_classifier
from vqpurify.poison import (_as_float64, _param_grad, alignment_input_gradient, apply_trigger_test,
                             cosine, gradient_align_poison, make_trigger, poison_count, poison_train)

XI = np.float32(8 / 255)


@pytest.fixture(scope="module")
def train_set():
    return gen_synthetic(20, 10, seed=0)


def test_trigger_entries_are_plus_minus_budget():
    spec = make_trigger(8 / 255, seed=3)
    assert set(np.unique(spec.pattern).tolist()) == {float(-XI), float(XI)}
    assert spec.pattern.shape == (3, 32, 32)


def test_trigger_deterministic():
    a, b = make_trigger(seed=7), make_trigger(seed=7)
    assert a.pattern.tobytes() == b.pattern.tobytes()
    assert not np.array_equal(a.pattern, make_trigger(seed=8).pattern)


def test_zero_budget_gives_zero_pattern():
    assert not np.any(make_trigger(0.0).pattern)


def test_fraction_invariant():
    with pytest.raises(ConfigError):
        make_trigger(poison_fraction=0.0)
    with pytest.raises(ConfigError):
        make_trigger(poison_fraction=1.5)


def test_poison_count_rounding():
    assert poison_count(5000, 0.01) == 50
    assert poison_count(250, 0.01) == 3     # 2.5 rounds up
    assert poison_count(40, 0.01) == 0


def test_poison_train_contract(train_set):
    spec = make_trigger(poison_fraction=0.05, target_label=2, seed=1)
    p = poison_train(train_set, spec)
    assert len(p.poisoned_indices) == 10
    assert p.poisoned_indices == sorted(p.poisoned_indices)
    assert np.all(train_set.labels[p.poisoned_indices] == 2)
    assert np.array_equal(p.dataset.labels, train_set.labels)
    diff = np.abs(p.dataset.images - train_set.images)
    assert diff.max() <= XI + 1e-6
    untouched = np.setdiff1d(np.arange(len(train_set)), p.poisoned_indices)
    assert not diff[untouched].any()
    assert p.dataset.images.min() >= 0 and p.dataset.images.max() <= 1
    assert p.dataset.poison_flags.sum() == 10


def test_poison_train_deterministic(train_set):
    spec = make_trigger(poison_fraction=0.05, target_label=4, seed=2)
    a, b = poison_train(train_set, spec), poison_train(train_set, spec)
    assert a.poisoned_indices == b.poisoned_indices
    assert a.dataset.images.tobytes() == b.dataset.images.tobytes()


def test_poison_train_degenerate_fraction(train_set):
    p = poison_train(train_set, make_trigger(poison_fraction=0.001))
    assert p.poisoned_indices == []
    assert np.array_equal(p.dataset.images, train_set.images)


def test_poison_train_too_few_target_samples(train_set):
    with pytest.raises(ConfigError):
        poison_train(train_set, make_trigger(poison_fraction=0.5, target_label=0))


def test_apply_trigger_test(train_set):
    spec = make_trigger(seed=5)
    out = apply_trigger_test(train_set, spec)
    assert np.abs(out.images - train_set.images).max() <= XI + 1e-6
    assert np.array_equal(out.labels, train_set.labels)
    empty = train_set.subset(np.array([], dtype=int))
    assert len(apply_trigger_test(empty, spec)) == 0
    twice = apply_trigger_test(out, spec)
    assert np.allclose(twice.images, np.clip(train_set.images + 2 * spec.pattern, 0, 1), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.2), st.integers(0, 2 ** 16))
def test_budget_property(budget, seed):
    rng = np.random.default_rng(seed)
    ds = LabeledImageSet(rng.random((20, 3, 4, 4)), np.repeat(np.arange(2), 10), n_classes=2)
    spec = make_trigger(budget, poison_fraction=0.25, target_label=1, seed=seed, shape=(3, 4, 4))
    p = poison_train(ds, spec)
    assert np.abs(p.dataset.images - ds.images).max() <= np.float32(budget) + 1e-6
    assert np.array_equal(p.dataset.labels, ds.labels)


# ---------------------------------------------------------------------------
# gradient alignment
# ---------------------------------------------------------------------------

def tiny_problem(seed=0):
    rng = np.random.default_rng(seed)
    ds = LabeledImageSet(rng.random((40, 3, 8, 8)), np.repeat(np.arange(4), 10), n_classes=4)
    model = build_classifier(ClassifierSpec(n_classes=4, width=4, depth=2), seed)
    return ds, model, rng.random((3, 8, 8))


def test_alignment_gradient_matches_finite_difference():
    ds, model, target = tiny_problem()
    m = _as_float64(model)
    tgrad = _param_grad(m, target[None], 1)
    x = ds.images[12].astype(np.float64)[None]
    cos, grad = alignment_input_gradient(m, x, 1, tgrad)
    assert cos == pytest.approx(cosine(_param_grad(m, x, 1), tgrad), abs=1e-12)
    rng = np.random.default_rng(1)
    h = 1e-4
    for _ in range(6):
        pos = tuple(rng.integers(0, s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[pos] += h
        xm[pos] -= h
        fd = (cosine(_param_grad(m, xp, 1), tgrad) - cosine(_param_grad(m, xm, 1), tgrad)) / (2 * h)
        assert grad[pos] == pytest.approx(fd, rel=2e-3, abs=1e-5)


def test_gradient_align_budget_and_improvement():
    ds, model, target = tiny_problem()
    p = gradient_align_poison(ds, model, target, target_label=1, budget=8 / 255,
                              poison_fraction=0.1, steps=5, seed=0)
    assert len(p.poisoned_indices) == 4
    assert np.all(ds.labels[p.poisoned_indices] == 1)
    assert np.array_equal(p.dataset.labels, ds.labels)
    assert np.abs(p.dataset.images - ds.images).max() <= 8 / 255 + 1e-6
    before, after = np.array(p.diagnostics["cos_before"]), np.array(p.diagnostics["cos_after"])
    assert np.mean(after >= before) >= 0.9


def test_gradient_align_single_step_size():
    ds, model, target = tiny_problem()
    p = gradient_align_poison(ds, model, target, 1, budget=8 / 255, poison_fraction=0.05,
                              steps=1, seed=0)
    delta = p.dataset.images[p.poisoned_indices] - ds.images[p.poisoned_indices]
    inside = (ds.images[p.poisoned_indices] > 2 / 255) & (ds.images[p.poisoned_indices] < 1 - 2 / 255)
    assert np.allclose(np.abs(delta[inside]), 2 / 255, atol=1e-6)


def test_gradient_align_deterministic():
    ds, model, target = tiny_problem()
    a = gradient_align_poison(ds, model, target, 1, poison_fraction=0.05, steps=2, seed=3)
    b = gradient_align_poison(ds, model, target, 1, poison_fraction=0.05, steps=2, seed=3)
    assert a.dataset.images.tobytes() == b.dataset.images.tobytes()


def test_gradient_align_requires_a_step():
    ds, model, target = tiny_problem()
    with pytest.raises(ConfigError):
        gradient_align_poison(ds, model, target, 1, steps=0)


def test_gradient_align_nonfinite_keeps_sample_clean():
    ds, model, target = tiny_problem()
    model.head.weight.data[...] = np.nan
    p = gradient_align_poison(ds, model, target, 1, poison_fraction=0.05, steps=1, seed=0)
    assert p.poisoned_indices == []
    assert len(p.diagnostics["failed"]) == 2
    assert np.array_equal(p.dataset.images, ds.images)
