import math

import numpy as np
import pytest

from izsd.losses import (
    HyperParams,
    LossValueGrad,
    ProposalBatch,
    bfmse,
    compose_bone,
    compose_il,
    cross_entropy,
    distillation,
    feature_distance,
    plain_mse,
    projection_distance,
    reconstruction,
    triplet,
)
from izsd.semantic import Registry, build_table

from oracles import central_diff, max_rel_err

SEEDS = range(20)
# central differences are exact on quadratics, so a wide step only cuts roundoff
QUAD_STEP = 1e-3


def _setup(seed, n_bg=4, n_obj=2, v=5, d=3, C=4):
    rng = np.random.default_rng(seed)
    table = build_table(rng.normal(size=(C, d)), [f"c{i}" for i in range(C)])
    labels = np.concatenate([np.zeros(n_bg, dtype=int), rng.integers(1, C + 1, size=n_obj)])
    F = rng.normal(size=(n_bg + n_obj, v))
    W = rng.normal(size=(d, v))
    return table, ProposalBatch(F, labels), W


def _check(fn, x, analytic, tol=1e-4, h=1e-5):
    num = central_diff(fn, x, h)
    assert max_rel_err(analytic, num) < tol


def test_bfmse_perfect_fit():
    table = build_table(np.eye(3), list("abc"))
    labels = np.array([0, 1, 2, 3])
    W = np.eye(3)
    b = ProposalBatch(table.embeddings[labels], labels)
    out = bfmse(b, W, table, 5.0)
    assert out.value == 0.0
    assert np.all(out.grad_W == 0)


def test_bfmse_single_background():
    table = build_table(np.array([[-1.0, 1.0], [1.0, 1.0]]), ["a", "b"])
    assert table.embeddings[0] == pytest.approx([0.0, 1.0])
    b = ProposalBatch(np.array([[1.0, 0.0]]), np.array([0]))
    assert bfmse(b, np.eye(2), table).value == pytest.approx(2.0)


def test_bfmse_weighting():
    table, b, W = _setup(0)
    R = b.features @ W.T - table.embeddings[b.labels]
    sq = (R ** 2).sum(axis=1)
    want = sq[:4].mean() + 5.0 * sq[4:].mean()
    assert bfmse(b, W, table, 5.0).value == pytest.approx(want, rel=1e-12)
    assert plain_mse(b, W, table).value == pytest.approx(sq.mean(), rel=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_bfmse_gradients(seed):
    table, b, W = _setup(seed + 3)
    out = bfmse(b, W, table, 5.0)
    _check(lambda w: bfmse(b, w, table, 5.0).value, W, out["W"])
    _check(lambda f: bfmse(ProposalBatch(f, b.labels), W, table, 5.0).value, b.features, out["features"])


@pytest.mark.parametrize("seed", SEEDS)
def test_plain_mse_gradients(seed):
    table, b, W = _setup(seed + 100)
    out = plain_mse(b, W, table)
    _check(lambda w: plain_mse(b, w, table).value, W, out["W"])


def test_reconstruction_limits():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    F = rng.normal(size=(6, 4))
    b = ProposalBatch(F, np.zeros(6, dtype=int))
    assert reconstruction(b, Q).value == pytest.approx(0.0, abs=1e-24)
    assert reconstruction(b, np.zeros((3, 4))).value == pytest.approx((F ** 2).sum(axis=1).mean())


@pytest.mark.parametrize("seed", SEEDS)
def test_reconstruction_gradients(seed):
    _, b, W = _setup(seed + 5)
    out = reconstruction(b, W)
    _check(lambda w: reconstruction(b, w).value, W, out["W"])
    _check(lambda f: reconstruction(ProposalBatch(f, b.labels), W).value, b.features, out["features"])


def test_triplet_satisfied_and_worst_case():
    table = build_table(np.eye(3), list("abc"))
    W = np.eye(3)
    # collinear with its own row, orthogonal to all others: hinge 1 + 0 - 1 = 0
    good = ProposalBatch(np.array([[0.0, 2.0, 0.0]]), np.array([2]))
    assert triplet(good, W, table, [1, 2, 3], 1.0).value == pytest.approx(0.0, abs=1e-15)
    # collinear with row 1, orthogonal to own row 2: the (2,1) pair gives 1 + 1 - 0
    bad = ProposalBatch(np.array([[3.0, 0.0, 0.0]]), np.array([2]))
    assert triplet(bad, W, table, [1, 2], 1.0).value == pytest.approx(2.0)


def _away_from_kinks(b, W, table, seen, m, h=1e-5, gap=1e-3):
    S = b.features @ W.T
    Sh = S / np.linalg.norm(S, axis=1, keepdims=True)
    C = Sh @ table.embeddings[seen].T
    own = np.einsum("ij,ij->i", Sh, table.embeddings[b.labels])
    return np.all(np.abs(m + C - own[:, None]) > gap)


@pytest.mark.parametrize("seed", SEEDS)
def test_triplet_gradients(seed):
    seen = [1, 2, 3, 4]
    rng_seed = seed + 9
    while True:
        table, b, W = _setup(rng_seed, n_bg=2, n_obj=4)
        if _away_from_kinks(b, W, table, seen, 1.0):
            break
        rng_seed += 1000
    out = triplet(b, W, table, seen, 1.0)
    _check(lambda w: triplet(b, w, table, seen, 1.0).value, W, out["W"])
    _check(lambda f: triplet(ProposalBatch(f, b.labels), W, table, seen, 1.0).value, b.features, out["features"])


def test_cross_entropy_closed_forms():
    out = cross_entropy(np.array([10.0, -10.0]), 0)
    assert out.value == pytest.approx(2.06e-9, rel=1e-2)
    assert out["logits"] == pytest.approx([-2.06e-9, 2.06e-9], rel=1e-2)
    assert cross_entropy(np.zeros(7), 3).value == pytest.approx(math.log(7))


def test_cross_entropy_rejects_nonfinite():
    with pytest.raises(ValueError):
        cross_entropy(np.array([1.0, np.inf]), 0)


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradients(seed):
    z = np.random.default_rng(seed + 2).normal(size=5)
    _check(lambda x: cross_entropy(x, 3).value, z, cross_entropy(z, 3)["logits"], tol=1e-6)


def test_distillation_limits():
    z = np.array([0.3, -1.2, 2.0])
    out = distillation(z, z, 2.0)
    q = np.exp(z / 2) / np.exp(z / 2).sum()
    assert out.value == pytest.approx(-(q * np.log(q)).sum())
    assert np.allclose(out["logits_old"], 0.0, atol=1e-15)
    sat = distillation(np.array([60.0, -60.0, -60.0]), np.zeros(3), 2.0)
    assert sat.value == pytest.approx(math.log(3), rel=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_distillation_gradients(seed):
    rng = np.random.default_rng(seed + 4)
    old, new = rng.normal(size=6), rng.normal(size=6)
    _check(lambda x: distillation(old, x, 2.0).value, new, distillation(old, new, 2.0)["logits_old"], tol=1e-6)


def test_projection_distance_values():
    assert projection_distance(np.ones(3), np.ones(3)).value == 0.0
    assert projection_distance(np.zeros(2), np.array([3.0, 4.0])).value == pytest.approx(25.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_projection_distance_gradients(seed):
    rng = np.random.default_rng(seed + 6)
    a, b = rng.normal(size=4), rng.normal(size=4)
    _check(lambda x: projection_distance(a, x).value, b, projection_distance(a, b)["s_new"], tol=1e-8, h=QUAD_STEP)


def test_feature_distance_values():
    a = np.arange(4.0).reshape(2, 2)
    assert feature_distance(a, a).value == 0.0
    assert feature_distance(a, a + 1.0).value == pytest.approx(4.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_feature_distance_gradients(seed):
    rng = np.random.default_rng(seed + 8)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _check(lambda x: feature_distance(a, x).value, b, feature_distance(a, b)["new_features"], tol=1e-8, h=QUAD_STEP)


def test_compose_bone_perfect_fit():
    table = build_table(np.eye(3), list("abc"))
    labels = np.array([1, 2, 3])
    b = ProposalBatch(table.embeddings[labels], labels)
    assert compose_bone(b, np.eye(3), table, [1, 2, 3], HyperParams()).value == pytest.approx(0.0, abs=1e-15)


def test_compose_bone_sum():
    table, b, W = _setup(12)
    seen = [1, 2, 3, 4]
    hp = HyperParams()
    want = bfmse(b, W, table, hp.alpha).value + hp.beta * reconstruction(b, W).value + triplet(b, W, table, seen, hp.margin).value
    assert compose_bone(b, W, table, seen, hp).value == pytest.approx(want, abs=1e-12)
    hp0 = HyperParams(beta=1e-300)
    no_rec = bfmse(b, W, table, hp.alpha).value + triplet(b, W, table, seen, hp.margin).value
    assert compose_bone(b, W, table, seen, hp0).value == pytest.approx(no_rec, abs=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_compose_bone_gradients(seed):
    seen = [1, 2, 3, 4]
    s = seed + 40
    while True:
        table, b, W = _setup(s)
        if _away_from_kinks(b, W, table, seen, 1.0):
            break
        s += 1000
    hp = HyperParams()
    out = compose_bone(b, W, table, seen, hp)
    _check(lambda w: compose_bone(b, w, table, seen, hp).value, W, out["W"])


def _unit(v):
    return LossValueGrad(v, {})


def test_compose_il_step_two_counts():
    reg = Registry(frozenset(range(1, 6)), frozenset(range(6, 11)), frozenset(range(11, 21)))
    out = compose_il(_unit(1.0), _unit(1.0), _unit(1.0), _unit(1.0), reg, 2.0)
    assert out.value == pytest.approx(2.75)


def test_compose_il_first_step_shape():
    reg = Registry(frozenset(), frozenset({1, 2}), frozenset({3, 4}))
    out = compose_il(_unit(3.0), _unit(5.0), _unit(1.0), _unit(0.5), reg, 2.0)
    assert out.value == pytest.approx(0.5 * 1.0 + 2.0 * 0.5)


def test_compose_il_gamma_zero():
    reg = Registry(frozenset({1}), frozenset({2}), frozenset())
    fd_a = LossValueGrad(123.0, {"new_features": np.full(3, 7.0)})
    out = compose_il(_unit(1.0), _unit(1.0), _unit(1.0), fd_a, reg, 0.0)
    assert out.value == pytest.approx(1.5)
    assert np.all(out["new_features"] == 0)
