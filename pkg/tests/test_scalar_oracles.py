"""Hand evaluations with plain Python floats, checked against the vectorized models and losses."""
import math

import numpy as np
import pytest

from esmc.embedding import FeatureSchema, FieldSpec
from esmc.models import ModelConfig, Variant, build_model, compose
from esmc.objectives import LossWeights, cross_entropy, objective, parameter_kl, task_losses
from esmc.samples import SampleSet

SCHEMA = FeatureSchema((FieldSpec("f", 3, 2), FieldSpec("g", 2, 1)))
SLOPE = 0.01
EPS = 1e-7


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lrelu(z):
    return z if z > 0 else SLOPE * z


def layers_of(params, prefix):
    out, i = [], 0
    while f"{prefix}.{i}.weight" in params:
        w = params[f"{prefix}.{i}.weight"].tolist()
        b = params[f"{prefix}.{i}.bias"].tolist()
        out.append((w, b))
        i += 1
    return out


def mlp(layers, x, last="sigmoid"):
    h = list(x)
    for k, (w, b) in enumerate(layers):
        z = [sum(w[r][j] * h[j] for j in range(len(h))) + b[r] for r in range(len(b))]
        if k < len(layers) - 1 or last == "leaky":
            h = [lrelu(v) for v in z]
        elif last == "sigmoid":
            h = [sig(v) for v in z]
        else:
            h = z
    return h


def embed(params, ids):
    return (params["embedding.f"][ids[0]].tolist() + params["embedding.g"][ids[1]].tolist())


def hand_forward(model, ids):
    """(ctr, cvr, car) conditionals for one sample, by scalar loops."""
    p = model.parameters()
    x = embed(p, ids)
    v = model.config.variant
    if v is Variant.SHARED_BOTTOM:
        z = mlp(layers_of(p, "bottom"), x, last="leaky")
        return mlp(layers_of(p, "head_ctr"), z)[0], mlp(layers_of(p, "head_cvr"), z)[0], None
    if v is Variant.MMOE:
        ex = [mlp(layers_of(p, f"expert_{e}"), x, last="leaky") for e in range(model.config.n_experts)]
        out = []
        for h in ("ctr", "cvr"):
            logits = mlp(layers_of(p, f"gate_{h}"), x, last="identity")
            m = max(logits)
            w = [math.exp(l - m) for l in logits]
            w = [a / sum(w) for a in w]
            mixed = [sum(w[e] * ex[e][k] for e in range(len(ex))) for k in range(len(ex[0]))]
            out.append(mlp(layers_of(p, f"head_{h}"), mixed)[0])
        return out[0], out[1], None
    ctr = mlp(layers_of(p, "ctr"), x)[0]
    if v is Variant.ESMM:
        return ctr, mlp(layers_of(p, "cvr"), x)[0], None
    if v.siamese:
        s = mlp(layers_of(p, "siamese"), x)[0]
        return ctr, s, s
    return ctr, mlp(layers_of(p, "cvr"), x)[0], mlp(layers_of(p, "car"), x)[0]


def small_model(variant, seed=0):
    m = build_model(ModelConfig(variant, tower_hidden=(3, 2), bottom_hidden=(3,), head_hidden=(2,),
                                n_experts=2, seed=seed), SCHEMA)
    rng = np.random.default_rng(seed + 10)
    for t in m.parameters().values():
        t[...] = rng.normal(0, 0.8, t.shape)
    return m


IDS = np.array([[0, 1], [2, 0], [1, 1], [2, 1]])


@pytest.mark.parametrize("variant", list(Variant))
def test_forward_matches_hand_evaluation(variant):
    m = small_model(variant)
    b = m.forward(IDS)
    for i, ids in enumerate(IDS):
        ctr, cvr, car = hand_forward(m, ids)
        assert b.ctr[i] == pytest.approx(ctr, abs=1e-12)
        assert b.cvr[i] == pytest.approx(cvr, abs=1e-12)
        if variant is Variant.ESMM2:
            assert b.ctcvr[i] == pytest.approx(ctr * car * cvr, abs=1e-12)
        else:
            assert b.ctcvr[i] == pytest.approx(ctr * cvr, abs=1e-12)
        if car is not None:
            assert b.car[i] == pytest.approx(car, abs=1e-12)
            assert b.ctcar[i] == pytest.approx(ctr * car, abs=1e-12)


def test_one_hidden_unit_towers():
    m = build_model(ModelConfig(Variant.ESMC, tower_hidden=(1,)), FeatureSchema((FieldSpec("f", 2, 1),)))
    p = m.parameters()
    p["embedding.f"][1] = [0.5]
    for name, (w0, b0, w1, b1) in {"ctr": (2.0, -0.5, 1.5, 0.1), "car": (-1.0, 0.2, 0.7, -0.3),
                                   "cvr": (0.4, 0.0, -2.0, 0.5)}.items():
        p[f"{name}.0.weight"][...] = w0
        p[f"{name}.0.bias"][...] = b0
        p[f"{name}.1.weight"][...] = w1
        p[f"{name}.1.bias"][...] = b1
    b = m.forward(np.array([[1]]))
    ctr = sig(1.5 * 0.5 + 0.1)  # hidden 2*0.5-0.5 = 0.5
    car = sig(0.7 * (0.01 * -0.3) - 0.3)  # hidden -0.5+0.2 = -0.3, leaky
    cvr = sig(-2.0 * 0.2 + 0.5)  # hidden 0.2
    assert (b.ctr[0], b.car[0], b.cvr[0]) == pytest.approx((ctr, car, cvr), abs=1e-15)
    assert b.ctcvr[0] == pytest.approx(ctr * cvr, abs=1e-15)


def test_compose_worked_values():
    assert compose(np.array([0.5]), np.array([0.4])).ctcvr[0] == pytest.approx(0.2)
    b = compose(np.array([0.6]), np.array([0.9]), np.array([0.9]))
    assert b.ctcar[0] == pytest.approx(0.54) and b.ctcvr[0] == pytest.approx(0.54)
    assert compose(np.array([0.5]), np.array([0.8]), np.array([0.5]), chained=True).ctcvr[0] == pytest.approx(0.2)
    assert compose(np.array([1.0]), np.array([0.3])).ctcvr[0] == 0.3
    assert compose(np.array([0.0]), np.array([0.3]), np.array([0.3])).ctcar[0] == 0.0


def test_mmoe_hand_set_gates():
    m = small_model(Variant.MMOE)
    p = m.parameters()
    for h in ("ctr", "cvr"):
        p[f"gate_{h}.0.weight"][...] = 0.0
        p[f"gate_{h}.0.bias"][...] = [math.log(0.3), math.log(0.7)]
    x = m.embedding.lookup(IDS[:1])
    for w in m.gate_weights(x).values():
        np.testing.assert_allclose(w[0], [0.3, 0.7], atol=1e-15)
    pv = {k: v for k, v in p.items()}
    e0 = mlp(layers_of(pv, "expert_0"), x[0], last="leaky")
    e1 = mlp(layers_of(pv, "expert_1"), x[0], last="leaky")
    mixed = [0.3 * a + 0.7 * b for a, b in zip(e0, e1)]
    assert m.forward(IDS[:1]).ctr[0] == pytest.approx(mlp(layers_of(pv, "head_ctr"), mixed)[0], abs=1e-12)


def test_mmoe_identical_experts_ignore_gates():
    m = small_model(Variant.MMOE)
    p = m.parameters()
    p["expert_1.0.weight"][...] = p["expert_0.0.weight"]
    p["expert_1.0.bias"][...] = p["expert_0.0.bias"]
    before = m.forward(IDS).ctr
    p["gate_ctr.0.bias"][...] = [5.0, -5.0]
    np.testing.assert_allclose(m.forward(IDS).ctr, before, atol=1e-14)


def test_shared_bottom_zero_heads_give_half():
    m = small_model(Variant.SHARED_BOTTOM)
    for k, t in m.parameters().items():
        if not k.startswith("embedding"):
            t[...] = 0.0
    b = m.forward(IDS)
    assert np.all(b.ctr == 0.5) and np.all(b.cvr == 0.5)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ce(y, p):
    p = min(max(p, EPS), 1 - EPS)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def test_cross_entropy_batch_mean():
    v = cross_entropy(np.array([1, 0]), np.array([0.9, 0.2])).mean()
    assert v == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-15)
    assert v == pytest.approx(0.164252, abs=1e-6)


def test_all_positive_labels_at_half():
    s = SampleSet([0], [0], [0], [0], [1], [1], [1], [[0, 0]])
    half = np.array([0.5])
    tl = task_losses(compose(half, half, half), s)
    assert tl.ctcvr == pytest.approx(math.log(4), abs=1e-12)
    assert tl.ctcvr == pytest.approx(1.386294, abs=1e-6)


def test_all_zero_labels_near_zero_loss():
    s = SampleSet([0, 1], [0, 1], [0, 0], [0, 0], [0, 0], [0, 0], [0, 0], [[0, 0], [1, 1]])
    tiny = np.full(2, EPS)
    tl = task_losses(compose(tiny, tiny, tiny), s)
    assert max(tl.ctr, tl.ctcvr, tl.ctcar) < 1e-6


def test_kl_two_point_example():
    a = np.log([0.5, 0.5])
    b = np.log([0.25, 0.75])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert parameter_kl(a, b) == pytest.approx(expected, abs=1e-15)
    assert parameter_kl(a, b) == pytest.approx(0.143841, abs=1e-6)


def hand_kl(model):
    a, b = model.twin_towers()
    pa, pb = a.flat_parameters().tolist(), b.flat_parameters().tolist()
    ma, mb = max(pa), max(pb)
    za = sum(math.exp(v - ma) for v in pa)
    zb = sum(math.exp(v - mb) for v in pb)
    total = 0.0
    for x, y in zip(pa, pb):
        la, lb = x - ma - math.log(za), y - mb - math.log(zb)
        total += math.exp(la) * (la - lb)
    return total


def hand_objective(model, batch, w):
    rows = []
    for i in range(len(batch)):
        ctr, cvr, car = hand_forward(model, batch.feats[i])
        rows.append((ctr, cvr, car, int(batch.c[i]), int(batch.a[i]), int(batch.o[i]), int(batch.domain[i])))
    v = model.config.variant
    n = len(rows)
    total = w.ctr * sum(ce(c, ctr) for ctr, _, _, c, _, _, _ in rows) / n
    chain = v is Variant.ESMM2
    total += w.ctcvr * sum(ce(c * o, ctr * cvr * (car if chain else 1.0))
                           for ctr, cvr, car, c, _, o, _ in rows) / n
    if rows[0][2] is not None:
        total += w.ctcar * sum(ce(c * a * (d == 0), ctr * car) for ctr, _, car, c, a, _, d in rows) / n
        search = [r for r in rows if r[6] == 1]
        if v.global_domain and search and w.ctcar_global:
            total += w.ctcar_global * sum(ce(c * a, ctr * car) for ctr, _, car, c, a, _, _ in search) / len(search)
    if v.twin and w.kl:
        total += w.kl * hand_kl(model)
    return total


def batch_of(rows):
    """rows: (c, a, o, domain, f, g)"""
    r = np.array(rows)
    n = len(rows)
    return SampleSet(np.arange(n), np.arange(n), np.zeros(n), r[:, 3], r[:, 0], r[:, 1], r[:, 2],
                     r[:, 4:6], calibrated=True)


TWO = batch_of([(1, 1, 1, 0, 2, 1), (1, 0, 0, 0, 0, 0)])
FOUR = batch_of([(1, 1, 1, 1, 2, 1), (1, 1, 0, 0, 1, 0), (0, 0, 0, 0, 0, 1), (1, 1, 0, 1, 1, 1)])


@pytest.mark.parametrize("variant, batch", [
    (Variant.ESMC, TWO), (Variant.ESMS, TWO), (Variant.ESMM, TWO), (Variant.ESMM2, TWO),
    (Variant.ESMC2, FOUR), (Variant.ESMS2, FOUR), (Variant.ESMC, FOUR),
])
def test_objective_matches_scalar_oracle(variant, batch):
    m = small_model(variant, seed=3)
    w = LossWeights(ctr=0.9, ctcvr=1.1, ctcar=0.7, kl=0.4, ctcar_global=0.6).effective(variant)
    assert objective(m, batch, w).total == pytest.approx(hand_objective(m, batch, w), abs=1e-12)


def test_zero_weights_give_zero():
    m = small_model(Variant.ESMC2)
    res = objective(m, FOUR, LossWeights(0.0, 0.0, 0.0, 0.0, 0.0))
    assert res.total == 0.0
    for g in res.grads.values():
        g = g.values if hasattr(g, "values") else g
        assert not np.any(g)


@pytest.mark.parametrize("variant", list(Variant))
def test_objective_permutation_invariant(variant):
    m = small_model(variant)
    perm = np.array([3, 1, 0, 2])
    w = LossWeights(kl=0.3, ctcar_global=0.5)
    assert objective(m, FOUR.take(perm), w).total == pytest.approx(objective(m, FOUR, w).total, abs=1e-14)


def test_siamese_gradient_is_sum_of_tasks():
    m = small_model(Variant.ESMS)
    only_cvr = objective(m, TWO, LossWeights(ctr=0, ctcvr=1, ctcar=0)).grads
    only_car = objective(m, TWO, LossWeights(ctr=0, ctcvr=0, ctcar=1)).grads
    both = objective(m, TWO, LossWeights(ctr=0, ctcvr=1, ctcar=1)).grads
    for k in both:
        if k.startswith("siamese"):
            np.testing.assert_allclose(both[k], only_cvr[k] + only_car[k], atol=1e-15)
