"""Exposure-space cross-entropy losses, the parameter-space KL constraint
between twin towers, and the weighted objective of every model variant."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, HierarchyError, InputError
from .models import PROB_EPS, Model, Variant
from .nn import MLP, as_float
from .samples import SEARCH, SampleSet

KL_GRID = (0.01, 0.05, 0.1, 0.5, 1.0)
GLOBAL_WEIGHT_GRID = (0.1, 0.3, 0.5, 0.7, 1.0)


@dataclass
class LossWeights:
    """Objective weights.

    ``kl`` is the parameter-constraint coefficient (omega_4 for ESMC, omega_5
    for ESMC2) and ``ctcar_global`` the global-domain cart weight (omega_4 for
    the ESMG forms).
    """

    ctr: float = 1.0
    ctcvr: float = 1.0
    ctcar: float = 1.0
    kl: float = 0.05
    ctcar_global: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {k} must be a nonnegative number, got {v}")

    def effective(self, variant):
        """Zero the terms a variant does not have (e.g. no KL for the Siamese forms)."""
        variant = Variant(variant)
        kl = self.kl if variant.twin else 0.0
        glob = self.ctcar_global if variant.global_domain else 0.0
        ctcar = self.ctcar if variant.has_cart_head else 0.0
        return replace(self, kl=kl, ctcar_global=glob, ctcar=ctcar)

    def omegas(self, variant):
        """The weights in the order the objective of ``variant`` lists them."""
        w = self.effective(variant)
        if Variant(variant).global_domain:
            return (w.ctr, w.ctcvr, w.ctcar, w.ctcar_global, w.kl)
        return (w.ctr, w.ctcvr, w.ctcar, w.kl)


def cross_entropy(y, p, eps=PROB_EPS):
    """Elementwise ``-y ln p - (1 - y) ln(1 - p)`` with ``p`` clipped to ``[eps, 1 - eps]``."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(as_float(p), eps, 1 - eps)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def _mean_ce(y, p, mask=None, eps=PROB_EPS):
    """Mean CE over ``mask`` and its gradient w.r.t. ``p`` (zero where clipped)."""
    y = np.asarray(y, dtype=np.float64)
    n = len(p) if mask is None else int(mask.sum())
    grad = np.zeros(len(p))
    if n == 0:
        return 0.0, grad
    sel = slice(None) if mask is None else mask
    ps, ys = p[sel], y[sel]
    value = cross_entropy(ys, ps, eps).sum() / n
    inside = (ps >= eps) & (ps <= 1 - eps)
    pc = np.clip(ps, eps, 1 - eps)
    grad[sel] = np.where(inside, (-ys / pc + (1 - ys) / (1 - pc)) / n, 0.0)
    return value, grad


def check_hierarchy(samples: SampleSet):
    bad = np.flatnonzero((samples.o > samples.a) | (samples.a > samples.c))
    if bad.size:
        i = int(bad[0])
        raise HierarchyError(
            f"sample {i} (user {samples.user[i]}, item {samples.item[i]}, session "
            f"{samples.session[i]}) violates o <= a <= c: c={samples.c[i]} a={samples.a[i]} o={samples.o[i]}"
        )


@dataclass
class TaskLosses:
    ctr: float
    ctcar: float | None
    ctcvr: float


def task_losses(bundle, samples: SampleSet, hierarchy=True):
    """Mean CE of CTR, CTCAR and CTCVR over the whole exposure batch.

    Cart labels come from the recommendation domain only (``c * a`` with
    search-attributed carts hidden).
    """
    if len(samples) == 0:
        raise InputError("empty batch")
    if hierarchy:
        check_hierarchy(samples)
    l_ctr = float(cross_entropy(samples.c, bundle.ctr).mean())
    l_ctcvr = float(cross_entropy(samples.c * samples.o, bundle.ctcvr).mean())
    l_ctcar = None
    if bundle.ctcar is not None:
        l_ctcar = float(cross_entropy(samples.c * samples.cart_rec, bundle.ctcar).mean())
    return TaskLosses(l_ctr, l_ctcar, l_ctcvr)


# ---------------------------------------------------------------------------
# parameter constraint
# ---------------------------------------------------------------------------

def _log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def _flat(tower):
    return tower.flat_parameters() if isinstance(tower, MLP) else as_float(tower)


def parameter_kl(tower_a, tower_b):
    """``KL(softmax(theta_a) || softmax(theta_b))`` over flattened parameters."""
    return parameter_kl_grads(tower_a, tower_b)[0]


def parameter_kl_grads(tower_a, tower_b, symmetric=False):
    """KL value, gradient w.r.t. flat ``theta_a`` (``None`` unless symmetric) and ``theta_b``."""
    if isinstance(tower_a, MLP) and isinstance(tower_b, MLP) and tower_a.shapes() != tower_b.shapes():
        raise ConfigError(f"twin towers differ in shape: {tower_a.shapes()} vs {tower_b.shapes()}")
    a, b = _flat(tower_a), _flat(tower_b)
    if a.shape != b.shape:
        raise ConfigError(f"parameter vectors differ in shape: {a.shape} vs {b.shape}")
    la, lb = _log_softmax(a), _log_softmax(b)
    pa, pb = np.exp(la), np.exp(lb)
    value = np.sum(pa * (la - lb))
    grad_b = pb - pa
    grad_a = pa * (la - lb) - pa * value if symmetric else None
    return max(value, 0.0), grad_a, grad_b


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveResult:
    total: float
    components: dict
    weights: dict
    grads: dict = field(repr=False)
    bundle: object = field(default=None, repr=False)


def objective(model: Model, batch: SampleSet, weights: LossWeights, hierarchy=True,
              kl_enabled=True, kl_symmetric=False, kl_teacher=None) -> ObjectiveResult:
    """Value and gradients of the variant's training objective on ``batch``.

    The KL term treats the CTCAR tower as a fixed teacher unless
    ``kl_symmetric``; ``kl_teacher`` substitutes a frozen flat parameter vector
    for the teacher (used to finite-difference the stop-gradient form).
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    variant = model.config.variant
    w = weights.effective(variant)
    if hierarchy:
        check_hierarchy(batch)
    bundle = model.forward(batch.feats)
    n = len(batch)
    c = batch.c.astype(np.float64)
    o = batch.o.astype(np.float64)
    d = {h: np.zeros(n) for h in model.heads}
    comps, applied = {}, {}

    def add(name, weight, value, grad_wrt):
        comps[name] = value
        applied[name] = weight
        if weight:
            for head, g in grad_wrt.items():
                d[head] += weight * g

    l, g = _mean_ce(c, bundle.ctr)
    add("ctr", w.ctr, l, {"ctr": g})

    if variant.baseline:
        clicked = batch.c == 1
        l, g = _mean_ce(o, bundle.cvr, clicked)
        add("cvr", w.ctcvr, l, {"cvr": g})
    else:
        l, g = _mean_ce(c * o, bundle.ctcvr)
        if bundle.chained:
            add("ctcvr", w.ctcvr, l, {"ctr": g * bundle.car * bundle.cvr,
                                      "car": g * bundle.ctr * bundle.cvr,
                                      "cvr": g * bundle.ctr * bundle.car})
        else:
            add("ctcvr", w.ctcvr, l, {"ctr": g * bundle.cvr, "cvr": g * bundle.ctr})

    if bundle.ctcar is not None:
        via = lambda g: {"ctr": g * bundle.car, "car": g * bundle.ctr}
        l, g = _mean_ce(c * batch.cart_rec, bundle.ctcar)
        add("ctcar", w.ctcar, l, via(g))
        if variant.global_domain:
            l, g = _mean_ce(c * batch.a, bundle.ctcar, batch.domain == SEARCH)
            add("ctcar_global", w.ctcar_global, l, via(g))

    grads = model.backward(d)

    if variant.twin:
        comps["kl"] = 0.0
        applied["kl"] = w.kl if kl_enabled else 0.0
        if kl_enabled:
            # the value is logged even at zero weight; gradients only when weighted
            tower_a, tower_b = model.twin_towers()
            teacher = tower_a if kl_teacher is None else kl_teacher
            value, ga, gb = parameter_kl_grads(teacher, tower_b, kl_symmetric and kl_teacher is None)
            comps["kl"] = value
        if kl_enabled and w.kl:
            for i, (dw, db) in enumerate(tower_b.unflatten(gb)):
                grads[f"cvr.{i}.weight"] = grads[f"cvr.{i}.weight"] + w.kl * dw
                grads[f"cvr.{i}.bias"] = grads[f"cvr.{i}.bias"] + w.kl * db
            if ga is not None:
                for i, (dw, db) in enumerate(tower_a.unflatten(ga)):
                    grads[f"car.{i}.weight"] = grads[f"car.{i}.weight"] + w.kl * dw
                    grads[f"car.{i}.bias"] = grads[f"car.{i}.bias"] + w.kl * db

    total = sum(applied[k] * comps[k] for k in comps)
    return ObjectiveResult(total, comps, applied, grads, bundle)


def _require(model, allowed, name):
    if model.config.variant not in allowed:
        raise ConfigError(f"{name} needs variant in {[v.value for v in allowed]}, "
                          f"got {model.config.variant.value}")


def esmc_objective(model, batch, weights, **kw):
    """omega1 L_CTR + omega2 L_CTCVR + omega3 L_CTCAR + omega4 KL(theta_CTCAR || theta_CTCVR)."""
    _require(model, (Variant.ESMC,), "esmc_objective")
    return objective(model, batch, weights, **kw)


def esms_objective(model, batch, weights, **kw):
    _require(model, (Variant.ESMS,), "esms_objective")
    return objective(model, batch, weights, **kw)


def esmg_objective(model, batch, weights, **kw):
    """Adds the global-domain cart loss; its KL weight is omega5 (always 0 for ESMS2)."""
    _require(model, (Variant.ESMC2, Variant.ESMS2), "esmg_objective")
    if batch.domain is None:
        raise InputError("global-domain objective needs domain tags")
    return objective(model, batch, weights, **kw)
