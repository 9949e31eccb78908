"""Synthetic multi-session clickstream with known conditionals.

Each user has ``n_sessions_per_user`` visits; every visit shows
``exposures_per_session`` distinct items. Per exposure the funnel is
click -> cart -> purchase. A purchase may be deferred (probability ``rho``)
to a later visit of the same user, where it shows up as a cart-page exposure
with a purchase but no click or cart in that visit. That cross-visit path is
what breaks the chain rule for ESMM2-style estimators.

Per-pair probabilities are ``sigmoid(b_k + scale * <u_k, v_k> / sqrt(d))``
for the stages ``k`` in (click, cart, buy); the intercepts ``b_k`` are solved
so that the population rates hit the configured base rates exactly.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import asdict, dataclass, fields, replace
from statistics import NormalDist

import numpy as np
from scipy.optimize import brentq

from .embedding import FeatureSchema, FieldSpec
from .errors import ConfigError
from .nn import sigmoid
from .samples import NO_ORIGIN, REC, SEARCH, SampleSet, write_samples

CLICK_SPARSITY = 0.06096
PURCHASE_SPARSITY = 0.01093
PURCHASE_GIVEN_CART = 0.8
# cart | click implied by the two sparsities and purchase | cart
CART_GIVEN_CLICK = PURCHASE_SPARSITY / (CLICK_SPARSITY * PURCHASE_GIVEN_CART)

EXPOSURE, CLICK, CART, PURCHASE = 0, 1, 2, 3
EVENT_TYPES = ("exposure", "click", "cart", "purchase")
STAGES = ("click", "cart", "buy")
N_BUCKETS = 8
# pairs used to solve the intercepts when the full user x item grid is larger
MAX_CALIBRATION_PAIRS = 4_000_000


@dataclass(frozen=True)
class SimulatorConfig:
    n_users: int = 1000
    n_items: int = 200
    n_sessions_per_user: int = 8
    exposures_per_session: int = 10
    base_click_prob: float = CLICK_SPARSITY
    cart_given_click_prob: float = CART_GIVEN_CLICK
    purchase_given_cart_prob: float = PURCHASE_GIVEN_CART
    deferred_purchase_rate: float = 0.0
    global_domain_cart_rate: float = 0.1
    affinity_dim: int = 8
    affinity_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_sessions_per_user", "exposures_per_session"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.exposures_per_session > self.n_items:
            raise ConfigError("exposures_per_session cannot exceed n_items (items are distinct per visit)")
        for name in ("base_click_prob", "cart_given_click_prob", "purchase_given_cart_prob",
                     "deferred_purchase_rate", "global_domain_cart_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.affinity_dim < 0 or self.affinity_scale < 0:
            raise ConfigError("affinity_dim and affinity_scale must be nonnegative")

    @property
    def n_exposures(self):
        return self.n_users * self.n_sessions_per_user * self.exposures_per_session

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulator keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "default": SimulatorConfig(),
    # 1e6 exposures at the published sparsities with half the purchases deferred
    "table1": SimulatorConfig(n_users=10_000, n_items=400, n_sessions_per_user=10,
                              exposures_per_session=10, deferred_purchase_rate=0.5),
    # the case-study dataset: 2e5 exposures, rho = 0.5
    "bad_case": SimulatorConfig(n_users=2000, n_items=500, n_sessions_per_user=10,
                                exposures_per_session=10, deferred_purchase_rate=0.5,
                                affinity_scale=1.5),
    "tiny": SimulatorConfig(n_users=60, n_items=30, n_sessions_per_user=4,
                            exposures_per_session=5, deferred_purchase_rate=0.5),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# ---------------------------------------------------------------------------
# world: latent vectors and intercepts
# ---------------------------------------------------------------------------

class World:
    """Latent user/item vectors per stage plus solved intercepts."""

    def __init__(self, config: SimulatorConfig):
        self.config = config
        d = config.affinity_dim
        rng = np.random.default_rng([config.seed, 0xE5])
        self.user_vecs = {k: rng.standard_normal((config.n_users, d)) for k in STAGES}
        self.item_vecs = {k: rng.standard_normal((config.n_items, d)) for k in STAGES}
        self.intercepts = self._solve_intercepts(rng)

    def scores(self, stage, users, items):
        d = self.config.affinity_dim
        if d == 0:
            return np.zeros(np.shape(users))
        u = self.user_vecs[stage][users]
        v = self.item_vecs[stage][items]
        return np.einsum("...d,...d->...", u, v) / math.sqrt(d)

    def _prob(self, stage, z):
        b = self.intercepts[stage]
        if self.config.affinity_dim == 0:
            return np.full(np.shape(z), {"click": self.config.base_click_prob,
                                         "cart": self.config.cart_given_click_prob,
                                         "buy": self.config.purchase_given_cart_prob}[stage])
        return sigmoid(b + self.config.affinity_scale * z)

    def probs(self, users, items):
        return tuple(self._prob(k, self.scores(k, users, items)) for k in STAGES)

    def _solve_intercepts(self, rng):
        c = self.config
        targets = (c.base_click_prob, c.cart_given_click_prob, c.purchase_given_cart_prob)
        if c.affinity_dim == 0:
            return dict(zip(STAGES, (float("nan"),) * 3))
        n_pairs = c.n_users * c.n_items
        if n_pairs <= MAX_CALIBRATION_PAIRS:
            users, items = np.divmod(np.arange(n_pairs), c.n_items)
        else:
            users = rng.integers(0, c.n_users, MAX_CALIBRATION_PAIRS)
            items = rng.integers(0, c.n_items, MAX_CALIBRATION_PAIRS)
        s = c.affinity_scale
        out = {}
        weight = np.ones(len(users))
        for stage, target in zip(STAGES, targets):
            z = s * self.scores(stage, users, items)
            total = weight.sum()
            if target <= 0.0 or target >= 1.0 or total == 0.0:
                # degenerate rates: saturate the intercept
                out[stage] = -50.0 if target <= 0.0 else 50.0
            else:
                f = lambda b: float(weight @ sigmoid(b + z)) / total - target
                out[stage] = brentq(f, -60.0, 60.0, xtol=1e-14, rtol=1e-14)
            weight = weight * sigmoid(out[stage] + z)
        return out


# behaviour-only fields; the world does not depend on them
_BEHAVIOUR = dict(n_sessions_per_user=1, exposures_per_session=1, deferred_purchase_rate=0.0,
                  global_domain_cart_rate=0.0)


@functools.lru_cache(maxsize=8)
def _world(key: SimulatorConfig) -> World:
    return World(key)


def world(config: SimulatorConfig) -> World:
    return _world(replace(config, **_BEHAVIOUR))


def ground_truth_probabilities(config: SimulatorConfig, user, item):
    """``(p_click, p_cart_given_click, p_buy_given_cart)`` for a pair (or arrays of pairs)."""
    users, items = np.asarray(user), np.asarray(item)
    if np.any((users < 0) | (users >= config.n_users)) or np.any((items < 0) | (items >= config.n_items)):
        raise ConfigError("user or item id outside the simulated population")
    p = world(config).probs(users, items)
    if np.ndim(user) == 0 and np.ndim(item) == 0:
        return tuple(float(x) for x in p)
    return p


# ---------------------------------------------------------------------------
# event log
# ---------------------------------------------------------------------------

@dataclass
class EventLog:
    """Columnar, time-ordered events; ``timestamp`` is a per-user clock."""

    user: np.ndarray
    item: np.ndarray
    session: np.ndarray
    domain: np.ndarray
    event_type: np.ndarray
    timestamp: np.ndarray
    config: SimulatorConfig
    seed: int

    def __len__(self):
        return len(self.user)

    def of_type(self, event):
        return np.flatnonzero(self.event_type == event)

    def counts(self):
        return {name: int((self.event_type == k).sum()) for k, name in enumerate(EVENT_TYPES)}

    def equals(self, other):
        cols = ("user", "item", "session", "domain", "event_type", "timestamp")
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in cols
        )

    def check_order(self):
        """Violations of the event-order rules (empty list when the log is valid)."""
        problems = []
        S, I = self.config.n_sessions_per_user, self.config.n_items
        key = (self.user * S + self.session) * I + self.item
        exposed = key[self.event_type == EXPOSURE]
        clicked = key[self.event_type == CLICK]
        for idx in self.of_type(CLICK)[~np.isin(clicked, exposed)]:
            problems.append(f"click without exposure at event {idx}")
        rec_carts = self.of_type(CART)[self.domain[self.event_type == CART] == REC]
        for idx in rec_carts[~np.isin(key[rec_carts], clicked)]:
            problems.append(f"rec cart without click at event {idx}")
        carts = {}
        for idx in self.of_type(CART):
            carts.setdefault((int(self.user[idx]), int(self.item[idx])), []).append(int(self.session[idx]))
        for idx in self.of_type(PURCHASE):
            prior = carts.get((int(self.user[idx]), int(self.item[idx])), [])
            if not any(s <= self.session[idx] for s in prior):
                problems.append(f"purchase without prior cart at event {idx}")
        order = np.lexsort((self.timestamp, self.user))
        if not np.array_equal(order, np.arange(len(self))):
            problems.append("events not ordered by (user, timestamp)")
        return problems


def _draw_items(rng, rows, n_items, k):
    """``rows x k`` item ids, distinct within each row."""
    items = rng.integers(0, n_items, size=(rows, k))
    while True:
        srt = np.sort(items, axis=1)
        dup = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
        if dup.size == 0:
            return items
        items[dup] = rng.integers(0, n_items, size=(dup.size, k))


def simulate(config: SimulatorConfig, seed=None) -> EventLog:
    """Run the funnel for every user and visit; ``seed`` drives behaviour
    (defaults to ``config.seed``), the world itself is fixed by ``config.seed``."""
    seed = config.seed if seed is None else seed
    c = config
    S, E = c.n_sessions_per_user, c.exposures_per_session
    rows = c.n_users * S
    rng = np.random.default_rng([seed, 0x51])
    items = _draw_items(rng, rows, c.n_items, E)
    users = np.repeat(np.arange(c.n_users), S)[:, None] * np.ones((1, E), dtype=np.int64)
    p_click, p_cart, p_buy = world(c).probs(users, items)
    u_click, u_cart, u_buy, u_dom, u_defer = rng.random((5, rows, E))
    click = u_click < p_click
    cart = click & (u_cart < p_cart)
    buy = cart & (u_buy < p_buy)
    search = cart & (u_dom < c.global_domain_cart_rate)
    defer = buy & (u_defer < c.deferred_purchase_rate)
    carry = np.zeros_like(click)

    # move deferred purchases, in (user, session, slot) order
    for r, e in zip(*np.nonzero(defer)):
        s = r % S
        if s == S - 1:
            continue
        v = items[r, e]
        base = r - s
        later = [
            base + t for t in range(s + 1, S)
            if v not in items[base + t] and np.any(~click[base + t] & ~carry[base + t])
        ]
        if not later:
            continue  # nowhere to go: the purchase stays in its own visit
        tgt = later[rng.integers(len(later))]
        free = np.flatnonzero(~click[tgt] & ~carry[tgt])
        slot = free[rng.integers(len(free))]
        items[tgt, slot] = v
        carry[tgt, slot] = True
        buy[r, e] = False

    purchase = buy | carry
    # events in (user, session, slot, stage) order
    stage_flags = np.stack([np.ones_like(click), click, cart, purchase], axis=-1)  # rows, E, 4
    r_idx, e_idx, t_idx = np.nonzero(stage_flags)
    sess = r_idx % S
    dom = np.where((t_idx == CART) & search[r_idx, e_idx], SEARCH, REC).astype(np.int8)
    return EventLog(
        user=(r_idx // S).astype(np.int64),
        item=items[r_idx, e_idx].astype(np.int64),
        session=sess.astype(np.int64),
        domain=dom,
        event_type=t_idx.astype(np.int8),
        timestamp=((sess * E + e_idx) * 4 + t_idx).astype(np.int64),
        config=c,
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# gap oracle
# ---------------------------------------------------------------------------

@dataclass
class GapReport:
    ground_truth_E_R: float
    chain_rule_E_R: float
    gap: float
    upper_bound: float
    monte_carlo_stderr: float
    n_samples: int
    widened: bool = False

    @property
    def within_bound(self):
        return self.gap <= self.upper_bound + 3 * self.monte_carlo_stderr

    def to_dict(self):
        d = asdict(self)
        d["within_bound"] = self.within_bound
        return d


def _binom_se(k, n, floor=False):
    p = k / n
    if floor:
        # rule of three: never report a zero-width interval on sparse counts
        p = max(p, 3.0 / n)
    return math.sqrt(p * (1 - p) / n)


def gap_report(log: EventLog, min_events=30) -> GapReport:
    """Empirical purchase rate per exposure against the within-visit chain rule."""
    n = int((log.event_type == EXPOSURE).sum())
    if n == 0:
        raise ConfigError("log has no exposures")
    S, I = log.config.n_sessions_per_user, log.config.n_items
    key = (log.user * S + log.session) * I + log.item
    cart_keys = key[log.event_type == CART]
    p_keys = key[log.event_type == PURCHASE]
    clicks = int((log.event_type == CLICK).sum())
    carts = int(cart_keys.size)
    purchases = int(p_keys.size)
    same = int(np.isin(p_keys, cart_keys).sum())

    gt = purchases / n
    if clicks == 0 or carts == 0:
        chain = 0.0
    else:
        chain = (clicks / n) * (carts / clicks) * (same / carts)
    widened = purchases < min_events
    if widened:
        warnings.warn(f"only {purchases} purchases in {n} exposures; stderr widened",
                      RuntimeWarning, stacklevel=2)
    se = math.hypot(_binom_se(purchases, n, widened), _binom_se(same, n, widened))
    # loose bound: drop every density (each <= 1), leaving E[R] * E[1/C]
    bound = purchases / clicks if clicks else 0.0
    return GapReport(gt, chain, gt - chain, bound, se, n, widened)


def gap_oracle(config: SimulatorConfig, n_samples=1_000_000, seed=None) -> GapReport:
    """Simulate about ``n_samples`` exposures (whole users) and measure the gap."""
    per_user = config.n_sessions_per_user * config.exposures_per_session
    n_users = max(1, math.ceil(n_samples / per_user))
    cfg = replace(config, n_users=n_users)
    return gap_report(simulate(cfg, seed))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def affinity_bucket(z):
    """Quantile bucket (1..N_BUCKETS) of a standard-normal score; 0 is the OOV bucket."""
    edges = [NormalDist().inv_cdf(q / N_BUCKETS) for q in range(1, N_BUCKETS)]
    return np.searchsorted(np.asarray(edges), z, side="right") + 1


def dataset_schema(config: SimulatorConfig, embed_dim=8) -> FeatureSchema:
    return FeatureSchema((
        FieldSpec("user", config.n_users + 1, embed_dim),
        FieldSpec("item", config.n_items + 1, embed_dim),
        FieldSpec("click_affinity", N_BUCKETS + 1, embed_dim),
        FieldSpec("cart_affinity", N_BUCKETS + 1, embed_dim),
        FieldSpec("buy_affinity", N_BUCKETS + 1, embed_dim),
        FieldSpec("in_cart", 3, embed_dim),
    ))


def _open_cart_flags(log, exp_rows):
    """1 where the exposed item sits in the user's cart from an earlier visit."""
    S = log.config.n_sessions_per_user + 1
    key = lambda idx: (log.user[idx] * log.config.n_items + log.item[idx]) * S + log.session[idx]
    cart_key = key(log.of_type(CART))
    buy_key = np.sort(key(log.of_type(PURCHASE)))
    # a cart opened at visit s stays open through the first purchase visit >= s
    j = np.searchsorted(buy_key, cart_key)
    nxt = buy_key[np.minimum(j, max(buy_key.size - 1, 0))] if buy_key.size else cart_key
    closed = (j < buy_key.size) & (nxt // S == cart_key // S)
    stop = np.where(closed, nxt + 1, cart_key // S * S + S - 1)
    keep = ~(closed & (nxt == cart_key))
    # +1 on the visit after the cart, -1 after it closes; every pair nets to zero
    marks = np.concatenate([cart_key[keep] + 1, stop[keep]])
    delta = np.concatenate([np.ones(keep.sum(), np.int64), -np.ones(keep.sum(), np.int64)])
    order = np.argsort(marks, kind="stable")
    marks, level = marks[order], np.cumsum(delta[order])
    pos = np.searchsorted(marks, key(exp_rows), side="right") - 1
    return np.where(pos >= 0, level[np.maximum(pos, 0)], 0) > 0


def to_samples(log: EventLog, embed_dim=8) -> SampleSet:
    """One raw sample per exposure; labels use only the events of that visit."""
    c = log.config
    S, I = c.n_sessions_per_user, c.n_items
    key = (log.user * S + log.session) * I + log.item
    exp_rows = log.of_type(EXPOSURE)
    exp_key = key[exp_rows]
    order = np.argsort(exp_key, kind="stable")
    n = len(exp_rows)

    def flag(event):
        idx = log.of_type(event)
        pos = order[np.searchsorted(exp_key, key[idx], sorter=order)]
        out = np.zeros(n, dtype=np.int8)
        out[pos] = 1
        return out, pos, idx

    clk, _, _ = flag(CLICK)
    crt, cpos, cidx = flag(CART)
    buy, _, _ = flag(PURCHASE)
    domain = np.full(n, REC, dtype=np.int8)
    domain[cpos] = log.domain[cidx]

    users, items = log.user[exp_rows], log.item[exp_rows]
    w = world(c)
    feats = [users + 1, items + 1]
    for stage in STAGES:
        feats.append(affinity_bucket(w.scores(stage, users, items)))
    feats.append(_open_cart_flags(log, exp_rows).astype(np.int64) + 1)
    return SampleSet(
        user=users, item=items, session=log.session[exp_rows], domain=domain,
        c=clk, a=crt, o=buy, feats=np.stack(feats, axis=1),
        cart_origin=np.full(n, NO_ORIGIN), schema=dataset_schema(c, embed_dim), calibrated=False,
    )


def export_dataset(log: EventLog, path, embed_dim=8) -> SampleSet:
    samples = to_samples(log, embed_dim)
    write_samples(samples, path)
    return samples


def rates(log: EventLog):
    """Empirical funnel rates with binomial standard errors."""
    cnt = log.counts()
    n = cnt["exposure"]
    out = {}
    for name, k, m in (("click_sparsity", cnt["click"], n),
                       ("purchase_sparsity", cnt["purchase"], n),
                       ("cart_given_click", cnt["cart"], cnt["click"]),
                       ("purchase_given_cart", cnt["purchase"], cnt["cart"])):
        p = k / m if m else float("nan")
        out[name] = (p, _binom_se(k, m) if m else float("nan"))
    return out
