"""AUC, per-task metric reports, the Good/Bad-case split and sweep drivers."""
from __future__ import annotations

import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .samples import NO_ORIGIN, SampleSet


class SingleClassError(InputError):
    """AUC is undefined without at least one positive and one negative."""


def auc(scores, labels, strict=False):
    """Pairwise ranking AUC in O(n log n).

    Equal to the mean over (positive, negative) pairs of ``I(s_p > s_n)``,
    with ties worth 0.5 (or 0 when ``strict``).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InputError(f"{scores.size} scores but {labels.size} labels")
    if np.any(np.isnan(scores)):
        raise InputError("scores contain NaN")
    pos = labels == 1
    if np.any((labels != 0) & ~pos):
        raise InputError("labels must be 0 or 1")
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    uniq, inv = np.unique(scores, return_inverse=True)
    pos_g = np.bincount(inv, weights=pos, minlength=uniq.size).astype(np.int64)
    neg_g = np.bincount(inv, minlength=uniq.size) - pos_g
    below = np.cumsum(neg_g) - neg_g
    # integer numerator (doubled so tie halves stay exact)
    num = int(2 * (pos_g * below).sum())
    if not strict:
        num += int((pos_g * neg_g).sum())
    return num / (2 * n_pos * n_neg)


def _maybe_auc(scores, labels, strict):
    try:
        return auc(scores, labels, strict)
    except SingleClassError:
        return None


@dataclass
class SubsetMetrics:
    n: int
    n_pos: int
    cvr_auc: float | None = None
    ctr_auc: float | None = None
    ctcvr_auc: float | None = None


@dataclass
class MetricsReport:
    """AUCs over the whole test set plus optional Good/Bad-case subsets.

    A metric is ``None`` when its subset has a single class (or is empty).
    """

    ctr_auc: float | None
    ctcvr_auc: float | None
    cvr_auc: float | None
    subsets: dict = field(default_factory=dict)
    n_samples: int = 0
    variant: str = ""
    notes: str = ""

    def subset_auc(self, name):
        s = self.subsets.get(name)
        return None if s is None else s.cvr_auc

    def to_dict(self):
        d = asdict(self)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["subsets"] = {k: SubsetMetrics(**v) for k, v in d.get("subsets", {}).items()}
        return cls(**d)

    def table(self):
        fmt = lambda x: "n/a" if x is None else f"{x:.4f}"
        lines = [f"{'subset':<10} {'n':>8} {'pos':>6} {'CTR-AUC':>8} {'CTCVR-AUC':>9} {'CVR-AUC':>8}",
                 f"{'all':<10} {self.n_samples:>8} {'':>6} {fmt(self.ctr_auc):>8} "
                 f"{fmt(self.ctcvr_auc):>9} {fmt(self.cvr_auc):>8}"]
        for name, s in self.subsets.items():
            lines.append(f"{name:<10} {s.n:>8} {s.n_pos:>6} {fmt(s.ctr_auc):>8} "
                         f"{fmt(s.ctcvr_auc):>9} {fmt(s.cvr_auc):>8}")
        if self.notes:
            lines.append(self.notes)
        return "\n".join(lines)


def _scores(model, samples):
    if len(samples) == 0:
        raise InputError("no test samples")
    return model.predict(samples.feats)


def evaluate(model, samples: SampleSet, strict=False, bundle=None) -> MetricsReport:
    """CTR-AUC and CTCVR-AUC over all exposures, CVR-AUC over clicked ones."""
    b = bundle if bundle is not None else _scores(model, samples)
    clicked = samples.c == 1
    cvr = None
    if clicked.any():
        cvr = _maybe_auc(b.post_click_cvr[clicked], samples.o[clicked], strict)
    return MetricsReport(
        ctr_auc=_maybe_auc(b.ctr, samples.c, strict),
        ctcvr_auc=_maybe_auc(b.ctcvr, samples.c * samples.o, strict),
        cvr_auc=cvr,
        n_samples=len(samples),
        variant=model.config.variant.value,
    )


def case_groups(samples: SampleSet):
    """Row indices of Good-case and Bad-case conversions and their negative pools.

    Bad case: the cart label came from another visit (``cart_origin`` set,
    implicit carts included). Negatives are clicked, non-converting samples
    from the same (user, session) visits as the group's conversions.
    """
    conv = np.flatnonzero(samples.o == 1)
    bad = conv[samples.cart_origin[conv] != NO_ORIGIN]
    good = conv[samples.cart_origin[conv] == NO_ORIGIN]
    span = int(samples.session.max()) + 1 if len(samples) else 1
    visit = samples.user * span + samples.session
    neg_all = np.flatnonzero((samples.c == 1) & (samples.o == 0))
    out = {}
    for name, pos in (("good_case", good), ("bad_case", bad)):
        neg = neg_all[np.isin(visit[neg_all], visit[pos])]
        out[name] = (pos, neg)
    return out


CASE_SPLIT_NOTE = ("case split: negatives are clicked non-converting samples "
                   "from the same visits as each group's conversions")


def case_split_eval(model, samples: SampleSet, strict=False, bundle=None) -> MetricsReport:
    b = bundle if bundle is not None else _scores(model, samples)
    report = evaluate(model, samples, strict, bundle=b)
    score = b.post_click_cvr
    for name, (pos, neg) in case_groups(samples).items():
        idx = np.concatenate([pos, neg])
        lab = np.concatenate([np.ones(pos.size, np.int8), np.zeros(neg.size, np.int8)])
        val = _maybe_auc(score[idx], lab, strict) if idx.size else None
        report.subsets[name] = SubsetMetrics(n=int(idx.size), n_pos=int(pos.size), cvr_auc=val)
    report.notes = CASE_SPLIT_NOTE
    return report


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("variant", "parameter", "value", "seed", "ctr_auc", "ctcvr_auc", "cvr_auc",
                 "good_case_cvr_auc", "bad_case_cvr_auc", "tower_distance", "error")


def _run_point(args):
    from .models import tower_distance
    from .training import apply_override, train

    base, parameter, value, seed, train_samples, test_samples = args
    row = {"variant": base.model.variant.value, "parameter": parameter, "value": value,
           "seed": seed}
    try:
        cfg = apply_override(base, parameter, value, seed=seed)
        res = train(cfg, train_samples)
        rep = case_split_eval(res.model, test_samples)
        row.update(ctr_auc=rep.ctr_auc, ctcvr_auc=rep.ctcvr_auc, cvr_auc=rep.cvr_auc,
                   good_case_cvr_auc=rep.subset_auc("good_case"),
                   bad_case_cvr_auc=rep.subset_auc("bad_case"))
        row["tower_distance"] = tower_distance(res.model) if cfg.model.variant.twin else None
        row["error"] = None
    except Exception as exc:  # recorded, the sweep goes on
        for k in SWEEP_COLUMNS[4:]:
            row.setdefault(k, None)
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc(limit=3)
    return row


def sweep(base, grid, seeds, train_samples, test_samples, workers=1, on_row=None):
    """Train and evaluate every ``(parameter, value, seed)``; long-format rows.

    ``grid`` maps a parameter name (e.g. ``"kl"``, ``"weights.ctcar_global"``,
    ``"lr"``) to its values. Rows come back in grid order whatever ``workers``
    is. ``on_row`` is called with each row as soon as it is in order.
    """
    if not grid or not all(len(v) for v in grid.values()):
        raise ConfigError("sweep grid must be nonempty")
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    jobs = [(base, p, v, s, train_samples, test_samples)
            for p, values in grid.items() for v in values for s in seeds]
    rows = []
    if workers <= 1:
        for job in jobs:
            rows.append(_run_point(job))
            if on_row:
                on_row(rows[-1])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_point, jobs):
                rows.append(row)
                if on_row:
                    on_row(row)
    return rows


def sweep_table(rows):
    """Fixed-width text rendering of sweep rows."""
    fmt = lambda x: "n/a" if x is None else (f"{x:.4f}" if isinstance(x, float) else str(x))
    cols = SWEEP_COLUMNS[:-1]
    out = ["\t".join(cols)]
    for r in rows:
        out.append("\t".join(fmt(r.get(c)) for c in cols) + (f"\tERROR {r['error']}" if r.get("error") else ""))
    return "\n".join(out)


def summarize(rows, metric):
    """Mean of ``metric`` per (parameter, value) over seeds, skipping failed runs."""
    acc = {}
    for r in rows:
        if r.get(metric) is None:
            continue
        acc.setdefault((r["parameter"], r["value"]), []).append(r[metric])
    return {k: float(np.mean(v)) for k, v in acc.items()}
