"""Interaction samples: the columnar container, Sample Calibration, label
hierarchy checks, the line-delimited file format and time-based splitting.

File layout (one sample per line, whitespace separated)::

    # {"format": "esmc-samples", "version": 1, "schema_hash": ..., ...}
    user item session domain c a o feat_0 ... feat_k cart_origin

``domain`` is ``rec`` or ``search``; ``cart_origin`` is the session the cart
label was moved from by calibration, ``-1`` when none and ``-2`` for an
implicit cart inserted for a purchase with no cart anywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embedding import FeatureSchema
from .errors import InputError

FORMAT_NAME = "esmc-samples"
FORMAT_VERSION = 1
DOMAINS = ("rec", "search")
REC, SEARCH = 0, 1
NO_ORIGIN = -1
IMPLICIT_ORIGIN = -2


@dataclass
class InteractionSample:
    user_id: int
    item_id: int
    session_id: int
    feature_ids: list
    domain: str = "rec"
    c: int = 0
    a: int = 0
    o: int = 0
    calibrated: bool = False
    cart_origin_session: int | None = None


@dataclass
class SampleSet:
    """Column-oriented collection of exposures; row ``i`` is one sample."""

    user: np.ndarray
    item: np.ndarray
    session: np.ndarray
    domain: np.ndarray
    c: np.ndarray
    a: np.ndarray
    o: np.ndarray
    feats: np.ndarray
    cart_origin: np.ndarray = None
    schema: FeatureSchema | None = None
    calibrated: bool = False

    def __post_init__(self):
        n = len(self.user)
        for name in ("user", "item", "session", "cart_origin"):
            if name == "cart_origin" and self.cart_origin is None:
                self.cart_origin = np.full(n, NO_ORIGIN, dtype=np.int64)
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("domain", "c", "a", "o"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int8))
        feats = np.asarray(self.feats, dtype=np.int64)
        self.feats = feats if feats.ndim == 2 else feats.reshape(n, -1 if n else 0)
        for name in ("item", "session", "domain", "c", "a", "o", "cart_origin"):
            if len(getattr(self, name)) != n:
                raise InputError(f"column {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.user)

    def take(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            user=self.user[idx], item=self.item[idx], session=self.session[idx],
            domain=self.domain[idx], c=self.c[idx], a=self.a[idx], o=self.o[idx],
            feats=self.feats[idx], cart_origin=self.cart_origin[idx],
        )

    def copy(self):
        return self.take(np.arange(len(self)))

    def equals(self, other):
        cols = ("user", "item", "session", "domain", "c", "a", "o", "feats", "cart_origin")
        return (
            len(self) == len(other)
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in cols)
            and self.calibrated == other.calibrated
        )

    @property
    def cart_rec(self):
        """Cart labels visible to the recommendation domain."""
        return self.a * (self.domain == REC)

    def keys(self):
        return np.stack([self.user, self.item, self.session], axis=1)

    def records(self):
        for i in range(len(self)):
            origin = int(self.cart_origin[i])
            yield InteractionSample(
                int(self.user[i]), int(self.item[i]), int(self.session[i]),
                self.feats[i].tolist(), DOMAINS[self.domain[i]],
                int(self.c[i]), int(self.a[i]), int(self.o[i]), self.calibrated,
                None if origin == NO_ORIGIN else origin,
            )

    @classmethod
    def from_records(cls, records, schema=None):
        records = list(records)
        if not records:
            raise InputError("no samples")
        return cls(
            user=[r.user_id for r in records], item=[r.item_id for r in records],
            session=[r.session_id for r in records],
            domain=[DOMAINS.index(r.domain) for r in records],
            c=[r.c for r in records], a=[r.a for r in records], o=[r.o for r in records],
            feats=[r.feature_ids for r in records],
            cart_origin=[NO_ORIGIN if r.cart_origin_session is None else r.cart_origin_session
                         for r in records],
            schema=schema, calibrated=all(r.calibrated for r in records),
        )


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationStats:
    moved: int = 0
    implicit: int = 0
    moves: list = field(default_factory=list)


def _check_unique(samples):
    keys = samples.keys()
    if len(keys) == 0:
        return
    order = np.lexsort(keys.T[::-1])
    k = keys[order]
    dup = np.flatnonzero((k[1:] == k[:-1]).all(axis=1))
    if dup.size:
        u, v, s = k[dup[0]]
        raise InputError(f"duplicate sample for user {u}, item {v}, session {s}")


def _pair_key(samples):
    span = int(samples.item.max()) + 1 if len(samples) else 1
    return samples.user * span + samples.item


def build_event_index(samples: SampleSet):
    """Map ``(user, item)`` of every purchase sample to its rows ordered by session."""
    pair = _pair_key(samples)
    buyers = np.unique(pair[samples.o == 1])
    rows = np.flatnonzero(np.isin(pair, buyers))
    rows = rows[np.lexsort((samples.session[rows], pair[rows]))]
    index = {}
    for r in rows:
        key = (int(samples.user[r]), int(samples.item[r]))
        index.setdefault(key, []).append(int(r))
    return index


def calibrate(samples: SampleSet, event_index=None):
    """Move each out-of-session cart label onto the purchase it led to.

    A purchase sample with ``o = 1, a = 0`` takes the latest earlier-session
    cart of the same (user, item) that did not convert in its own session:
    the purchase sample becomes ``c = a = 1`` with ``cart_origin`` set and the
    origin sample's cart label is cleared. A purchase with no such cart gets
    an implicit cart. Returns ``(calibrated_samples, stats)``.
    """
    _check_unique(samples)
    out = samples.copy()
    out.calibrated = True
    stats = CalibrationStats()
    if not np.any((out.o == 1) & (out.a == 0)):
        return out, stats
    index = event_index if event_index is not None else build_event_index(samples)
    for rows in index.values():
        if not any(out.o[r] == 1 and out.a[r] == 0 for r in rows):
            continue
        open_carts = []
        for r in rows:
            if out.o[r] == 1 and out.a[r] == 0:
                src = None
                while open_carts:
                    cand = open_carts.pop()
                    if out.session[cand] < out.session[r]:
                        src = cand
                        break
                out.c[r] = 1
                out.a[r] = 1
                if src is None:
                    out.cart_origin[r] = IMPLICIT_ORIGIN
                    stats.implicit += 1
                else:
                    out.a[src] = 0
                    out.domain[r] = out.domain[src]
                    out.domain[src] = REC
                    out.cart_origin[r] = out.session[src]
                    stats.moved += 1
                    stats.moves.append((int(src), int(r)))
            elif out.a[r] == 1 and out.o[r] == 0:
                open_carts.append(r)
    return out, stats


@dataclass
class HierarchyReport:
    mode: str
    violations: list

    @property
    def ok(self):
        return not self.violations


def validate_hierarchy(samples: SampleSet, mode="calibrated"):
    """List rows violating ``a <= c`` (raw, rec domain) or ``o <= a <= c`` (calibrated)."""
    if mode == "raw":
        bad = (samples.a > samples.c) & (samples.domain == REC)
    elif mode == "calibrated":
        bad = (samples.o > samples.a) | (samples.a > samples.c)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return HierarchyReport(mode, np.flatnonzero(bad).tolist())


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def write_samples(samples: SampleSet, path):
    path = Path(path)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "schema_hash": samples.schema.hash() if samples.schema else None,
        "schema": samples.schema.to_dict() if samples.schema else None,
        "calibrated": bool(samples.calibrated),
        "columns": ["user", "item", "session", "domain", "c", "a", "o"]
                   + [f"feat_{j}" for j in range(samples.feats.shape[1])] + ["cart_origin"],
    }
    ints = np.column_stack([samples.user, samples.item, samples.session]).tolist()
    labels = np.column_stack([samples.c, samples.a, samples.o]).tolist()
    feats = samples.feats.tolist()
    origin = samples.cart_origin.tolist()
    dom = samples.domain.tolist()
    lines = [
        "%d %d %d %s %d %d %d %s %d" % (
            *ints[i], DOMAINS[dom[i]], *labels[i], " ".join(map(str, feats[i])), origin[i]
        )
        for i in range(len(samples))
    ]
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def read_samples(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise InputError("missing header", line=1)
        try:
            header = json.loads(first[2:])
        except json.JSONDecodeError as exc:
            raise InputError(f"bad header: {exc}", line=1) from None
        if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
            raise InputError("unsupported sample file format", line=1)
        schema = FeatureSchema.from_dict(header["schema"]) if header.get("schema") else None
        n_cols = len(header["columns"])
        rows, doms = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if len(parts) != n_cols:
                raise InputError(f"expected {n_cols} fields, got {len(parts)}", line=lineno)
            try:
                doms.append(DOMAINS.index(parts[3]))
                rows.append([int(x) for x in parts[:3] + parts[4:]])
            except ValueError:
                raise InputError(f"malformed field in {line.strip()!r}", line=lineno) from None
    if schema is not None and header.get("schema_hash") != schema.hash():
        raise InputError("schema hash does not match embedded schema", line=1)
    arr = np.array(rows, dtype=np.int64).reshape(len(rows), n_cols - 1)
    labels = arr[:, 3:6]
    if np.any((labels != 0) & (labels != 1)):
        bad = int(np.flatnonzero(((labels != 0) & (labels != 1)).any(axis=1))[0])
        raise InputError("labels must be 0 or 1", line=bad + 2)
    return SampleSet(
        user=arr[:, 0], item=arr[:, 1], session=arr[:, 2], domain=np.array(doms, dtype=np.int8),
        c=labels[:, 0], a=labels[:, 1], o=labels[:, 2], feats=arr[:, 6:-1],
        cart_origin=arr[:, -1], schema=schema, calibrated=bool(header["calibrated"]),
    )


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: SampleSet
    test: SampleSet
    boundary: int


def split_by_session(samples: SampleSet, boundary, calibrate_parts=False):
    """Sessions ``< boundary`` train, ``>= boundary`` test.

    With ``calibrate_parts`` each partition is calibrated on its own, so no
    cart label crosses the boundary.
    """
    train_mask = samples.session < boundary
    if not train_mask.any():
        raise InputError(f"boundary {boundary} leaves the train partition empty")
    if train_mask.all():
        raise InputError(f"boundary {boundary} leaves the test partition empty")
    train = samples.take(np.flatnonzero(train_mask))
    test = samples.take(np.flatnonzero(~train_mask))
    if calibrate_parts:
        train, _ = calibrate(train)
        test, _ = calibrate(test)
    return DatasetSplit(train, test, boundary)
