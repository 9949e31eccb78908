"""Shared embedding tables over categorical feature fields."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SchemaError
from .nn import SparseRows, adagrad_step

OOV_BUCKET = 0


class OovPolicy(str, enum.Enum):
    RESERVED_BUCKET = "reserved_bucket"
    REJECT = "reject"


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab_size: int
    embed_dim: int = 8


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple
    oov_policy: OovPolicy = OovPolicy.RESERVED_BUCKET

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "oov_policy", OovPolicy(self.oov_policy))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        for f in self.fields:
            if f.vocab_size < 1 or f.embed_dim < 1:
                raise SchemaError(f"field {f.name}: vocab_size and embed_dim must be >= 1")

    @property
    def names(self):
        return [f.name for f in self.fields]

    @property
    def total_dim(self):
        return sum(f.embed_dim for f in self.fields)

    def to_dict(self):
        return {
            "fields": [[f.name, f.vocab_size, f.embed_dim] for f in self.fields],
            "oov_policy": self.oov_policy.value,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(FieldSpec(*f) for f in d["fields"]), d.get("oov_policy", "reserved_bucket"))

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class EmbeddingTables:
    """One ``[vocab_size, embed_dim]`` matrix per field, read by every tower."""

    def __init__(self, schema: FeatureSchema, tables=None, rng=None, scale=0.05):
        self.schema = schema
        if tables is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            tables = {
                f.name: rng.uniform(-scale, scale, size=(f.vocab_size, f.embed_dim))
                for f in schema.fields
            }
        self.tables = tables
        for f in schema.fields:
            if self.tables[f.name].shape != (f.vocab_size, f.embed_dim):
                raise SchemaError(f"table {f.name} has shape {self.tables[f.name].shape}")

    def named_parameters(self):
        return {f"embedding.{name}": t for name, t in self.tables.items()}

    def resolve_ids(self, ids):
        """Validate a ``[batch, n_fields]`` id matrix and map OOV ids per policy."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != len(self.schema.fields):
            raise SchemaError(
                f"expected ids of shape [batch, {len(self.schema.fields)}], got {ids.shape}"
            )
        out = ids
        for j, f in enumerate(self.schema.fields):
            col = ids[:, j]
            bad = (col < 0) | (col >= f.vocab_size)
            if bad.any():
                if self.schema.oov_policy is OovPolicy.REJECT:
                    i = int(np.flatnonzero(bad)[0])
                    raise InputError(f"id {col[i]} out of range for field {f.name} (row {i})")
                if out is ids:
                    out = ids.copy()
                out[bad, j] = OOV_BUCKET
        return out

    def lookup(self, ids):
        """Concatenate ``W_field[id]`` over fields in schema order: ``[batch, total_dim]``."""
        ids = self.resolve_ids(ids)
        return np.concatenate(
            [self.tables[f.name][ids[:, j]] for j, f in enumerate(self.schema.fields)], axis=1
        )

    def embed(self, sample_fields):
        """Single-sample lookup from ``(field, id)`` pairs."""
        given = dict()
        for name, idx in sample_fields:
            if name not in self.tables:
                raise SchemaError(f"unknown field {name!r}")
            if name in given:
                raise SchemaError(f"field {name!r} given twice")
            given[name] = idx
        missing = [n for n in self.schema.names if n not in given]
        if missing:
            raise SchemaError(f"missing fields {missing}")
        ids = np.array([[given[n] for n in self.schema.names]])
        return self.lookup(ids)[0]

    def grads(self, upstream, ids):
        """Split a ``[batch, total_dim]`` input gradient into row-sparse table gradients."""
        ids = self.resolve_ids(ids)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (ids.shape[0], self.schema.total_dim):
            raise SchemaError(f"upstream gradient shape {upstream.shape} does not match ids")
        out, pos = {}, 0
        for j, f in enumerate(self.schema.fields):
            out[f"embedding.{f.name}"] = SparseRows(
                ids[:, j].copy(), upstream[:, pos:pos + f.embed_dim], f.vocab_size
            )
            pos += f.embed_dim
        return out


def scatter_grad(upstream, ids, tables: EmbeddingTables, state, schedule):
    """Apply an Adagrad step to the rows referenced by ``ids`` only."""
    grads = tables.grads(upstream, ids)
    adagrad_step(tables.named_parameters(), grads, state, schedule)
    return tables

