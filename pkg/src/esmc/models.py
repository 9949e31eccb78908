"""Model zoo: the entire-space family (ESMM, ESMM2, ESMC, ESMS and the
global-domain ESMC2 / ESMS2) plus the Shared Bottom and MMoE baselines.

Every model maps a ``[batch, n_fields]`` id matrix to a
:class:`PredictionBundle` and back-propagates gradients given w.r.t. its
conditional outputs (``ctr``, ``car``, ``cvr``).
"""
from __future__ import annotations

import copy
import enum
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embedding import EmbeddingTables, FeatureSchema
from .errors import ChecksumError, ConfigError, SchemaError, UsageError
from .nn import DEFAULT_LEAKY_SLOPE, MLP, Activation, as_float

CHECKPOINT_FORMAT = "esmc-checkpoint"
CHECKPOINT_VERSION = 1
PROB_EPS = 1e-7


class Variant(str, enum.Enum):
    SHARED_BOTTOM = "shared_bottom"
    ESMM = "esmm"
    MMOE = "mmoe"
    ESMM2 = "esmm2"
    ESMC = "esmc"
    ESMS = "esms"
    ESMC2 = "esmc2"
    ESMS2 = "esms2"

    @property
    def twin(self):
        return self in (Variant.ESMC, Variant.ESMC2)

    @property
    def siamese(self):
        return self in (Variant.ESMS, Variant.ESMS2)

    @property
    def global_domain(self):
        return self in (Variant.ESMC2, Variant.ESMS2)

    @property
    def baseline(self):
        return self in (Variant.SHARED_BOTTOM, Variant.MMOE)

    @property
    def has_cart_head(self):
        return self not in (Variant.SHARED_BOTTOM, Variant.MMOE, Variant.ESMM)


@dataclass
class ModelConfig:
    variant: Variant = Variant.ESMC
    tower_hidden: tuple = (64, 32)
    bottom_hidden: tuple = (64,)
    head_hidden: tuple = (32,)
    n_experts: int = 2
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    twin_init: str = "independent"
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.tower_hidden = tuple(int(h) for h in self.tower_hidden)
        self.bottom_hidden = tuple(int(h) for h in self.bottom_hidden)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        if self.twin_init not in ("independent", "identical"):
            raise ConfigError(f"twin_init must be 'independent' or 'identical', got {self.twin_init!r}")
        if self.variant is Variant.MMOE and self.n_experts < 1:
            raise ConfigError("MMoE needs at least one expert")
        if self.variant.baseline and not self.bottom_hidden:
            raise ConfigError("shared bottom / experts need at least one hidden layer")

    def to_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class PredictionBundle:
    """Per-sample conditionals and their compositions.

    ``car``/``ctcar`` are ``None`` for models without a cart head. For ESMM2
    ``cvr`` is conditional on cart, so ``post_click_cvr`` is ``car * cvr``.
    """

    ctr: np.ndarray
    cvr: np.ndarray
    ctcvr: np.ndarray
    car: np.ndarray | None = None
    ctcar: np.ndarray | None = None
    chained: bool = False

    @property
    def post_click_cvr(self):
        return self.car * self.cvr if self.chained else self.cvr

    def clipped(self, eps=PROB_EPS):
        clip = lambda x: None if x is None else np.clip(x, eps, 1 - eps)
        return PredictionBundle(clip(self.ctr), clip(self.cvr), clip(self.ctcvr),
                                clip(self.car), clip(self.ctcar), self.chained)

    def __len__(self):
        return len(self.ctr)


def compose(ctr, cvr, car=None, chained=False):
    """Sequential composition of conditionals into exposure-space probabilities."""
    if chained:
        return PredictionBundle(ctr, cvr, ctr * car * cvr, car, ctr * car, True)
    ctcar = None if car is None else ctr * car
    return PredictionBundle(ctr, cvr, ctr * cvr, car, ctcar, False)


class Model:
    """Shared embedding plus variant-specific towers."""

    heads = ("ctr", "cvr")

    def __init__(self, config: ModelConfig, schema: FeatureSchema, embedding=None):
        self.config = config
        self.schema = schema
        rng = np.random.default_rng(config.seed)
        self.embedding = embedding or EmbeddingTables(schema, rng=rng)
        self._rng = rng
        self._ids = None

    # subclasses fill these in
    def _modules(self):
        raise NotImplementedError

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, head_grads):
        raise NotImplementedError

    def parameters(self):
        params = dict(self.embedding.named_parameters())
        for name, mod in self._modules().items():
            params.update(mod.named_parameters(name))
        return params

    def forward(self, ids) -> PredictionBundle:
        ids = self.embedding.resolve_ids(ids)
        self._ids = ids
        return self._forward(self.embedding.lookup(ids))

    __call__ = forward

    def backward(self, head_grads):
        """Gradients of ``sum_h <head_grads[h], head_h>`` for the last forward batch."""
        if self._ids is None:
            raise UsageError("backward called before forward")
        grads, dx = self._backward(head_grads)
        grads.update(self.embedding.grads(dx, self._ids))
        return grads

    def predict(self, ids, batch_size=8192) -> PredictionBundle:
        parts = [self.forward(ids[i:i + batch_size]) for i in range(0, len(ids), batch_size)]
        cat = lambda k: None if getattr(parts[0], k) is None else np.concatenate([getattr(p, k) for p in parts])
        return PredictionBundle(cat("ctr"), cat("cvr"), cat("ctcvr"), cat("car"), cat("ctcar"),
                                parts[0].chained)

    def twin_towers(self):
        raise ConfigError(f"{self.config.variant.value} has no constrained twin towers")

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        clone._ids = None
        for mod in clone._modules().values():
            for layer in mod.layers:
                layer.weight = layer.weight.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        for name in clone.embedding.tables:
            clone.embedding.tables[name] = clone.embedding.tables[name].astype(dtype)
        return clone


class TowerModel(Model):
    """Parallel towers over the shared embedding, composed by products.

    ``tower_of`` maps each head to a tower name; ESMS points both cart and
    conversion heads at one ``siamese`` tower.
    """

    def __init__(self, config, schema, embedding=None):
        super().__init__(config, schema, embedding)
        v = config.variant
        d = schema.total_dim
        build = lambda: MLP.build(d, config.tower_hidden, 1, self._rng, slope=config.leaky_slope)
        if v is Variant.ESMM:
            self.tower_of = {"ctr": "ctr", "cvr": "cvr"}
        elif v.siamese:
            self.tower_of = {"ctr": "ctr", "car": "siamese", "cvr": "siamese"}
        else:
            self.tower_of = {"ctr": "ctr", "car": "car", "cvr": "cvr"}
        self.heads = tuple(self.tower_of)
        self.towers = {}
        for name in dict.fromkeys(self.tower_of.values()):
            self.towers[name] = build()
        if v.twin and config.twin_init == "identical":
            for src, dst in zip(self.towers["car"].layers, self.towers["cvr"].layers):
                dst.weight[...] = src.weight
                dst.bias[...] = src.bias
        self.chained = v is Variant.ESMM2

    def _modules(self):
        return self.towers

    def _forward(self, x):
        outs = {name: tower.forward(x)[:, 0] for name, tower in self.towers.items()}
        p = {h: outs[t] for h, t in self.tower_of.items()}
        return compose(p["ctr"], p["cvr"], p.get("car"), self.chained)

    def _backward(self, head_grads):
        per_tower = {}
        for h, t in self.tower_of.items():
            g = head_grads.get(h)
            if g is None:
                continue
            per_tower[t] = per_tower[t] + g if t in per_tower else as_float(g)
        grads, dx = {}, None
        for name, tower in self.towers.items():
            g = per_tower.get(name)
            if g is None:
                g = np.zeros(len(self._ids))
            pg, gx = tower.backward(g[:, None])
            grads.update(MLP.named_grads(name, pg))
            dx = gx if dx is None else dx + gx
        return grads, dx

    def twin_towers(self):
        if not self.config.variant.twin:
            return super().twin_towers()
        return self.towers["car"], self.towers["cvr"]


class SharedBottomModel(Model):
    def __init__(self, config, schema, embedding=None):
        super().__init__(config, schema, embedding)
        c = config
        self.bottom = MLP.build(schema.total_dim, c.bottom_hidden[:-1], c.bottom_hidden[-1],
                                self._rng, Activation.LEAKY_RELU, c.leaky_slope)
        self.head_nets = {
            h: MLP.build(c.bottom_hidden[-1], c.head_hidden, 1, self._rng, slope=c.leaky_slope)
            for h in self.heads
        }

    def _modules(self):
        return {"bottom": self.bottom, **{f"head_{h}": m for h, m in self.head_nets.items()}}

    def _forward(self, x):
        z = self.bottom.forward(x)
        p = {h: m.forward(z)[:, 0] for h, m in self.head_nets.items()}
        return compose(p["ctr"], p["cvr"])

    def _backward(self, head_grads):
        grads, dz = {}, 0.0
        for h, m in self.head_nets.items():
            g = as_float(head_grads.get(h, np.zeros(len(self._ids))))
            pg, gz = m.backward(g[:, None])
            grads.update(MLP.named_grads(f"head_{h}", pg))
            dz = dz + gz
        pg, dx = self.bottom.backward(dz)
        grads.update(MLP.named_grads("bottom", pg))
        return grads, dx


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class MMoEModel(Model):
    """Experts mixed per task by softmax gates, then one sigmoid head per task."""

    def __init__(self, config, schema, embedding=None):
        super().__init__(config, schema, embedding)
        c = config
        d = schema.total_dim
        self.experts = [
            MLP.build(d, c.bottom_hidden[:-1], c.bottom_hidden[-1], self._rng,
                      Activation.LEAKY_RELU, c.leaky_slope)
            for _ in range(c.n_experts)
        ]
        self.gates = {h: MLP.build(d, (), c.n_experts, self._rng, Activation.IDENTITY)
                      for h in self.heads}
        self.head_nets = {
            h: MLP.build(c.bottom_hidden[-1], c.head_hidden, 1, self._rng, slope=c.leaky_slope)
            for h in self.heads
        }
        self._mix = None

    def _modules(self):
        mods = {f"expert_{e}": m for e, m in enumerate(self.experts)}
        mods.update({f"gate_{h}": m for h, m in self.gates.items()})
        mods.update({f"head_{h}": m for h, m in self.head_nets.items()})
        return mods

    def gate_weights(self, x):
        return {h: softmax(g.forward(x)) for h, g in self.gates.items()}

    def _forward(self, x):
        ex = np.stack([e.forward(x) for e in self.experts], axis=1)  # [B, E, H]
        gates = self.gate_weights(x)
        p = {}
        for h in self.heads:
            mixed = np.einsum("be,beh->bh", gates[h], ex)
            p[h] = self.head_nets[h].forward(mixed)[:, 0]
        self._mix = (ex, gates)
        return compose(p["ctr"], p["cvr"])

    def _backward(self, head_grads):
        ex, gates = self._mix
        grads = {}
        d_ex = np.zeros_like(ex)
        dx = 0.0
        for h in self.heads:
            g = as_float(head_grads.get(h, np.zeros(ex.shape[0])))
            pg, dmix = self.head_nets[h].backward(g[:, None])
            grads.update(MLP.named_grads(f"head_{h}", pg))
            w = gates[h]
            d_ex += w[:, :, None] * dmix[:, None, :]
            dw = np.einsum("bh,beh->be", dmix, ex)
            dz = w * (dw - (w * dw).sum(axis=1, keepdims=True))
            pg, gx = self.gates[h].backward(dz)
            grads.update(MLP.named_grads(f"gate_{h}", pg))
            dx = dx + gx
        for e, expert in enumerate(self.experts):
            pg, gx = expert.backward(d_ex[:, e, :])
            grads.update(MLP.named_grads(f"expert_{e}", pg))
            dx = dx + gx
        return grads, dx


def build_model(config: ModelConfig, schema: FeatureSchema) -> Model:
    v = config.variant
    if v is Variant.SHARED_BOTTOM:
        return SharedBottomModel(config, schema)
    if v is Variant.MMOE:
        return MMoEModel(config, schema)
    return TowerModel(config, schema)


def tower_distance(model: Model):
    """Euclidean distance between the flattened twin towers."""
    a, b = model.twin_towers()
    return float(np.linalg.norm(a.flat_parameters() - b.flat_parameters()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path, weights=None, extra=None):
    """Write a JSON header line followed by the raw little-endian float64 payload.

    The header records format version, variant, schema (and its hash), model
    config, seed, loss weights, the parameter layout and a SHA-256 of the
    payload. Output is byte-identical for identical parameters.
    """
    params = model.parameters()
    names = sorted(params)
    payload = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    header = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "variant": model.config.variant.value,
        "schema_hash": model.schema.hash(),
        "schema": model.schema.to_dict(),
        "model_config": model.config.to_dict(),
        "seed": model.config.seed,
        "weights": weights,
        "extra": extra,
        "layout": [[n, list(params[n].shape)] for n in names],
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path, expected_schema: FeatureSchema | None = None):
    """Rebuild a model from ``path``; returns ``(model, header)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ChecksumError("checkpoint header is truncated")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"checkpoint header unreadable: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError("not a checkpoint file")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = raw[nl + 1:]
    if len(payload) != header["payload_bytes"] or \
            hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError("checkpoint payload failed checksum (truncated or corrupted)")
    schema = FeatureSchema.from_dict(header["schema"])
    if schema.hash() != header["schema_hash"]:
        raise SchemaError("checkpoint schema does not match its recorded hash")
    if expected_schema is not None and expected_schema.hash() != header["schema_hash"]:
        raise SchemaError(
            f"checkpoint schema {header['schema_hash']} != expected {expected_schema.hash()}"
        )
    model = build_model(ModelConfig(**header["model_config"]), schema)
    params = model.parameters()
    pos = 0
    for name, shape in header["layout"]:
        if name not in params or list(params[name].shape) != shape:
            raise SchemaError(f"checkpoint parameter {name} does not fit the model")
        n = int(np.prod(shape)) * 8
        params[name][...] = np.frombuffer(payload[pos:pos + n], dtype="<f8").reshape(shape)
        pos += n
    return model, header
