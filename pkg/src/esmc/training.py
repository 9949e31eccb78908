"""Training loop: seeded shuffling, the variant objective and AdagradDecay."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, NonFiniteGradientError, TrainingDivergedError
from .evaluation import case_split_eval
from .models import ModelConfig, Variant, build_model
from .nn import AdagradState, LrSchedule, adagrad_step
from .objectives import LossWeights, objective
from .samples import SampleSet, calibrate


@dataclass
class TrainConfig:
    """Training protocol. ``seed`` drives both model init and batch order.

    ``calibrate`` relabels raw samples before training (ESMC); switching it
    off gives the ESMC- ablation. ``kl_constraint=False`` drops the KL term
    altogether (an unconstrained twin-tower run).
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.005
    batch_size: int = 1024
    epochs: int = 1
    warmup_steps: int = 1000
    seed: int = 0
    shuffle: bool = True
    calibrate: bool = True
    kl_constraint: bool = True
    kl_symmetric: bool = False
    adagrad_decay: float = 1e-4
    adagrad_epsilon: float = 1e-8

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not math.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"lr must be a nonnegative number, got {self.lr}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"model", "weights"}
_WEIGHT_FIELDS = {f.name for f in fields(LossWeights)}
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}


def apply_override(config: TrainConfig, parameter, value, seed=None) -> TrainConfig:
    """Copy of ``config`` with one parameter set; bare names are looked up in
    weights, then training, then model fields."""
    section, _, name = parameter.rpartition(".")
    if not section:
        section = ("weights" if name in _WEIGHT_FIELDS else
                   "training" if name in _TRAIN_FIELDS else
                   "model" if name in _MODEL_FIELDS else "")
    if section == "weights" and name in _WEIGHT_FIELDS:
        config = replace(config, weights=replace(config.weights, **{name: value}))
    elif section == "training" and name in _TRAIN_FIELDS:
        config = replace(config, **{name: value})
    elif section == "model" and name in _MODEL_FIELDS:
        config = replace(config, model=replace(config.model, **{name: value}))
    else:
        raise ConfigError(f"unknown sweep parameter {parameter!r}")
    if seed is not None:
        config = replace(config, seed=seed)
    return config


@dataclass
class TrainResult:
    model: object
    log: list
    config: TrainConfig
    weights: LossWeights
    steps: int
    calibration: object = None


def _log_record(step, lr, res):
    comp = res.components
    rec = {
        "step": step,
        "lr": lr,
        "L_CTR": comp.get("ctr"),
        "L_CTCAR": comp.get("ctcar"),
        "L_CTCVR": comp.get("ctcvr"),
        "L_KL": comp.get("kl"),
        "total": float(res.total),
    }
    for extra, key in (("cvr", "L_CVR"), ("ctcar_global", "L_CTCAR_global")):
        if extra in comp:
            rec[key] = comp[extra]
    return {k: (None if v is None else (v if isinstance(v, int) else float(v))) for k, v in rec.items()}


def train(config: TrainConfig, samples: SampleSet, model=None) -> TrainResult:
    """Run the configured epochs over ``samples``; the last partial batch is kept.

    Raw input is calibrated first when ``config.calibrate``. The label
    hierarchy is enforced only on calibrated data. On a non-finite loss or
    gradient the step is not applied and :class:`TrainingDivergedError`
    carries the last good model and the log so far.
    """
    if len(samples) == 0:
        raise ConfigError("no training samples")
    if samples.schema is None:
        raise ConfigError("training samples carry no feature schema")
    stats = None
    if config.calibrate and not samples.calibrated:
        samples, stats = calibrate(samples)
    if model is None:
        model = build_model(replace(config.model, seed=config.seed), samples.schema)
    elif model.schema.hash() != samples.schema.hash():
        raise ConfigError("model schema does not match the samples")
    weights = config.weights.effective(model.config.variant)
    params = model.parameters()
    state = AdagradState(config.adagrad_decay, config.adagrad_epsilon)
    schedule = LrSchedule(config.lr, config.warmup_steps)
    rng = np.random.default_rng([config.seed, 0x7A])
    n = len(samples)
    log = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        for start in range(0, n, config.batch_size):
            batch = samples.take(order[start:start + config.batch_size])
            res = objective(model, batch, weights, hierarchy=samples.calibrated,
                            kl_enabled=config.kl_constraint, kl_symmetric=config.kl_symmetric)
            rec = _log_record(step, schedule.lr(state.step_count), res)
            if not np.isfinite(res.total):
                raise TrainingDivergedError(f"non-finite loss at step {step}: {rec}", step, model, log)
            try:
                adagrad_step(params, res.grads, state, schedule)
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"non-finite gradient in {exc} at step {step}",
                                            step, model, log) from None
            log.append(rec)
            step += 1
    return TrainResult(model, log, config, weights, step, stats)


def write_log(log, path):
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def prepare_test(samples: SampleSet) -> SampleSet:
    """Evaluation always runs on calibrated labels."""
    return samples if samples.calibrated else calibrate(samples)[0]


@dataclass
class AblationReport:
    reports: dict
    identical: bool

    def to_dict(self):
        return {"reports": {k: v.to_dict() for k, v in self.reports.items()},
                "identical": self.identical}


def ablate_calibration(config: TrainConfig, raw_train: SampleSet, test: SampleSet) -> AblationReport:
    """Same seed, trained once on calibrated and once on raw samples.

    Reports are tagged ``ESMC`` and ``ESMC-``; ``identical`` is true when the
    two trained parameter sets agree bit for bit.
    """
    if raw_train.calibrated:
        raise ConfigError("the ablation needs raw (uncalibrated) training samples")
    if config.model.variant is not Variant.ESMC:
        config = replace(config, model=replace(config.model, variant=Variant.ESMC))
    test = prepare_test(test)
    with_cal = train(replace(config, calibrate=True), raw_train)
    without = train(replace(config, calibrate=False), raw_train)
    pa, pb = with_cal.model.parameters(), without.model.parameters()
    same = all(np.array_equal(pa[k], pb[k]) for k in pa)
    return AblationReport(
        {"ESMC": case_split_eval(with_cal.model, test), "ESMC-": case_split_eval(without.model, test)},
        same,
    )
