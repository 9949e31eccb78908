"""Entire-space multi-task conversion-rate models (ESMC family and baselines)
on a small numpy neural core, with a session simulator and gap oracle."""
from .embedding import EmbeddingTables, FeatureSchema, FieldSpec, OovPolicy
from .errors import (ChecksumError, ConfigError, ESMCError, HierarchyError, InputError,
                     NonFiniteGradientError, SchemaError, TrainingDivergedError, UsageError)
from .evaluation import MetricsReport, auc, case_split_eval, evaluate, sweep
from .models import (ModelConfig, PredictionBundle, Variant, build_model, load_checkpoint,
                     save_checkpoint, tower_distance)
from .nn import AdagradState, LrSchedule, adagrad_step, grad_check
from .objectives import LossWeights, objective, parameter_kl
from .samples import (InteractionSample, SampleSet, calibrate, read_samples, split_by_session,
                      validate_hierarchy, write_samples)
from .simulator import (EventLog, GapReport, SimulatorConfig, export_dataset, gap_oracle,
                        ground_truth_probabilities, preset, simulate)
from .training import TrainConfig, ablate_calibration, train

__version__ = "0.1.0"
