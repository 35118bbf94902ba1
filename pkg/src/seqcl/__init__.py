"""Sequenced continual learning over a network of data nodes, guided by zero-cost activation-kernel scores."""

from .errors import (ConfigError, DomainError, NumericError, OracleCapError, SeqclError, ShapeError,
                     SingularityError, StateError)
from .harness import (DataSpec, EwcConfig, ModelSpec, RunConfig, ScoringConfig, Environment, RunLog,
                      SweepReport, compute_forgetting, load_config, run_episode, sweep)
from .neural import Model, ModelConfig, aid_activate, evaluate, forward, init_model, loss_and_grads, sgd_step
from .numerics import RngStream, bernoulli_mask, log_det_psd, matmul, rand_normal
from .regularizers import EwcState, consolidate, estimate_fisher, ewc_penalty
from .scoring import ScoreSet, activation_codes, build_kernel, nwot_score, score_all_nodes
from .sequencer import Policy, SequenceState, candidates, oracle_search, select_next
from .tasks import DataNode, DomainTransform, LabeledDataset, PartitionSpec, generate_global, partition, sample_minibatch

__version__ = "0.1.0"
