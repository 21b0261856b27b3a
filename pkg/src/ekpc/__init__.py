"""Desk-scale continual-learning engine.

Frozen layered backbone with trainable bottleneck adapters, cosine-margin
classification, importance-aware parameter regularization, trainable
semantic drift compensation, Gaussian-replay unified classifier, and a
deterministic benchmark harness.
"""

from .bench import (MetricsReport, Task, TaskStream, average_forgetting,
                    load_feature_stream, make_synthetic_stream, read_feature_file,
                    summarize, write_feature_file)
from .drift import (DriftEstimate, Prototype, compensate_prototypes,
                    drift_from_features, estimate_drift, sample_replay_set,
                    sdv_metric, train_unified_classifier, tsd_loss)
from .importance import (ClassStats, ImportanceState, class_stats,
                         fuse_importance, ipr_loss, router_weighted_unit,
                         run_importance_pass, update_global_importance,
                         update_local_importance_down, update_local_importance_up,
                         weighted_up_unit)
from .kernels import BACKEND
from .model import (Adapter, BackboneSnapshot, CosineClassifier, ForwardTrace,
                    LinearHead, adapter_forward, backbone_forward,
                    cosine_margin_loss, init_backbone, linear_softmax_loss,
                    read_checkpoint, sgd_step, write_checkpoint)
from .numerics import (DegenerateVectorError, NonFiniteError, SeededRng,
                       cosine_similarity, finite_diff_gradient,
                       sample_diag_gaussian)
from .trainer import (ContinualState, ProtocolError, TrainConfig, evaluate,
                      init_state, run_stream, total_loss, train_task)

__version__ = "0.1.0"
