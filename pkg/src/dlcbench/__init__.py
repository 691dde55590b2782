"""Class-incremental learning with task-specific ConvLoRA plugins.

A replay/distillation base learner is extended, per task, by a frozen
set of low-rank convolutional adapters; inference concatenates every
task-adapted representation, weights it with a channel gate, and
classifies with an aggregate head. The package ships a deterministic,
config-driven benchmark harness around the learner.
"""

from .config import ExperimentConfig, load_config, parse_config
from .convlora import (ConvLoraAdapter, PluginSet, adapted_forward,
                       attach_plugin_set, init_adapter,
                       merge_equivalent_kernel, plugin_param_count)
from .datasets import Dataset, SyntheticSpec, ingest_dataset, synth_dataset
from .gating import WeightingUnit, apply_gate, grow_unit, ideal_weights, loss_ia
from .losses import loss_aux, loss_ce, loss_kd_ce, loss_kd_kl
from .metrics import (DriftReport, MemoryLedger, MetricsReport,
                      average_accuracy, confusion_matrix, measure_drift,
                      memory_ledger, parameter_report, stage_accuracy)
from .runner import emit_report, run_experiment, run_single
from .streams import TaskStream, split_stream, task_count
from .buffer import ExemplarBuffer, herding_select, update_buffer
from .substrate import (BackboneSpec, ClassifierHead, FeatureExtractor,
                        build_backbone, forward_logits, grow_head)
from .trainer import (DlcState, TrainConfig, infer, init_state, phase1_train,
                      phase2_train, predict, snapshot_teacher)

__version__ = "0.1.0"
