"""Learned-partition invariance penalties on synthetic confounded identity data.

Partitions of the training identities are learned with the encoder frozen,
then the encoder is trained to be invariant across every learned partition.
"""
from .errors import (
    ConfigurationError,
    DegenerateBatch,
    DivergenceError,
    EmptySubset,
    EmptySubsetPartition,
    IngestionError,
    InvRegError,
    PartitionLearningFailed,
)
from .evaluation import adjusted_rand_index, brute_force_partition_oracle, group_report, tpr_at_fpr
from .invariance import InvariantLossConfig, invariant_loss, irmv1_penalty, rex_penalty
from .losses import MarginHead, cls_loss, margin_logits, supcon_loss
from .numkit import encoder_backward, encoder_forward, finite_diff_check, init_encoder, sgd_step
from .partition import PartitionSet, harden_partition, learn_partition, normalize_partition, update_partition_set
from .synthdata import DatasetSpec, GroupSpec, generate, load_csv
from .trainer import TrainConfig, run_training

__version__ = "0.1.0"
