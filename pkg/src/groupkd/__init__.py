"""Teacher-student distillation with grouped-logit losses."""

from .config import ExperimentConfig, load_config
from .data import PairList, SyntheticSpec, VerificationReport, generate, load_idx, make_pairs, verify
from .grouping import Partition, RankedPrediction, build_partition, rank, select_k
from .kdloss import (
    DecompositionReport,
    GroupedProbs,
    KDConfig,
    ablation_loss,
    classic_kd,
    decompose,
    gkd_backward,
    gkd_loss,
    grouped_probs,
    kd_backward,
)
from .marginloss import CosineHead, apply_margin, ce_loss, cosine_logits, head_backward
from .model import (
    MLPSpec,
    ModelBundle,
    backward,
    forward,
    init,
    load,
    save,
    total_loss_step,
)
from .numerics import kl_divergence, log_sum_exp, softmax
from .optim import SGDConfig, lr_at, step

__version__ = "0.1.0"
