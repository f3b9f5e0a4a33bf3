"""Experiment configuration: JSON files plus CLI overrides."""

import dataclasses
import json
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .kdloss import KDConfig
from .model import MLPSpec
from .optim import SGDConfig

TRAIN_VARIANTS = (
    "scratch",
    "full_kd",
    "primary_only",
    "primary_binary",
    "primary_secondary_binary",
)


@dataclass
class ExperimentConfig:
    dataset: SyntheticSpec = field(default_factory=SyntheticSpec)
    idx_images: str = None   # optional IDX ingestion instead of synthetic data
    idx_labels: str = None
    teacher: MLPSpec = field(
        default_factory=lambda: MLPSpec(input_dim=64, hidden_dims=[512, 512],
                                        embedding_dim=128)
    )
    student: MLPSpec = field(
        default_factory=lambda: MLPSpec(input_dim=64, hidden_dims=[64],
                                        embedding_dim=128)
    )
    kd: KDConfig = field(default_factory=KDConfig)
    sgd: SGDConfig = field(default_factory=SGDConfig)
    epochs: int = 30
    batch_size: int = 128
    seed: int = 1
    variant: str = "primary_binary"
    head_kind: str = "arcface"
    head_scale: float = 64.0
    head_margin: float = 0.5
    kd_logits_source: str = "pre_margin"  # or "post_margin"
    num_eval_pairs: int = 2000
    eval_pair_seed: int = 12345

    def __post_init__(self):
        if self.variant not in TRAIN_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.kd_logits_source not in ("pre_margin", "post_margin"):
            raise ValueError(f"unknown kd_logits_source {self.kd_logits_source!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


_NESTED = {
    "dataset": SyntheticSpec,
    "teacher": MLPSpec,
    "student": MLPSpec,
    "kd": KDConfig,
    "sgd": SGDConfig,
}


def config_from_dict(d):
    kwargs = {}
    for key, value in d.items():
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _NESTED[key](**value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path=None, overrides=None):
    """Config file values, then CLI overrides, on top of the defaults.

    Overrides use dotted keys for nested fields, e.g. {"kd.tau": 0.95}.
    """
    d = {}
    if path is not None:
        with open(path) as f:
            d = json.load(f)
    cfg = config_from_dict(d)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        obj = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            obj = getattr(obj, p)
        if not hasattr(obj, leaf):
            raise ValueError(f"unknown config key {key!r}")
        setattr(obj, leaf, value)
    # re-validate after overrides
    return config_from_dict(cfg.to_dict())
