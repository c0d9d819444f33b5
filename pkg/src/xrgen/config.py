"""Run configuration. Defaults mirror the reference training setup
(hidden 256, features 1024, min freq 5, 33-step unroll, batch 20,
lr 1e-5); tests shrink them for speed."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

from .errors import DataError

FEATURE_MODES = ("cnn", "imported")
AGGREGATION_MODES = ("max", "single")
BBOX_MODES = ("off", "on")
DECODE_MODES = ("greedy", "sample")


@dataclass
class RunConfig:
    hidden_size: int = 256          # E: LSTM state and input width
    feature_size: int = 1024        # F: per-view feature length
    min_freq: int = 5               # vocab frequency cutoff
    unroll_len: int = 33            # sequence positions incl. image slot
    batch_size: int = 20
    learning_rate: float = 1e-5
    epochs: int = 50
    patience: int = 10              # early stopping on val loss
    seed: int = 0
    feature_mode: str = "cnn"       # cnn | imported
    aggregation: str = "max"        # max | single (per-image baseline)
    bbox_mode: str = "off"          # off | on
    decode: str = "greedy"          # greedy | sample
    temperature: float = 1.0
    image_size: int = 224           # network input side
    aug_source_size: int = 256      # pre-crop side for augmentation
    augment: bool = True            # eight-fold training augmentation
    cnn_channels: tuple = (8, 16, 32)
    max_gen_len: int = 32
    loss_sum: bool = False          # unnormalized NLL sum instead of mean
    freeze_cnn: bool = False
    target_train_loss: float = 0.0  # stop early once reached; 0 disables

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        if self.feature_mode not in FEATURE_MODES:
            raise DataError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if self.aggregation not in AGGREGATION_MODES:
            raise DataError(f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}")
        if self.bbox_mode not in BBOX_MODES:
            raise DataError(f"bbox_mode must be one of {BBOX_MODES}, got {self.bbox_mode!r}")
        if self.decode not in DECODE_MODES:
            raise DataError(f"decode must be one of {DECODE_MODES}, got {self.decode!r}")
        if self.unroll_len < 4:
            raise DataError(f"unroll_len must be >= 4, got {self.unroll_len}")
        div = 2 ** len(self.cnn_channels)
        if self.image_size % div:
            raise DataError(f"image_size {self.image_size} must be divisible by {div}")

    def to_dict(self):
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(d, dict):
            raise DataError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def with_env_seed(self):
        """XRGEN_SEED in the environment overrides config.seed."""
        env = os.environ.get("XRGEN_SEED")
        if env is None:
            return self
        try:
            seed = int(env)
        except ValueError as e:
            raise DataError(f"XRGEN_SEED must be an integer, got {env!r}") from e
        d = self.to_dict()
        d["seed"] = seed
        return RunConfig.from_dict(d)
