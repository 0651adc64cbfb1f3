"""Run configuration: JSON config file plus CLI ``--set key=value`` overrides.

Every key has a default here; unknown keys are rejected with the offending
field path so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad type, out-of-range value)."""


@dataclass
class RunConfig:
    # paths
    bundle_dir: Optional[str] = None  # dataset directory (bundles/, gt/, vocabulary.json)
    weights: Optional[str] = None  # weights bundle; default <bundle_dir>/weights or seeded init
    gt_dir: Optional[str] = None  # default <bundle_dir>/gt
    out_dir: str = "out"
    synonyms_path: Optional[str] = None  # JSON map test-name -> train-name

    # ensemble / classification
    alpha: float = 0.8
    beta: float = 0.4
    tau: float = 0.07
    tau_clip: Optional[float] = None  # defaults to tau
    force_se_conf: Optional[float] = None  # pin the confidence term (testing/ablation)
    geometric_baseline: bool = False
    iou_floor: Optional[float] = None  # optionally drop masks below this IoU score

    # losses
    gamma_class: float = 2.0
    gamma_mask: float = 5.0
    gamma_iou: float = 1.0
    literal_iou_loss: bool = False
    dice_in_loss: bool = False

    # architecture
    n_queries: int = 250
    d_pix: int = 256
    d_emb: int = 32
    d_sam: int = 32
    d_clip: int = 32
    layers: int = 9
    heads: int = 8
    use_pos_encoding: bool = False
    ldp_use_region_features: bool = False
    hard_pooling: bool = False
    eps_area: float = 1e-4

    # panoptic fusion
    score_thresh: float = 0.3
    min_area: int = 16
    overlap_thresh: float = 0.8
    upsample: str = "nearest"

    # synthetic data
    image_size: int = 64
    c_test: int = 6
    n_gt_segments: int = 4
    n_images: int = 3
    sam_noise: float = 0.05
    clip_noise: float = 0.35

    # execution
    seed: int = 0
    jobs: int = 1
    cluster_k: Optional[int] = None  # default: n_gt_segments

    def validate(self) -> None:
        def in_unit(name: str, value) -> None:
            if value is not None and not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")

        in_unit("alpha", self.alpha)
        in_unit("beta", self.beta)
        in_unit("score_thresh", self.score_thresh)
        in_unit("overlap_thresh", self.overlap_thresh)
        in_unit("force_se_conf", self.force_se_conf)
        in_unit("iou_floor", self.iou_floor)
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.tau_clip is not None and self.tau_clip <= 0:
            raise ConfigError(f"tau_clip must be positive, got {self.tau_clip}")
        for name in ("gamma_class", "gamma_mask", "gamma_iou"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("n_queries", "d_pix", "d_emb", "d_sam", "d_clip", "layers",
                     "heads", "c_test", "n_gt_segments", "n_images", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.min_area < 0:
            raise ConfigError("min_area must be >= 0")
        if self.eps_area <= 0:
            raise ConfigError("eps_area must be positive")
        if self.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")
        if self.upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"upsample must be nearest or bilinear, got {self.upsample!r}")
        if self.d_pix % self.heads or self.d_emb % self.heads:
            raise ConfigError("d_pix and d_emb must be divisible by heads")

    @property
    def effective_tau_clip(self) -> float:
        return self.tau if self.tau_clip is None else self.tau_clip


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    field = _FIELDS[name]
    text = raw.strip()
    ftype = field.type
    optional = ftype.startswith("Optional[")
    if optional and text.lower() in ("none", "null"):
        return None
    base = ftype.removeprefix("Optional[").removesuffix("]") if optional else ftype
    try:
        if base == "bool":
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"cannot parse --set {name}={raw!r}: {e}") from None


def load_config(
    config_path: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Build a RunConfig from an optional JSON file and key=value overrides
    (overrides win). Unknown keys raise ConfigError naming the key."""
    values: dict = {}
    if config_path is not None:
        try:
            obj = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, val in obj.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r} in {config_path}")
            values[key] = val
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    try:
        cfg = RunConfig(**values)
        cfg.validate()
    except TypeError as e:
        raise ConfigError(f"bad config value type: {e}") from None
    return cfg


def config_help_lines() -> list[str]:
    """One 'key = default' line per config key, for --help epilogs."""
    return [f"  {f.name} = {f.default!r}" for f in dataclasses.fields(RunConfig)]
