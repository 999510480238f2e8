# -*- encoding: utf-8 -*-
import functools
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

root_dir = Path(__file__).resolve().parent
DEFAULT_CONFIG = root_dir.parent / 'resources' / 'config.yaml'

logger_initialized = {}


class FaimError(Exception):
    pass


class ShapeError(FaimError, ValueError):
    pass


class NonFiniteError(FaimError, ValueError):
    pass


class GeometryError(FaimError, ValueError):
    pass


class ConfigError(FaimError, ValueError):
    pass


class MotionBandError(FaimError, ValueError):
    pass


class NoProposalsError(FaimError, ValueError):
    pass


class AlignmentError(FaimError, ValueError):
    pass


class TrainingDivergedError(FaimError, RuntimeError):
    pass


class DatasetError(FaimError, OSError):
    pass


class RunConfig(BaseModel):
    """Flat run configuration. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    # fpsm
    k: int = Field(750, ge=1)
    n_cap: int = Field(30, ge=1)
    nms_train: float = Field(0.75, gt=0.0, le=1.0)
    nms_infer: float = Field(0.5, gt=0.0, le=1.0)
    # ticam
    m_train: int = Field(16, ge=1)
    m_infer: int = Field(32, ge=1)
    m_local: int = Field(0, ge=0)
    heads: int = Field(4, ge=1)
    feature_dim: int = Field(64, ge=1)
    frame_sampling: Literal["global", "local", "mixed"] = "global"
    score_fusion: Literal["replace", "multiply"] = "replace"
    # detector / ifem
    vo_channels: int = Field(32, ge=1)
    ins_dim: Optional[int] = Field(None, ge=1)
    image_size: int = Field(96, ge=32)
    num_classes: int = Field(8, ge=1)
    # maskhead
    lambda_: float = Field(1.0, alias="lambda", ge=0.0)
    roi_size: int = Field(32, ge=1)
    fpn_level: Literal["P3", "P4", "P5"] = "P5"
    samples_per_bin: int = Field(2, ge=1)
    loss: Literal["bce", "dice"] = "bce"
    aggregation: Literal["mask", "box", "none"] = "mask"
    class_aware: bool = True
    upsample: Literal["bilinear", "deconv", "none"] = "bilinear"
    mask_dim: int = Field(16, ge=1)
    mask_max_proposals: int = Field(8, ge=1)
    # synthdata
    num_train_clips: int = Field(500, ge=1)
    num_val_clips: int = Field(100, ge=1)
    frames_per_clip: int = Field(24, ge=1)
    num_objects: int = Field(3, ge=1)
    motion_speed: Literal["slow", "medium", "fast", "mixed"] = "mixed"
    occlusion_prob: float = Field(0.3, ge=0.0, le=1.0)
    blur_prob: float = Field(0.3, ge=0.0, le=1.0)
    defocus_strength: float = Field(0.2, ge=0.0, le=1.0)
    pseudo_masks: Literal["exact", "sam", "box2mask"] = "sam"
    # train
    base_lr: float = Field(0.01, ge=0.0)
    min_lr: float = Field(0.0005, ge=0.0)
    warmup_iters: int = Field(300, ge=0)
    pretrain_iters: int = Field(3000, ge=0)
    finetune_iters: int = Field(2000, ge=0)
    batch_clips: int = Field(2, ge=1)
    pretrain_frames: int = Field(4, ge=1)
    freeze_base: bool = True
    checkpoint_every: int = Field(500, ge=1)
    # eval / bench / ablate
    variance_source: Literal["ifem", "neck", "image"] = "ifem"
    bench_sizes: List[int] = Field(default_factory=lambda: [15, 30, 60, 120])
    bench_repeats: int = Field(5, ge=1)
    bench_warmup: int = Field(3, ge=3)
    ablate_key: Literal["aggregation", "loss", "class_aware", "roi_size",
                        "fpn_level", "n_cap", "m_train", "upsample"] = "aggregation"
    ablate_values: List[Any] = Field(default_factory=lambda: ["none", "box", "mask"])
    # run
    seed: int = 0
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    data_dir: str = "data/synthvid"
    run_root: str = "runs"
    init_checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _check_ranges(self) -> "RunConfig":
        if self.n_cap > self.k:
            raise ValueError(f"n_cap ({self.n_cap}) must not exceed k ({self.k})")
        if self.image_size % 32 != 0:
            raise ValueError(f"image_size ({self.image_size}) must be divisible by 32")
        if self.feature_dim % self.heads != 0:
            raise ValueError(f"feature_dim ({self.feature_dim}) must be divisible by heads ({self.heads})")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        return self

    @property
    def ins_channels(self) -> int:
        return self.ins_dim if self.ins_dim is not None else self.vo_channels

    def dump(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True, mode="json")

    def digest(self) -> str:
        canonical = json.dumps(self.dump(), sort_keys=True)
        return hashlib.sha1(canonical.encode("utf-8")).hexdigest()[:10]

    def run_dir(self) -> Path:
        return Path(self.run_root) / f"{self.digest()}_s{self.seed}"

    def replace(self, **changes: Any) -> "RunConfig":
        data = self.dump()
        if 'lambda_' in changes:
            changes['lambda'] = changes.pop('lambda_')
        data.update(changes)
        return load_config(data)


def read_yaml(yaml_path: Union[str, Path]) -> Dict:
    if not Path(yaml_path).exists():
        raise ConfigError(f'config file {yaml_path} does not exist')

    with open(str(yaml_path), 'rb') as f:
        data = yaml.safe_load(f)
    return data or {}


def parse_overrides(overrides: List[str]) -> Dict[str, Any]:
    """`--key=value` strings to a dict; values go through yaml so types survive."""
    parsed = {}
    for item in overrides:
        if not item.startswith('--') or '=' not in item:
            raise ConfigError(f'Override must look like --key=value, got {item!r}')
        key, value = item[2:].split('=', 1)
        parsed[key.replace('-', '_')] = yaml.safe_load(value)
    return parsed


def load_config(source: Union[str, Path, Dict, None] = None,
                overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        data = read_yaml(source)
    data.update(overrides or {})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


@functools.lru_cache()
def get_logger(name='faim'):
    """Initialize and get a logger by name.
    If the logger has not been initialized, this method will initialize the
    logger by adding one StreamHandler, otherwise the initialized logger will
    be directly returned.
    Args:
        name (str): Logger name.
    Returns:
        logging.Logger: The expected logger.
    """
    logger = logging.getLogger(name)
    if name in logger_initialized:
        return logger

    for logger_name in logger_initialized:
        if name.startswith(logger_name):
            return logger

    formatter = logging.Formatter(
        '[%(asctime)s] %(name)s %(levelname)s: %(message)s',
        datefmt="%Y/%m/%d %H:%M:%S")

    sh = logging.StreamHandler()
    sh.setFormatter(formatter)
    logger.addHandler(sh)
    logger_initialized[name] = True
    logger.propagate = False
    return logger
