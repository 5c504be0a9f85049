"""Run configuration: one YAML file, validated with pydantic, plus
dotted-path overrides from the command line."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    raw_dir: Optional[str] = None  # directory of GT sequence folders; None synthesises a toy set
    pattern: str = "frame_%05d.png"
    synth_sequences: int = 32
    synth_size: int = 64
    synth_frames: int = 24
    repeat_prob: float = 0.0
    val_sequences: int = 10
    # "profile": PQFs at GOP positions; "psnr": local maxima of LQ-vs-GT PSNR;
    # "auto": profile for the surrogate codec, psnr for an external encoder
    pqf_labels: Literal["auto", "profile", "psnr"] = "auto"


class DegradationConfig(_Strict):
    mode: Literal["surrogate-codec", "external-codec"] = "surrogate-codec"
    gop_period: int = 4
    base_strength: float = 3.0
    pqf_strength: float = 1.0
    downsample_factor: Literal[1, 4] = 1
    seed: int = 0
    strength_jitter: float = 0.0
    skip_repeats: bool = False
    encoder_cmd: Optional[str] = None


class Stage1Config(_Strict):
    channels: int = 32
    extract_blocks: int = 5
    rec_group_sizes: list[int] = Field(default_factory=lambda: [5, 10, 10, 10, 10, 10])
    propagation_passes: int = 2
    fusion_blocks: int = 2
    flow_levels: int = 3
    flow_channels: int = 16
    use_pqf: bool = True


class Stage2Config(_Strict):
    embed_dim: int = 32
    window_size: int = 8
    depths: list[int] = Field(default_factory=lambda: [2, 2])
    heads: list[int] = Field(default_factory=lambda: [2, 2])
    mlp_ratio: float = 2.0


class PlanConfig(_Strict):
    toy: bool = True
    lr0: Optional[float] = None
    groups: int = 6
    batch_size: int = 2
    patch_size: int = 64
    t_len: int = 7
    log_interval: int = 10
    val_interval: int = 0


class Stage2TrainConfig(_Strict):
    pretrain_iters: int = 200
    noise_sigma: float = 0.05
    budget_a: int = 200
    budget_b: int = 20
    lr_a: float = 2e-4
    lr_b: float = 1e-6
    sample_every: int = 8
    patch: int = 32
    batch: int = 8
    eval_every: int = 50
    freeze_stage1: bool = False


class EnsembleConfig(_Strict):
    transforms: list[str] = Field(default_factory=lambda: ["e", "r90", "r180", "r270", "h", "h_r90", "h_r180", "h_r270"])
    tta: Literal["none", "stage1", "stage2", "both"] = "none"
    models: list[str] = Field(default_factory=list)


class EvalConfig(_Strict):
    mode: Literal["all", "every10th"] = "all"
    luma_only: bool = False


class RunConfig(_Strict):
    data: DataConfig = Field(default_factory=DataConfig)
    degradation: DegradationConfig = Field(default_factory=DegradationConfig)
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    stage2: Stage2Config = Field(default_factory=Stage2Config)
    plan: PlanConfig = Field(default_factory=PlanConfig)
    stage2_train: Stage2TrainConfig = Field(default_factory=Stage2TrainConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    toy_divisor: int = 500
    output_dir: str = "runs/default"

    # -- conversions to the library's own config types --

    def degradation_profile(self):
        from .videodata import DegradationProfile

        return DegradationProfile(**self.degradation.model_dump())

    def stage1_config(self):
        from .stage1net import StageIConfig

        d = self.stage1.model_dump()
        d["rec_group_sizes"] = tuple(d["rec_group_sizes"])
        d["active_groups"] = len(d["rec_group_sizes"])  # the trainer picks k per phase
        return StageIConfig(**d)

    def stage2_config(self):
        from .stage2net import StageIIConfig

        return StageIIConfig(**self.stage2.model_dump())


def _coerce(text: str):
    """Parse an override value with YAML scalar rules (``1e-3``, ``true``, ``[1, 2]``)."""
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict in place."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _coerce(value)
    return raw


def load_config(path=None, overrides=None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    apply_overrides(raw, overrides)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


def config_schema() -> dict:
    return RunConfig.model_json_schema()
