"""Configuration records for codecs, the synthetic world, the model, and training."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


@dataclass
class CodecConfig:
    """Fixed linear codec geometry (patchify / frame stacking)."""

    patch_size: int = 4
    video_channels: int = 3
    hop: int = 16
    audio_channels: int = 1
    # Seed for the fixed orthogonal codec/projection matrices. Constant by
    # default so encode/decode agree across processes and checkpoints.
    projection_seed: int = 613

    @property
    def video_latent_dim(self) -> int:
        return self.patch_size * self.patch_size * self.video_channels

    @property
    def audio_latent_dim(self) -> int:
        return self.hop * self.audio_channels


@dataclass
class WorldConfig:
    """Procedural multi-identity world: geometry, code dims, render gains."""

    frame_h: int = 16
    frame_w: int = 16
    channels: int = 3
    latent_frames: int = 8
    audio_steps: int = 32
    clip_seconds: float = 1.0
    region_size: int = 8
    d_appearance: int = 8
    d_timbre: int = 8
    d_content: int = 2
    registry_size: int = 16
    max_abs_corr: float = 0.3
    render_noise: float = 0.01
    appearance_gain: float = 14.0
    activity_gain: float = 7.0
    audio_gain: float = 4.0
    ref_image_size: int = 8
    ref_audio_steps: int = 16
    pose_train_deg: float = 45.0
    pose_multiview_deg: float = 90.0
    n_views_multiview: int = 3
    min_turn_steps: int = 4
    # Registry codes and render bases derive from this seed, not the scene
    # seed, so train/eval datasets share identities.
    registry_seed: int = 11

    @property
    def fps_latent(self) -> float:
        return self.latent_frames / self.clip_seconds

    @property
    def tokens_per_second(self) -> float:
        return self.audio_steps / self.clip_seconds


@dataclass
class ModelConfig:
    """Dual-tower transformer hyperparameters."""

    width: int = 64
    heads: int = 4
    blocks: int = 4
    ffn_mult: int = 4
    fusion_after: tuple[int, ...] = (1, 3)
    rope_base: float = 10000.0
    rope_split: tuple[int, int, int] = (2, 1, 1)
    k_max: int = 4
    # Per-identity window on the video-aligned timeline reserved for audio
    # reference tokens (the paper-style constant L).
    audio_ref_window: int = 16


@dataclass
class FlowConfig:
    """Flow-matching objective and sampler knobs."""

    lambda_audio: float = 1.0
    sample_steps: int = 50
    guidance_scale: float = 0.0  # hook only; sampler ignores 0.0


@dataclass
class AblationFlags:
    """Switches that zero out binding machinery without changing shapes."""

    subject_anchors: bool = True
    identity_embeddings: bool = True

    def tag(self) -> str:
        parts = []
        if not self.subject_anchors:
            parts.append("no_sa")
        if not self.identity_embeddings:
            parts.append("no_ie")
        return "+".join(parts) if parts else "full"


@dataclass
class StageConfig:
    """One training stage: gating, data mix, trainable parameter set."""

    stage: str  # stage1_audio | stage1_video | stage2_joint | stage3_multiview | one_stage
    steps: int
    lr: float
    batch_size: int = 16
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    fusion_gate: str = "active"  # active | masked
    trainable: str = "all"  # all | audio | video
    mix: str = "paired"
    lr_schedule: str = "cosine"  # cosine (to 10% of lr) | constant

    def __post_init__(self) -> None:
        if self.stage in ("stage1_audio", "stage1_video") and self.fusion_gate != "masked":
            raise ValueError(f"{self.stage} requires masked fusion, got {self.fusion_gate!r}")
        if self.stage in ("stage2_joint", "stage3_multiview") and self.fusion_gate != "active":
            raise ValueError(f"{self.stage} requires active fusion, got {self.fusion_gate!r}")
        if self.stage == "stage3_multiview" and self.mix != "multiview":
            raise ValueError("stage3_multiview must consume the multiview mix")


# Desk-scale stage presets. Step budgets follow a ~2:2:1:0.3 split; lr is
# scaled up from large-model settings to suit the toy widths.
STAGE_PRESETS = {
    "stage1_audio": dict(steps=1500, lr=1e-3, fusion_gate="masked", trainable="audio", mix="unimodal_audio"),
    "stage1_video": dict(steps=1500, lr=1e-3, fusion_gate="masked", trainable="video", mix="unimodal_video"),
    "stage2_joint": dict(steps=1000, lr=1e-3, fusion_gate="active", trainable="all", mix="paired"),
    "stage3_multiview": dict(steps=300, lr=1e-4, fusion_gate="active", trainable="all", mix="multiview"),
    "one_stage": dict(steps=4300, lr=1e-3, fusion_gate="active", trainable="all", mix="paired"),
}


def make_stage_config(stage: str, **overrides) -> StageConfig:
    if stage not in STAGE_PRESETS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {sorted(STAGE_PRESETS)}")
    kwargs = dict(STAGE_PRESETS[stage])
    kwargs.update(overrides)
    return StageConfig(stage=stage, **kwargs)


@dataclass
class Config:
    """Top-level bundle. The architecture hash covers codec/world/model."""

    codec: CodecConfig = field(default_factory=CodecConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def validate(self) -> None:
        if self.world.channels != self.codec.video_channels:
            raise ValueError("world.channels must match codec.video_channels")
        if self.world.frame_h % self.codec.patch_size or self.world.frame_w % self.codec.patch_size:
            raise ValueError("frame dims must be divisible by the patch size")
        if self.world.ref_image_size != self.world.region_size:
            raise ValueError("reference images and regions share one render basis; sizes must match")
        if self.world.ref_image_size % self.codec.patch_size:
            raise ValueError("reference image size must be divisible by the patch size")
        if self.world.d_timbre * self.world.d_content != self.codec.audio_latent_dim:
            raise ValueError("timbre x content code must fill one audio latent step exactly")
        if self.model.width % self.model.heads:
            raise ValueError("model width must be divisible by the head count")

    @property
    def cond_feature_dim(self) -> int:
        # slot one-hot + appearance summary (2) + content code + interval (2)
        return self.model.k_max + 2 + self.world.d_content + 2

    def architecture_dict(self) -> dict:
        return {
            "codec": dataclasses.asdict(self.codec),
            "world": dataclasses.asdict(self.world),
            "model": dataclasses.asdict(self.model),
        }

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_dict(self) -> dict:
        return {
            "codec": dataclasses.asdict(self.codec),
            "world": dataclasses.asdict(self.world),
            "model": dataclasses.asdict(self.model),
            "flow": dataclasses.asdict(self.flow),
        }


def _coerce(raw: str, pytype):
    if pytype is int:
        return int(raw)
    if pytype is float:
        return float(raw)
    if pytype is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if pytype is str:
        return raw
    # tuple fields are comma separated, e.g. fusion_after = 1,3
    if getattr(pytype, "__origin__", None) is tuple:
        return tuple(int(tok) for tok in raw.replace("(", "").replace(")", "").split(",") if tok.strip())
    raise TypeError(f"unsupported config field type {pytype}")


_SECTIONS = {"codec": CodecConfig, "world": WorldConfig, "model": ModelConfig, "flow": FlowConfig}


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> Config:
    """Build a Config from defaults, then an INI file, then explicit overrides.

    The file uses ``[section]`` headers with ``key = value`` lines; sections are
    codec, world, model, and flow. Overrides use dotted keys (``model.width``).
    """
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for section, cls in _SECTIONS.items():
            if not parser.has_section(section):
                continue
            target = getattr(cfg, section)
            types = {f.name: f.type for f in dataclasses.fields(cls)}
            hints = _resolved_hints(cls)
            for key, raw in parser.items(section):
                if key not in types:
                    raise KeyError(f"unknown key {key!r} in section [{section}]")
                setattr(target, key, _coerce(raw, hints[key]))
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise KeyError(f"override keys look like 'section.key', got {dotted!r}")
        target = getattr(cfg, section)
        if not hasattr(target, key):
            raise KeyError(f"unknown key {key!r} in section [{section}]")
        hints = _resolved_hints(type(target))
        setattr(target, key, value if not isinstance(value, str) else _coerce(value, hints[key]))
    cfg.validate()
    return cfg


def _resolved_hints(cls) -> dict:
    import typing

    return typing.get_type_hints(cls)


def save_config(cfg: Config, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for section in _SECTIONS:
        parser.add_section(section)
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            parser.set(section, key, str(value))
    with open(path, "w") as fh:
        parser.write(fh)
