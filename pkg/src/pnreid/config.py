"""Pipeline configuration: per-stage sections, strict validation, stable hashing."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .gan_training import GanLossConfig, GanTrainConfig
from .networks import ArchConfig
from .reid_features import BackboneConfig, ReidTrainConfig
from .retrieval_eval import EvalProtocol, FusionConfig
from .synth_data import SynthConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Section):
    path: Optional[str] = None  # existing dataset directory; otherwise synthesize
    domain: Literal["A", "B"] = "A"
    n_identities: int = Field(20, ge=1)
    n_train_identities: int = Field(10, ge=0)
    images_per_identity: int = Field(8, ge=1)
    n_cameras: int = Field(2, ge=1)
    angle_jitter: float = Field(8.0, ge=0)


class PosesSection(_Section):
    K: int = Field(8, ge=1)
    max_iter: int = Field(100, ge=1)


class GanSection(_Section):
    base_channels: int = Field(8, ge=1)
    n_res_blocks: int = Field(9, ge=1)
    discriminator_layers: int = Field(4, ge=1)
    padding_mode: Literal["reflect", "replicate", "zeros"] = "zeros"
    learning_rate: float = Field(2e-4, ge=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)
    steps: int = Field(2900, ge=0)
    lambda1: float = Field(10.0, ge=0)
    generator_adv_mode: Literal["original", "non_saturating"] = "non_saturating"
    include_self_pairs: bool = True
    color_augment: float = Field(0.6, ge=0, le=1)
    decay_from: float = Field(0.5, ge=0, le=1)
    checkpoint_every: int = Field(500, ge=0)


class ReidSection(_Section):
    base_channels: int = Field(16, ge=1)
    feature_dim: int = Field(256, ge=1)
    tap_stages: tuple[int, ...] = (1, 2, 3)
    learning_rate: float = Field(3.5e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(16, ge=1)
    dropout: float = Field(0.5, ge=0, lt=1)
    epochs_a: int = Field(30, ge=0)
    epochs_b: int = Field(8, ge=0)
    include_originals: bool = False


class EvalSection(_Section):
    cross_camera_filter: bool = True
    multi_query: bool = False
    use_backbone_a: bool = True
    n_poses: int = Field(8, ge=0)
    ranks: tuple[int, ...] = (1, 5, 10)

    @model_validator(mode="after")
    def _branches(self):
        if not self.use_backbone_a and self.n_poses == 0:
            raise ValueError("eval needs backbone A or at least one pose")
        return self


class PipelineConfig(_Section):
    seed: int = 0
    dims: tuple[int, int] = (64, 32)
    data: DataSection = DataSection()
    poses: PosesSection = PosesSection()
    gan: GanSection = GanSection()
    reid: ReidSection = ReidSection()
    eval: EvalSection = EvalSection()

    @field_validator("dims")
    @classmethod
    def _dims(cls, v):
        h, w = v
        if h != 2 * w or w < 16 or w % 16:
            raise ValueError("dims must be (2W, W) with W a positive multiple of 16")
        return v

    @model_validator(mode="after")
    def _cross(self):
        if self.data.n_train_identities > self.data.n_identities:
            raise ValueError("data.n_train_identities exceeds data.n_identities")
        if self.eval.n_poses > self.poses.K:
            raise ValueError("eval.n_poses exceeds poses.K")
        return self

    # -- stage views -----------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        d = self.data
        return SynthConfig(d.n_identities, d.n_train_identities, d.images_per_identity, d.n_cameras,
                           tuple(self.dims), self.seed, d.domain, None, d.angle_jitter)

    def gan_arch(self) -> ArchConfig:
        g = self.gan
        return ArchConfig(g.base_channels, g.n_res_blocks, tuple(self.dims), g.discriminator_layers, g.padding_mode)

    def gan_train(self) -> GanTrainConfig:
        g = self.gan
        return GanTrainConfig(g.learning_rate, g.beta1, g.batch_size, g.steps, self.seed, g.include_self_pairs,
                              g.color_augment, g.decay_from)

    def gan_loss(self) -> GanLossConfig:
        return GanLossConfig(self.gan.lambda1, self.gan.generator_adv_mode)

    def backbone(self) -> BackboneConfig:
        r = self.reid
        return BackboneConfig(r.base_channels, r.feature_dim, tuple(self.dims), tuple(r.tap_stages))

    def reid_train(self, branch: str) -> ReidTrainConfig:
        r = self.reid
        epochs = r.epochs_a if branch == "a" else r.epochs_b
        seed = self.seed * 2 + (0 if branch == "a" else 1)
        return ReidTrainConfig(r.learning_rate, r.beta1, r.batch_size, r.dropout, epochs, seed,
                               r.include_originals)

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(self.eval.cross_camera_filter, self.eval.multi_query)

    def fusion(self) -> FusionConfig:
        return FusionConfig(self.eval.use_backbone_a, self.eval.n_poses)

    def stage_hash(self, stage: str) -> str:
        """Hash of the config fields a stage depends on (upstream stages included)."""
        deps = {
            "synth-data": ("data",),
            "cluster-poses": ("data", "poses"),
            "train-gan": ("data", "gan"),
            "gen-normalized": ("data", "poses", "gan"),
            "train-reid": ("data", "poses", "gan", "reid"),
            "eval": ("data", "poses", "gan", "reid", "eval"),
        }[stage]
        payload = {"seed": self.seed, "dims": list(self.dims)}
        payload.update({k: getattr(self, k).model_dump(mode="json") for k in deps})
        return config_hash(payload)

    def full_hash(self) -> str:
        return config_hash(self.model_dump(mode="json"))


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class ConfigValidationError(ValueError):
    pass


def load_config(path: str | Path | None = None, seed: int | None = None) -> PipelineConfig:
    """Read a JSON or TOML config (``None`` gives defaults); ``seed`` overrides."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigValidationError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        try:
            if p.suffix == ".toml":
                import tomli
                raw = tomli.loads(text)
            else:
                raw = json.loads(text)
        except Exception as exc:  # parse errors from either format
            raise ConfigValidationError(f"{p}: {exc}") from exc
    if seed is not None:
        raw["seed"] = seed
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigValidationError(str(exc)) from exc
