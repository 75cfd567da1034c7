"""Pose-conditioned GAN objectives, same-identity pair sampling and training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .canonical_poses import CanonicalPoseSet
from .networks import ArchConfig, Discriminator, Generator, ShapeError, init_params
from .pose_skeleton import DEFAULT_SCHEMA, KeypointSet, LimbSchema, rasterize_pose

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class GanLossConfig:
    lambda1: float = 10.0
    generator_adv_mode: str = "non_saturating"  # or "original"
    adversarial: bool = True

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.generator_adv_mode not in ("original", "non_saturating"):
            raise ValueError(f"unknown generator_adv_mode {self.generator_adv_mode!r}")


@dataclass(frozen=True)
class GanTrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    include_self_pairs: bool = True
    color_augment: float = 0.5  # probability of recolouring a pair
    decay_from: float = 1.0  # fraction of steps after which both learning rates fall linearly to 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("learning_rate, batch_size and steps must be non-negative/positive")
        if not 0 <= self.color_augment <= 1:
            raise ValueError("color_augment is a probability")
        if not 0 <= self.decay_from <= 1:
            raise ValueError("decay_from is a fraction of the run")

    def lr_factor(self, step: int) -> float:
        """Learning-rate multiplier for 0-based ``step``: 1 until decay_from, then linear towards 0."""
        start = self.decay_from * self.steps
        if step < start:
            return 1.0
        return max(0.0, (self.steps - step) / (self.steps - start + 1))


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (N, H, W, 3) array -> NCHW tensor."""
    t = torch.as_tensor(np.asarray(img), dtype=dtype)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def to_image(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> (N, H, W, 3) float32 array."""
    return t.detach().permute(0, 2, 3, 1).to(torch.float32).numpy().copy()


# -- losses --------------------------------------------------------------------

def l1_loss(a, b) -> torch.Tensor:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def clamp_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def adversarial_losses(d_real, d_fake, cfg: GanLossConfig = GanLossConfig()):
    """Return (L_GAN, generator adversarial term, L_D) batch-averaged.

    L_GAN = E[log D(real)] + E[log(1 - D(fake))] and L_D = -L_GAN. The generator
    term is log(1 - D(fake)) in ``original`` mode and -log D(fake) otherwise.
    """
    d_real = torch.as_tensor(d_real, dtype=torch.float64) if not torch.is_tensor(d_real) else d_real
    d_fake = torch.as_tensor(d_fake, dtype=torch.float64) if not torch.is_tensor(d_fake) else d_fake
    for name, p in (("d_real", d_real), ("d_fake", d_fake)):
        if bool(((p <= 0) | (p >= 1) | ~torch.isfinite(p)).any()):
            raise ValueError(f"{name} outside (0, 1): probabilities must be clamped upstream")
    l_gan = torch.log(d_real).mean() + torch.log1p(-d_fake).mean()
    if cfg.generator_adv_mode == "original":
        gen_adv = torch.log1p(-d_fake).mean()
    else:
        gen_adv = -torch.log(d_fake).mean()
    return l_gan, gen_adv, -l_gan


def generator_loss(gen_adv_term, l1, cfg: GanLossConfig = GanLossConfig()):
    return gen_adv_term + cfg.lambda1 * l1


# -- pairs ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingPair:
    source_image: np.ndarray
    target_image: np.ndarray
    target_pose: np.ndarray
    label: int
    source_index: int = -1
    target_index: int = -1


class PairDataset:
    """Images grouped by identity, with target pose images rasterized once."""

    def __init__(self, images: Sequence[np.ndarray], keypoints: Sequence[KeypointSet | None],
                 labels: Sequence[int], schema: LimbSchema = DEFAULT_SCHEMA):
        if not (len(images) == len(keypoints) == len(labels)):
            raise ValueError("images, keypoints and labels must align")
        self.images = [np.asarray(i, dtype=np.float32) for i in images]
        self.labels = [int(y) for y in labels]
        self.dims = self.images[0].shape[:2] if self.images else (0, 0)
        self.poses = [rasterize_pose(kp, schema, self.dims) if kp is not None else None
                      for kp in keypoints]
        groups: dict[int, list[int]] = {}
        for i, y in enumerate(self.labels):
            if self.poses[i] is not None:
                groups.setdefault(y, []).append(i)
        for y in sorted(set(self.labels)):
            if y not in groups:
                raise SamplingError(f"identity {y} has no keypoint-bearing images")
        self.groups = dict(sorted(groups.items()))

    @classmethod
    def from_samples(cls, samples, schema: LimbSchema = DEFAULT_SCHEMA) -> "PairDataset":
        return cls([s.image for s in samples], [s.keypoints for s in samples],
                   [s.identity for s in samples], schema)

    def valid_identities(self, include_self_pairs: bool) -> list[int]:
        return [y for y, m in self.groups.items() if include_self_pairs or len(m) > 1]

    def all_pairs(self, include_self_pairs: bool = True) -> list[tuple[int, int]]:
        return [(i, j) for m in self.groups.values() for i in m for j in m
                if include_self_pairs or i != j]

    def pair(self, i: int, j: int) -> TrainingPair:
        return TrainingPair(self.images[i], self.images[j], self.poses[j], self.labels[i], i, j)


def sample_training_pair(dataset: PairDataset, rng: np.random.Generator,
                         include_self_pairs: bool = True) -> TrainingPair:
    """Uniform identity, then a uniform ordered (source, target) pair within it."""
    ids = dataset.valid_identities(include_self_pairs)
    if not ids:
        raise SamplingError("no valid pairs")
    members = dataset.groups[ids[int(rng.integers(len(ids)))]]
    n = len(members)
    if include_self_pairs:
        k = int(rng.integers(n * n))
        i, j = members[k // n], members[k % n]
    else:
        k = int(rng.integers(n * (n - 1)))
        a, b = divmod(k, n - 1)
        i, j = members[a], members[b if b < a else b + 1]
    return dataset.pair(i, j)


def augment_colors(pair: TrainingPair, rng: np.random.Generator) -> TrainingPair:
    """Apply one random RGB permutation and per-channel negation to both images.

    Mid-gray backgrounds are (nearly) fixed points, so the pair stays a valid
    same-identity example of a recoloured identity. The pose image is untouched.
    """
    perm = rng.permutation(3)
    sign = np.where(rng.uniform(size=3) < 0.5, -1.0, 1.0).astype(np.float32)
    return TrainingPair(pair.source_image[..., perm] * sign, pair.target_image[..., perm] * sign,
                        pair.target_pose, pair.label, pair.source_index, pair.target_index)


def collate(pairs: Sequence[TrainingPair], dtype=torch.float32):
    src = to_tensor(np.stack([p.source_image for p in pairs]), dtype)
    tgt = to_tensor(np.stack([p.target_image for p in pairs]), dtype)
    pose = to_tensor(np.stack([p.target_pose for p in pairs]), dtype)
    return src, pose, tgt


# -- training ------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    l_d: float
    gen_adv: float
    l1: float
    l_g: float
    d_real: float
    d_fake: float
    order: tuple[str, str] = ("discriminator", "generator")


def make_optimizers(gen: Generator, disc: Discriminator, cfg: GanTrainConfig):
    betas = (cfg.beta1, 0.999)
    return (torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, betas=betas),
            torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=betas))


def discriminator_objective(batch, gen: Generator, disc: Discriminator,
                            loss_cfg: GanLossConfig = GanLossConfig(), fake=None):
    """(L_D, d_real, d_fake) with the generator output treated as a constant."""
    src, pose, tgt = batch
    if fake is None:
        fake = gen(src, pose)
    d_real = clamp_prob(disc(tgt))
    d_fake = clamp_prob(disc(fake.detach()))
    _, _, l_d = adversarial_losses(d_real, d_fake, loss_cfg)
    return l_d, d_real, d_fake


def generator_objective(batch, gen: Generator, disc: Discriminator,
                        loss_cfg: GanLossConfig = GanLossConfig(), fake=None):
    """(L_G, adversarial term, L1) = adversarial term + lambda1 * L1."""
    src, pose, tgt = batch
    if fake is None:
        fake = gen(src, pose)
    l1 = l1_loss(fake, tgt)
    if loss_cfg.adversarial:
        d_fake = clamp_prob(disc(fake))
        _, gen_adv, _ = adversarial_losses(torch.full_like(d_fake, 0.5), d_fake, loss_cfg)
    else:
        gen_adv = torch.zeros((), dtype=fake.dtype)
    return generator_loss(gen_adv, l1, loss_cfg), gen_adv, l1


def train_step(batch, gen: Generator, disc: Discriminator, opt_g, opt_d,
               loss_cfg: GanLossConfig = GanLossConfig(), step: int = 0) -> StepMetrics:
    """One discriminator update on L_D, then one generator update on L_G.

    The generator output is computed once; the generator loss sees the
    freshly updated discriminator.
    """
    if len(batch[0]) == 0:
        raise ValueError("empty batch")
    fake = gen(batch[0], batch[1])

    l_d, d_real, d_fake = discriminator_objective(batch, gen, disc, loss_cfg, fake)
    _check_finite(step, "L_D", l_d)
    if loss_cfg.adversarial:
        opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        opt_d.step()

    l_g, gen_adv, l1 = generator_objective(batch, gen, disc, loss_cfg, fake)
    _check_finite(step, "L_G", l_g)
    opt_g.zero_grad(set_to_none=True)
    l_g.backward()
    opt_g.step()
    return StepMetrics(step, l_d.item(), gen_adv.item(), l1.item(), l_g.item(),
                       d_real.mean().item(), d_fake.mean().item())


def _check_finite(step: int, name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise TrainingError(f"step {step}: non-finite {name} = {float(value)}")


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    history: list[StepMetrics] = field(default_factory=list)


def train_pn_gan(dataset: PairDataset, arch: ArchConfig, cfg: GanTrainConfig = GanTrainConfig(),
                 loss_cfg: GanLossConfig = GanLossConfig(), init: tuple | None = None,
                 checkpoint_every: int = 0,
                 on_checkpoint: Callable[[int, Generator, Discriminator], None] | None = None,
                 log_every: int = 100) -> GanResult:
    """Run ``cfg.steps`` alternating updates on seeded same-identity batches."""
    gen, disc = init if init is not None else init_params(arch, cfg.seed)
    if cfg.steps == 0:
        return GanResult(gen, disc, [])
    opt_g, opt_d = make_optimizers(gen, disc, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    gen.train()
    disc.train()
    for step in range(cfg.steps):
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = cfg.learning_rate * cfg.lr_factor(step)
        pairs = [sample_training_pair(dataset, rng, cfg.include_self_pairs) for _ in range(cfg.batch_size)]
        if cfg.color_augment > 0:
            pairs = [augment_colors(p, rng) if rng.uniform() < cfg.color_augment else p for p in pairs]
        m = train_step(collate(pairs), gen, disc, opt_g, opt_d, loss_cfg, step)
        history.append(m)
        if log_every and (step + 1) % log_every == 0:
            log.info("gan step %d: L_D=%.4f gen_adv=%.4f L1=%.4f", step + 1, m.l_d, m.gen_adv, m.l1)
        if checkpoint_every and on_checkpoint and (step + 1) % checkpoint_every == 0:
            on_checkpoint(step + 1, gen, disc)
    gen.eval()
    disc.eval()
    return GanResult(gen, disc, history)


@torch.no_grad()
def generate(gen: Generator, images: np.ndarray, poses: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched G(image, pose) on (N, H, W, 3) arrays."""
    out = []
    for k in range(0, len(images), batch_size):
        out.append(to_image(gen(to_tensor(images[k:k + batch_size]), to_tensor(poses[k:k + batch_size]))))
    return np.concatenate(out) if out else np.zeros((0,) + tuple(images.shape[1:]), np.float32)


@torch.no_grad()
def reconstruction_l1(gen: Generator, dataset: PairDataset, include_self_pairs: bool = True) -> float:
    """Mean L1 between G(source, target pose) and the target over all same-identity pairs."""
    pairs = dataset.all_pairs(include_self_pairs)
    src = np.stack([dataset.images[i] for i, _ in pairs])
    pose = np.stack([dataset.poses[j] for _, j in pairs])
    tgt = np.stack([dataset.images[j] for _, j in pairs])
    return float(np.abs(generate(gen, src, pose) - tgt).mean())


def synthesize_normalized(img: np.ndarray, canon: CanonicalPoseSet, gen: Generator) -> np.ndarray:
    """G(img, canonical pose c) for every canonical pose, in set order: (K, H, W, 3)."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape != canon.poses[0].shape:
        raise ShapeError(f"image shape {img.shape} != canonical pose shape {canon.poses[0].shape}")
    was_training = gen.training
    gen.eval()
    try:
        return generate(gen, np.repeat(img[None], len(canon), axis=0), np.stack(canon.poses))
    finally:
        gen.train(was_training)


def synthesize_batch(images: np.ndarray, canon: CanonicalPoseSet, gen: Generator,
                     batch_size: int = 64) -> np.ndarray:
    """Pose-normalized syntheses for many images: (N, K, H, W, 3)."""
    n, k = len(images), len(canon)
    src = np.repeat(np.asarray(images, dtype=np.float32), k, axis=0)
    poses = np.tile(np.stack(canon.poses), (n, 1, 1, 1))
    return generate(gen, src, poses, batch_size).reshape((n, k) + tuple(images.shape[1:]))
