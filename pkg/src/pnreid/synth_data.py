"""Deterministic "stickperson" dataset with identity and pose oracles.

Identity is a colour palette (torso/arms, legs, head, optional bag), pose is a
keypoint set drawn from parameterized limb-angle families, and the camera sets
the background colour. Every image is an exact function of those three, which
makes identity preservation and pose control measurable on generated images.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .pose_skeleton import (
    JOINT, KeypointSet, check_dims, disc_mask, read_keypoint_file, segment_mask,
    write_keypoint_file,
)

Color = tuple[float, float, float]

MAX_PALETTE_DISTANCE = math.sqrt(3.0)
BACKGROUND_TOL = 0.2
MIN_PALETTE_SEPARATION = 0.3

# Camera backgrounds in [0, 1] RGB. Cameras within a domain differ subtly; the
# two domains differ clearly.
DOMAIN_CAMERAS = {
    "A": ((0.502, 0.502, 0.502), (0.533, 0.518, 0.502), (0.471, 0.486, 0.502)),
    "B": ((0.298, 0.329, 0.376), (0.361, 0.298, 0.298), (0.267, 0.267, 0.267)),
}

HEAD_JOINTS = (JOINT["nose"], JOINT["r_eye"], JOINT["l_eye"], JOINT["r_ear"], JOINT["l_ear"])
ARM_SEGMENTS = (("neck", "r_shoulder"), ("neck", "l_shoulder"), ("r_shoulder", "r_elbow"),
                ("r_elbow", "r_wrist"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"))
TORSO_SEGMENTS = (("neck", "r_hip"), ("neck", "l_hip"), ("r_hip", "l_hip"))
LEG_SEGMENTS = (("r_hip", "r_knee"), ("r_knee", "r_ankle"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"))


@dataclass(frozen=True)
class StickIdentity:
    id: int
    torso: Color
    legs: Color
    head: Color
    bag: Color | None = None
    limb_proportions: tuple[float, float] = (1.0, 1.0)  # (arms, legs)

    @property
    def palette(self) -> tuple[Color, ...]:
        return (self.torso, self.legs, self.head, self.bag or self.torso)

    def palette_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(c, dtype=float) for c in self.palette])


@dataclass(frozen=True)
class StickSample:
    sample_id: str
    image: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    keypoints: KeypointSet
    identity: int
    camera: int


# -- poses ---------------------------------------------------------------------

@dataclass(frozen=True)
class PoseFamily:
    """A limb-angle family. Angles are degrees from straight down, positive
    toward image-right; ``view`` is front, back, left or right."""

    name: str
    view: str = "front"
    r_arm: tuple[float, float] = (-10.0, -5.0)  # (upper, fore)
    l_arm: tuple[float, float] = (10.0, 5.0)
    r_leg: tuple[float, float] = (-4.0, -2.0)  # (thigh, shin)
    l_leg: tuple[float, float] = (4.0, 2.0)


POSE_FAMILIES = {f.name: f for f in (
    PoseFamily("front_stand"),
    PoseFamily("front_arms_out", r_arm=(-80, -85), l_arm=(80, 85)),
    PoseFamily("front_wide", r_arm=(-30, -35), l_arm=(30, 35), r_leg=(-20, -20), l_leg=(20, 20)),
    PoseFamily("front_arm_raised", r_arm=(-160, -170), l_arm=(10, 5)),
    PoseFamily("back_stand", view="back", r_arm=(15, 10), l_arm=(-15, -10)),
    PoseFamily("walk_left", view="left", r_arm=(-35, -60), l_arm=(30, 20),
               r_leg=(-25, -10), l_leg=(25, 35)),
    PoseFamily("walk_right", view="right", r_arm=(35, 60), l_arm=(-30, -20),
               r_leg=(25, 10), l_leg=(-25, -35)),
    PoseFamily("crouch", r_arm=(-45, 20), l_arm=(45, -20), r_leg=(-40, 15), l_leg=(40, -15)),
    PoseFamily("arms_up", r_arm=(-150, -170), l_arm=(150, 170)),
    PoseFamily("back_walk", view="back", r_arm=(25, 30), l_arm=(-5, 0), r_leg=(12, 2), l_leg=(-12, -2)),
)}

DOMAIN_POSE_BANKS = {
    "A": ("front_stand", "front_arms_out", "front_wide", "front_arm_raised",
          "back_stand", "walk_left", "walk_right", "crouch"),
    "B": ("front_stand", "walk_left", "walk_right", "arms_up", "back_walk", "front_wide"),
}


def _polar(origin, length, deg):
    a = math.radians(deg)
    return (origin[0] + length * math.sin(a), origin[1] + length * math.cos(a))


def build_pose(family: PoseFamily, rng: np.random.Generator | None = None,
               proportions: tuple[float, float] = (1.0, 1.0), jitter: float = 8.0,
               center_jitter: float = 0.04) -> KeypointSet:
    """Keypoints for a pose family, optionally with seeded angle/position jitter.

    Geometry is laid out in isotropic units (image width = 1, height = 2).
    """
    def j(angle):
        return angle + (rng.uniform(-jitter, jitter) if rng is not None else 0.0)

    cx = 0.5 + (rng.uniform(-center_jitter, center_jitter) if rng is not None else 0.0)
    arm_s, leg_s = proportions
    side = family.view in ("left", "right")
    facing = -1.0 if family.view == "left" else 1.0
    sh_half = 0.03 if side else 0.19
    hip_half = 0.02 if side else 0.11
    p = {}
    p["neck"] = (cx, 0.42)
    p["r_shoulder"] = (cx - sh_half, 0.46)
    p["l_shoulder"] = (cx + sh_half, 0.46)
    p["r_hip"] = (cx - hip_half, 1.0)
    p["l_hip"] = (cx + hip_half, 1.0)
    for s in ("r", "l"):
        arm = getattr(family, f"{s}_arm")
        leg = getattr(family, f"{s}_leg")
        p[f"{s}_elbow"] = _polar(p[f"{s}_shoulder"], 0.28 * arm_s, j(arm[0]))
        p[f"{s}_wrist"] = _polar(p[f"{s}_elbow"], 0.26 * arm_s, j(arm[1]))
        p[f"{s}_knee"] = _polar(p[f"{s}_hip"], 0.38 * leg_s, j(leg[0]))
        p[f"{s}_ankle"] = _polar(p[f"{s}_knee"], 0.38 * leg_s, j(leg[1]))
    vis = {name: True for name in JOINT}
    if side:
        p["nose"] = (cx + 0.07 * facing, 0.23)
        p["r_eye"] = p["l_eye"] = (cx + 0.05 * facing, 0.19)
        p["r_ear"] = p["l_ear"] = (cx - 0.02 * facing, 0.2)
        near = "l" if facing < 0 else "r"
        far = "r" if near == "l" else "l"
        vis[f"{far}_eye"] = vis[f"{far}_ear"] = False
    else:
        p["nose"] = (cx, 0.23)
        p["r_eye"], p["l_eye"] = (cx - 0.04, 0.19), (cx + 0.04, 0.19)
        p["r_ear"], p["l_ear"] = (cx - 0.09, 0.21), (cx + 0.09, 0.21)
        if family.view == "back":
            vis["nose"] = vis["r_eye"] = vis["l_eye"] = False
    xy = np.array([(p[n][0], p[n][1] / 2.0) for n in JOINT], dtype=float)
    visible = np.array([vis[n] for n in JOINT])
    return KeypointSet.from_arrays(xy, visible)


# -- rendering -------------------------------------------------------------------

def _radii(dims):
    w = dims[1]
    return {"limb": 0.0625 * w, "head": 0.1 * w, "blob": 0.15 * w}


def _head_center(kp: KeypointSet):
    pts = [(kp.joints[i].x, kp.joints[i].y) for i in HEAD_JOINTS if kp.joints[i].visible]
    if not pts:
        return None
    return tuple(np.mean(np.array(pts), axis=0))


def _blob_center(kp: KeypointSet):
    idx = (JOINT["neck"], JOINT["r_hip"], JOINT["l_hip"])
    if not all(kp.joints[i].visible for i in idx):
        return None
    neck = np.array(kp.joints[idx[0]][:2])
    hips = (np.array(kp.joints[idx[1]][:2]) + np.array(kp.joints[idx[2]][:2])) / 2
    return tuple(0.5 * neck + 0.5 * hips)


def body_regions(kp: KeypointSet, dims) -> list[tuple[str, np.ndarray]]:
    """Ordered (palette slot, mask) layers for a stickperson in pose ``kp``."""
    dims = check_dims(dims)
    r = _radii(dims)
    layers = []

    def segs(names, slot):
        for a, b in names:
            ja, jb = kp.joints[JOINT[a]], kp.joints[JOINT[b]]
            if ja.visible and jb.visible:
                layers.append((slot, segment_mask((ja.x, ja.y), (jb.x, jb.y), dims, r["limb"])))

    segs(LEG_SEGMENTS, "legs")
    segs(TORSO_SEGMENTS, "torso")
    blob = _blob_center(kp)
    if blob is not None:
        layers.append(("bag", disc_mask(blob, dims, r["blob"])))
    segs(ARM_SEGMENTS, "torso")
    head = _head_center(kp)
    if head is not None:
        layers.append(("head", disc_mask(head, dims, r["head"])))
    return layers


def body_mask(kp: KeypointSet, dims) -> np.ndarray:
    """Thick-limb foreground mask of a stickperson in pose ``kp``."""
    mask = np.zeros(check_dims(dims), dtype=bool)
    for _, m in body_regions(kp, dims):
        mask |= m
    return mask


def render_stickperson(identity: StickIdentity, kp: KeypointSet, camera_color: Color,
                       dims=(64, 32)) -> np.ndarray:
    """Render to an (H, W, 3) float32 image in [-1, 1]."""
    dims = check_dims(dims)
    img = np.empty(dims + (3,), dtype=np.float32)
    img[:] = _signed(camera_color)
    colors = {"torso": identity.torso, "legs": identity.legs, "head": identity.head,
              "bag": identity.bag or identity.torso}
    for slot, mask in body_regions(kp, dims):
        img[mask] = _signed(colors[slot])
    return img


def _signed(c) -> np.ndarray:
    return np.asarray(c, dtype=np.float32) * 2.0 - 1.0


# -- oracles -------------------------------------------------------------------

def estimate_background(img: np.ndarray) -> np.ndarray:
    """Per-channel median of the border pixels."""
    border = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
    return np.median(border, axis=0)


def foreground_mask(img: np.ndarray, tol: float = BACKGROUND_TOL) -> np.ndarray:
    bg = estimate_background(img)
    return np.abs(img - bg).max(axis=2) > tol


def foreground_histogram(img: np.ndarray, bin_width: float = 1 / 16,
                         tol: float = BACKGROUND_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Foreground colour histogram: (bin mean colours in [0,1], normalized masses)."""
    fg = img[foreground_mask(img, tol)]
    if len(fg) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    rgb = (fg.astype(float) + 1.0) / 2.0
    keys = np.minimum(np.floor(rgb / bin_width), 1 / bin_width - 1).astype(int)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    means = np.zeros((len(counts), 3))
    np.add.at(means, inverse, rgb)
    means /= counts[:, None]
    return means, counts / counts.sum()


def identity_palette_distance(img: np.ndarray, identity: StickIdentity,
                              min_mass: float = 0.01) -> float:
    """Symmetric chamfer distance between the foreground colour histogram and
    the identity's palette.

    Half is the mass-weighted distance from each histogram bin to its nearest
    palette colour, half is the mean distance from each palette colour to the
    nearest bin holding at least ``min_mass``. An image with no foreground
    returns ``MAX_PALETTE_DISTANCE``.
    """
    colors, mass = foreground_histogram(img)
    if len(mass) == 0:
        return MAX_PALETTE_DISTANCE
    pal = np.unique(np.asarray(identity.palette, dtype=float), axis=0)
    d = np.linalg.norm(colors[:, None, :] - pal[None, :, :], axis=2)
    explained = float((mass * d.min(axis=1)).sum())
    present = d[mass >= min_mass] if (mass >= min_mass).any() else d
    covered = float(present.min(axis=0).mean())
    return 0.5 * (explained + covered)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def pose_mask_iou(img: np.ndarray, kp: KeypointSet) -> float:
    """IoU of the image foreground against the thick-limb mask of ``kp``."""
    return mask_iou(foreground_mask(img), body_mask(kp, img.shape[:2]))


# -- dataset -------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 20
    n_train_identities: int = 10
    images_per_identity: int = 8
    n_cameras: int = 2
    dims: tuple[int, int] = (64, 32)
    seed: int = 0
    domain: str = "A"
    pose_bank: tuple[str, ...] | None = None
    angle_jitter: float = 8.0
    bag_probability: float = 0.5

    def validate(self) -> None:
        if min(self.n_identities, self.images_per_identity, self.n_cameras) < 1:
            raise ValueError("counts must be positive")
        if not 0 <= self.n_train_identities <= self.n_identities:
            raise ValueError("n_train_identities must lie in [0, n_identities]")
        if self.domain not in DOMAIN_CAMERAS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.n_cameras > len(DOMAIN_CAMERAS[self.domain]):
            raise ValueError(f"domain {self.domain} defines {len(DOMAIN_CAMERAS[self.domain])} cameras")
        bank = self.bank()
        if not bank:
            raise ValueError("pose_bank must be non-empty")
        for name in bank:
            if name not in POSE_FAMILIES:
                raise ValueError(f"unknown pose family {name!r}")
        check_dims(self.dims)

    def bank(self) -> tuple[str, ...]:
        return tuple(self.pose_bank) if self.pose_bank is not None else DOMAIN_POSE_BANKS[self.domain]

    def cameras(self) -> tuple[Color, ...]:
        return DOMAIN_CAMERAS[self.domain][: self.n_cameras]


@dataclass
class StickDataset:
    config: SynthConfig
    identities: list[StickIdentity]
    samples: list[StickSample]
    split: dict[str, list[str]] = field(default_factory=dict)

    def by_id(self) -> dict[str, StickSample]:
        return {s.sample_id: s for s in self.samples}

    def subset(self, name: str) -> list[StickSample]:
        index = self.by_id()
        return [index[i] for i in self.split[name]]

    def identity(self, label: int) -> StickIdentity:
        return self.identities[label]

    @property
    def camera_colors(self) -> tuple[Color, ...]:
        return self.config.cameras()


def _quantize(c) -> Color:
    return tuple(round(float(v) * 255) / 255 for v in c)


def _color_ok(c, cameras, min_bg: float = 0.35) -> bool:
    return all(np.abs(np.subtract(c, cam)).max() >= min_bg for cam in cameras)


def palette_set_distance(a: StickIdentity, b: StickIdentity) -> float:
    """Symmetric chamfer distance between two palettes taken as colour sets."""
    pa, pb = np.asarray(a.palette, dtype=float), np.asarray(b.palette, dtype=float)
    d = np.linalg.norm(pa[:, None] - pb[None], axis=2)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def sample_identities(n: int, rng: np.random.Generator, bag_probability: float = 0.5,
                      min_separation: float = 0.5, min_set_separation: float = 0.35,
                      max_tries: int = 50000) -> list[StickIdentity]:
    """Rejection-sample palettes.

    Colours stay away from every camera background (both domains), colours within
    a palette are at least 0.3 apart, concatenated palettes of any two identities
    are at least ``min_separation`` apart (never below 0.3), and palettes taken
    as colour sets are at least ``min_set_separation`` apart.
    """
    all_cams = [c for cams in DOMAIN_CAMERAS.values() for c in cams]
    min_separation = max(min_separation, MIN_PALETTE_SEPARATION)
    out: list[StickIdentity] = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not sample {n} separated palettes")
        cols = []
        while len(cols) < 4:
            c = _quantize(rng.uniform(0, 1, 3))
            if _color_ok(c, all_cams) and all(np.linalg.norm(np.subtract(c, o)) >= 0.3 for o in cols):
                cols.append(c)
        has_bag = rng.uniform() < bag_probability
        props = (float(rng.uniform(0.9, 1.1)), float(rng.uniform(0.9, 1.05)))
        cand = StickIdentity(len(out), cols[0], cols[1], cols[2], cols[3] if has_bag else None,
                             (round(props[0], 3), round(props[1], 3)))
        v = cand.palette_vector()
        if all(np.linalg.norm(v - o.palette_vector()) >= min_separation
               and palette_set_distance(cand, o) >= min_set_separation for o in out):
            out.append(cand)
    return out


def generate_dataset(cfg: SynthConfig) -> StickDataset:
    """All samples plus a train/query/gallery split.

    Identities below ``n_train_identities`` form the training split; for the
    rest, the first image of each identity in each camera is a query and the
    remainder is gallery.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    identities = sample_identities(cfg.n_identities, rng, cfg.bag_probability)
    cams = cfg.cameras()
    bank = cfg.bank()
    samples = []
    split = {"train": [], "query": [], "gallery": []}
    for ident in identities:
        seen_cams = set()
        for k in range(cfg.images_per_identity):
            cam = k % cfg.n_cameras
            fam = POSE_FAMILIES[bank[int(rng.integers(len(bank)))]]
            kp = build_pose(fam, rng, ident.limb_proportions, jitter=cfg.angle_jitter)
            sid = f"{ident.id:03d}_{cam}_{k:03d}"
            # snap to the 8-bit grid so the in-memory dataset equals its PNG round trip
            img = uint8_to_image(image_to_uint8(render_stickperson(ident, kp, cams[cam], cfg.dims)))
            samples.append(StickSample(sid, img, kp, ident.id, cam))
            if ident.id < cfg.n_train_identities:
                split["train"].append(sid)
            elif cam not in seen_cams:
                seen_cams.add(cam)
                split["query"].append(sid)
            else:
                split["gallery"].append(sid)
    return StickDataset(cfg, identities, samples, split)


# -- persistence ---------------------------------------------------------------

def image_to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(image_to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return uint8_to_image(np.asarray(im.convert("RGB")))


def save_dataset(ds: StickDataset, root) -> Path:
    """Write ``images/*.png``, ``keypoints.txt`` and ``split.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        save_png(root / "images" / f"{s.sample_id}.png", s.image)
    write_keypoint_file(root / "keypoints.txt", [(s.sample_id, s.keypoints) for s in ds.samples])
    manifest = {
        "config": _config_dict(ds.config),
        "identities": [asdict(i) for i in ds.identities],
        "samples": [{"id": s.sample_id, "identity": s.identity, "camera": s.camera} for s in ds.samples],
        "split": ds.split,
    }
    (root / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["dims"] = list(cfg.dims)
    d["pose_bank"] = list(cfg.bank())
    return d


def load_dataset(root) -> StickDataset:
    root = Path(root)
    manifest = json.loads((root / "split.json").read_text())
    cfg_d = dict(manifest["config"])
    cfg_d["dims"] = tuple(cfg_d["dims"])
    cfg_d["pose_bank"] = tuple(cfg_d["pose_bank"])
    cfg = SynthConfig(**cfg_d)
    identities = []
    for d in manifest["identities"]:
        identities.append(StickIdentity(
            d["id"], tuple(d["torso"]), tuple(d["legs"]), tuple(d["head"]),
            tuple(d["bag"]) if d["bag"] is not None else None, tuple(d["limb_proportions"])))
    kps = read_keypoint_file(root / "keypoints.txt")
    samples = []
    for rec in manifest["samples"]:
        if rec["id"] not in kps:
            raise ValueError(f"sample {rec['id']} has no keypoints")
        samples.append(StickSample(rec["id"], load_png(root / "images" / f"{rec['id']}.png"),
                                   kps[rec["id"]], rec["identity"], rec["camera"]))
    return StickDataset(cfg, identities, samples, {k: list(v) for k, v in manifest["split"].items()})
