"""18-joint pose schema, keypoint parsing and pose-image rasterization."""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

N_JOINTS = 18

JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
JOINT = {name: i for i, name in enumerate(JOINT_NAMES)}

# COCO-18 limb topology as used by OpenPose renderers.
COCO_LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

JOINT_COLOR = (1.0, 1.0, 1.0)


class KeypointParseError(ValueError):
    pass


class Joint(NamedTuple):
    x: float
    y: float
    visible: bool


@dataclass(frozen=True)
class KeypointSet:
    """Ordered 18 joints in normalized image coordinates (x right, y down)."""

    joints: tuple[Joint, ...]

    def __post_init__(self):
        if len(self.joints) != N_JOINTS:
            raise KeypointParseError(f"expected {N_JOINTS} joints, got {len(self.joints)}")
        for i, j in enumerate(self.joints):
            if j.visible and not (math.isfinite(j.x) and math.isfinite(j.y)
                                  and 0.0 <= j.x <= 1.0 and 0.0 <= j.y <= 1.0):
                raise KeypointParseError(f"joint {i} ({JOINT_NAMES[i]}) visible but out of range")

    @classmethod
    def from_arrays(cls, xy, visible) -> "KeypointSet":
        """Build from (18,2) coordinates and (18,) flags, demoting out-of-range joints."""
        xy = np.asarray(xy, dtype=float)
        vis = np.asarray(visible, dtype=bool)
        joints = []
        for (x, y), v in zip(xy, vis):
            v = bool(v) and math.isfinite(x) and math.isfinite(y) and 0 <= x <= 1 and 0 <= y <= 1
            joints.append(Joint(float(x), float(y), v))
        return cls(tuple(joints))

    @classmethod
    def invisible(cls) -> "KeypointSet":
        return cls(tuple(Joint(0.0, 0.0, False) for _ in range(N_JOINTS)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([(j.x, j.y) for j in self.joints], dtype=float)

    @property
    def visible(self) -> np.ndarray:
        return np.array([j.visible for j in self.joints], dtype=bool)

    def to_record(self) -> str:
        return ",".join(f"{j.x:.6f}:{j.y:.6f}:{int(j.visible)}" for j in self.joints)


def parse_keypoints(record: str | Sequence) -> KeypointSet:
    """Parse 18 ``x:y:v`` triples (comma-separated text) or a sequence of triples.

    Visible joints with coordinates outside [0, 1] are demoted to invisible;
    a visible joint with a non-finite coordinate is an error.
    """
    if isinstance(record, str):
        fields = [f.strip() for f in record.strip().split(",") if f.strip()]
        triples = []
        for i, f in enumerate(fields):
            parts = f.split(":")
            if len(parts) != 3:
                raise KeypointParseError(f"joint {i}: malformed triple {f!r}")
            triples.append(parts)
    else:
        triples = list(record)
    if len(triples) != N_JOINTS:
        raise KeypointParseError(f"expected {N_JOINTS} joints, got {len(triples)}")
    joints = []
    for i, t in enumerate(triples):
        try:
            x, y, v = t
            x, y = float(x), float(y)
            v = _parse_flag(v)
        except (TypeError, ValueError) as exc:
            raise KeypointParseError(f"joint {i}: malformed triple {t!r}") from exc
        if v and not (math.isfinite(x) and math.isfinite(y)):
            raise KeypointParseError(f"joint {i}: non-finite coordinate with visible=true")
        if v and not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            v = False
        joints.append(Joint(x, y, v))
    return KeypointSet(tuple(joints))


def _parse_flag(v) -> bool:
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    s = str(v).strip().lower()
    if s in ("1", "true", "t"):
        return True
    if s in ("0", "false", "f"):
        return False
    raise ValueError(f"bad visibility flag {v!r}")


def parse_keypoint_line(line: str) -> tuple[str, KeypointSet]:
    """``image_id,x:y:v,...`` -> (image_id, KeypointSet)."""
    image_id, sep, rest = line.strip().partition(",")
    if not sep or not image_id:
        raise KeypointParseError(f"malformed record {line[:40]!r}: missing image_id")
    return image_id, parse_keypoints(rest)


def format_keypoint_line(image_id: str, kp: KeypointSet) -> str:
    return f"{image_id},{kp.to_record()}"


def read_keypoint_file(path) -> dict[str, KeypointSet]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                image_id, kp = parse_keypoint_line(line)
            except KeypointParseError as exc:
                raise KeypointParseError(f"{path}:{lineno}: {exc}") from None
            out[image_id] = kp
    return out


def write_keypoint_file(path, records: Sequence[tuple[str, KeypointSet]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_id, kp in records:
            fh.write(format_keypoint_line(image_id, kp) + "\n")


def hue_colors(n: int) -> tuple[tuple[float, float, float], ...]:
    return tuple(colorsys.hsv_to_rgb(i / n, 1.0, 1.0) for i in range(n))


@dataclass(frozen=True)
class LimbSchema:
    limbs: tuple[tuple[int, int, tuple[float, float, float]], ...] = field(
        default_factory=lambda: tuple((a, b, c) for (a, b), c in zip(COCO_LIMBS, hue_colors(len(COCO_LIMBS)))))
    joint_radius: int = 1
    limb_thickness: int = 3

    def __post_init__(self):
        colors = [tuple(c) for _, _, c in self.limbs]
        if len(set(colors)) != len(colors):
            raise ValueError("limb colors must be pairwise distinct")
        for a, b, _ in self.limbs:
            if not (0 <= a < N_JOINTS and 0 <= b < N_JOINTS):
                raise ValueError(f"limb ({a}, {b}) has a joint index outside [0, 17]")


DEFAULT_SCHEMA = LimbSchema()


def check_dims(dims: tuple[int, int]) -> tuple[int, int]:
    h, w = int(dims[0]), int(dims[1])
    if h != 2 * w or w < 8:
        raise ValueError(f"pose dims {dims} must satisfy H = 2*W with W >= 8")
    return h, w


def to_pixel(x: float, y: float, dims: tuple[int, int]) -> tuple[int, int]:
    """Normalized (x, y) -> integer (col, row); 0 and 1 map to the edge pixel centres."""
    h, w = dims
    return int(math.floor(x * (w - 1) + 0.5)), int(math.floor(y * (h - 1) + 0.5))


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer line from (x0, y0) to (x1, y1), endpoints included."""
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def disc_offsets(radius: float) -> list[tuple[int, int]]:
    r = int(math.floor(radius))
    lim = radius * radius + 1e-9
    return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dx * dx + dy * dy <= lim]


def stamp(mask: np.ndarray, pts, offsets) -> None:
    """Set mask pixels at every point + offset, clipped to the image."""
    h, w = mask.shape
    for x, y in pts:
        for dx, dy in offsets:
            xx, yy = x + dx, y + dy
            if 0 <= xx < w and 0 <= yy < h:
                mask[yy, xx] = True


def segment_mask(p0, p1, dims, radius: float) -> np.ndarray:
    """Thick segment between two normalized points: line pixels dilated by a disc."""
    mask = np.zeros(dims, dtype=bool)
    stamp(mask, bresenham(*to_pixel(*p0, dims), *to_pixel(*p1, dims)), disc_offsets(radius))
    return mask


def disc_mask(p, dims, radius: float) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    stamp(mask, [to_pixel(*p, dims)], disc_offsets(radius))
    return mask


def rasterize_pose(kp: KeypointSet, schema: LimbSchema = DEFAULT_SCHEMA,
                   dims: tuple[int, int] = (64, 32)) -> np.ndarray:
    """Render a keypoint set to an (H, W, 3) float32 pose image in [-1, 1].

    Background is -1. Limbs with both endpoints visible are hard-edged segments in
    their schema colour (later limbs overpaint earlier); visible joints are then
    drawn as discs in ``JOINT_COLOR``. ``joint_radius=0`` disables the discs.
    """
    dims = check_dims(dims)
    img = np.full(dims + (3,), -1.0, dtype=np.float32)
    radius = (schema.limb_thickness - 1) / 2.0
    for a, b, color in schema.limbs:
        ja, jb = kp.joints[a], kp.joints[b]
        if ja.visible and jb.visible:
            img[segment_mask((ja.x, ja.y), (jb.x, jb.y), dims, radius)] = _signed(color)
    if schema.joint_radius > 0:
        for j in kp.joints:
            if j.visible:
                img[disc_mask((j.x, j.y), dims, schema.joint_radius)] = _signed(JOINT_COLOR)
    return img


def _signed(color) -> np.ndarray:
    return np.asarray(color, dtype=np.float32) * 2.0 - 1.0
