"""Pose embedding, seeded K-means and medoid selection of canonical poses."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .pose_skeleton import KeypointSet, LimbSchema, DEFAULT_SCHEMA, rasterize_pose


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    size: tuple[int, int] = (16, 8)
    normalize: bool = True


def embed_pose(pose: np.ndarray, cfg: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Default pose embedder: bilinear downsample, grayscale, flatten, L2-normalize.

    Pixels are shifted to [0, 1] first so an empty pose image embeds to the zero
    vector, which is returned unnormalized.
    """
    x = torch.from_numpy((np.asarray(pose, dtype=np.float64) + 1.0) / 2.0)
    x = x.permute(2, 0, 1).unsqueeze(0)
    small = F.interpolate(x, size=cfg.size, mode="bilinear", align_corners=False)
    vec = small.mean(dim=1).reshape(-1).numpy().copy()
    if cfg.normalize:
        n = np.linalg.norm(vec)
        if n > 0:
            vec = vec / n
    return vec


@dataclass
class PoseClusterModel:
    K: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    medoid_indices: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.K)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans_plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[idx]).min(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            break
        nxt = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
        nxt = min(nxt, n - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[idx].copy()


def kmeans_fit(points: Sequence[np.ndarray] | np.ndarray, K: int, seed: int = 0,
               max_iter: int = 100) -> PoseClusterModel:
    """Lloyd's algorithm from seeded k-means++ centres.

    Stops after ``max_iter`` iterations or when assignments stop changing. An
    empty cluster is reseeded at the point farthest from its current centroid.
    ``inertia_history`` records the inertia after every assignment step.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ClusteringError("kmeans_fit needs a non-empty 2-D point array")
    if K < 1:
        raise ClusteringError("K must be >= 1")
    if len(np.unique(X, axis=0)) < K:
        raise ClusteringError(f"insufficient distinct points for K={K}")
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(X, K, rng)
    if len(centers) < K:
        raise ClusteringError(f"insufficient distinct points for K={K}")

    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, centers)
        new = d2.argmin(axis=1)
        # repair empty clusters one at a time
        for c in range(K):
            if not np.any(new == c):
                own = d2[np.arange(len(X)), new]
                far = int(np.argmax(own))
                centers[c] = X[far]
                new[far] = c
                d2 = _sq_dists(X, centers)
        history.append(float(d2[np.arange(len(X)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centers = np.stack([X[assign == c].mean(axis=0) for c in range(K)])

    d2 = _sq_dists(X, centers)
    inertia = float(d2[np.arange(len(X)), assign].sum())
    medoids = np.empty(K, dtype=int)
    for c in range(K):
        members = np.flatnonzero(assign == c)
        medoids[c] = members[np.argmin(d2[members, c])]  # argmin keeps the lowest index on ties
    return PoseClusterModel(K, centers, assign, inertia, medoids, history, it)


@dataclass
class CanonicalPoseSet:
    poses: list[np.ndarray]
    source_sample_ids: list[str]
    keypoints: list[KeypointSet]
    cluster_model: PoseClusterModel | None = None
    embeddings: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.poses)

    def subset(self, indices: Sequence[int]) -> "CanonicalPoseSet":
        return CanonicalPoseSet([self.poses[i] for i in indices],
                                [self.source_sample_ids[i] for i in indices],
                                [self.keypoints[i] for i in indices], self.cluster_model)

    def to_manifest(self) -> dict:
        m = self.cluster_model
        return {
            "K": len(self.poses),
            "source_sample_ids": list(self.source_sample_ids),
            "keypoints": [kp.to_record() for kp in self.keypoints],
            "cluster_sizes": [int(s) for s in m.sizes] if m is not None else None,
            "inertia": m.inertia if m is not None else None,
            "n_iter": m.n_iter if m is not None else None,
        }


def select_canonical_poses(dataset: Sequence[tuple[KeypointSet, str]], K: int = 8, seed: int = 0,
                           dims: tuple[int, int] = (64, 32), schema: LimbSchema = DEFAULT_SCHEMA,
                           embedder: Callable[[np.ndarray], np.ndarray] = embed_pose,
                           max_iter: int = 100) -> CanonicalPoseSet:
    """Cluster the dataset's pose images and keep each cluster's medoid pose."""
    if not dataset:
        raise ClusteringError("empty pose dataset")
    images = [rasterize_pose(kp, schema, dims) for kp, _ in dataset]
    emb = np.stack([embedder(p) for p in images])
    model = kmeans_fit(emb, K, seed, max_iter)
    idx = [int(i) for i in model.medoid_indices]
    return CanonicalPoseSet([images[i] for i in idx], [dataset[i][1] for i in idx],
                            [dataset[i][0] for i in idx], model, emb)


def principal_projection(emb: np.ndarray, dims: int = 2) -> np.ndarray:
    """Project onto the leading principal axes (sign fixed by largest loading)."""
    X = emb - emb.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    axes = vt[:dims]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    signs[signs == 0] = 1
    return X @ (axes * signs[:, None]).T


def save_canonical_poses(canon: CanonicalPoseSet, root, sample_ids: Sequence[str] | None = None) -> Path:
    """Write pose PNGs, ``manifest.json`` and, with embeddings, ``projection.csv``."""
    from .synth_data import save_png

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for c, pose in enumerate(canon.poses):
        save_png(root / f"pose_{c}.png", pose)
    (root / "manifest.json").write_text(json.dumps(canon.to_manifest(), indent=2) + "\n")
    if canon.embeddings is not None and canon.cluster_model is not None:
        proj = principal_projection(canon.embeddings)
        medoids = set(int(i) for i in canon.cluster_model.medoid_indices)
        with open(root / "projection.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "pc1", "pc2", "cluster", "is_canonical"])
            for i, (x, y) in enumerate(proj):
                sid = sample_ids[i] if sample_ids is not None else str(i)
                w.writerow([sid, f"{x:.6f}", f"{y:.6f}", int(canon.cluster_model.assignments[i]),
                            int(i in medoids)])
    return root


def load_canonical_poses(root, dims: tuple[int, int] = (64, 32),
                         schema: LimbSchema = DEFAULT_SCHEMA) -> CanonicalPoseSet:
    """Rebuild the pose set from the manifest keypoints (poses are re-rasterized)."""
    from .pose_skeleton import parse_keypoints

    m = json.loads((Path(root) / "manifest.json").read_text())
    kps = [parse_keypoints(r) for r in m["keypoints"]]
    return CanonicalPoseSet([rasterize_pose(kp, schema, dims) for kp in kps],
                            list(m["source_sample_ids"]), kps)
