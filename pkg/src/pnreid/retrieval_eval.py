"""Max fusion, Euclidean ranking and CMC / mAP evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class EvalProtocol:
    cross_camera_filter: bool = True
    multi_query: bool = False


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    per_query_ap: list[float]
    protocol: EvalProtocol
    n_queries: int
    n_excluded: int
    n_gallery: int = 0

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_dict(self, ranks: Sequence[int] | None = None) -> dict:
        ranks = ranks if ranks is not None else range(1, len(self.cmc) + 1)
        return {
            "protocol": asdict(self.protocol),
            "ranks": [{"k": int(k), "acc": round(float(self.cmc[k - 1]), 10)} for k in ranks
                      if k <= len(self.cmc)],
            "map": round(float(self.map), 10),
            "n_queries": int(self.n_queries),
            "n_excluded": int(self.n_excluded),
            "n_gallery": int(self.n_gallery),
            "per_query_ap": [round(float(a), 10) for a in self.per_query_ap],
        }


def fuse_max(vectors) -> np.ndarray:
    """Element-wise maximum of one or more equal-length vectors."""
    vs = [np.asarray(v, dtype=float) for v in vectors]
    if not vs:
        raise ValueError("fuse_max needs at least one vector")
    if any(v.shape != vs[0].shape for v in vs):
        raise ValueError(f"dimension mismatch: {sorted({v.shape for v in vs})}")
    return np.max(np.stack(vs), axis=0)


def pairwise_euclidean(Q, G) -> np.ndarray:
    Q, G = np.atleast_2d(np.asarray(Q, dtype=float)), np.atleast_2d(np.asarray(G, dtype=float))
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {G.shape[1]}")
    # explicit differences rather than the expanded quadratic: exact zeros for equal vectors
    return np.sqrt(((Q[:, None, :] - G[None, :, :]) ** 2).sum(axis=2))


def average_precision(ranked_relevance) -> float | None:
    """Mean over relevant positions k of precision@k; None if nothing is relevant.

    Sums are correctly rounded (fsum) so the value does not depend on summation order.
    """
    rel = np.asarray(ranked_relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        return None
    return math.fsum((np.arange(1, len(hits) + 1) / (hits + 1)).tolist()) / len(hits)


def cmc_map(distmat, q_labels, q_cams, g_labels, g_cams,
            protocol: EvalProtocol = EvalProtocol(), max_rank: int | None = None) -> EvalReport:
    """CMC curve and mAP over queries with at least one valid gallery match.

    Gallery items sharing both identity and camera with the query are dropped
    when ``cross_camera_filter`` is set. Ties in distance go to the lower
    gallery index.
    """
    D = np.asarray(distmat, dtype=float)
    q_labels, q_cams = np.asarray(q_labels), np.asarray(q_cams)
    g_labels, g_cams = np.asarray(g_labels), np.asarray(g_cams)
    nq, ng = D.shape
    if len(q_labels) != nq or len(q_cams) != nq or len(g_labels) != ng or len(g_cams) != ng:
        raise ValueError("label/camera arrays do not match the distance matrix")
    max_rank = ng if max_rank is None else max_rank
    cmc_sum = np.zeros(max_rank)
    aps = []
    excluded = 0
    for i in range(nq):
        order = np.argsort(D[i], kind="stable")
        if protocol.cross_camera_filter:
            keep = ~((g_labels[order] == q_labels[i]) & (g_cams[order] == q_cams[i]))
            order = order[keep]
        rel = g_labels[order] == q_labels[i]
        ap = average_precision(rel)
        if ap is None:
            excluded += 1
            continue
        first = int(np.argmax(rel))
        if first < max_rank:
            cmc_sum[first:] += 1
        aps.append(ap)
    n = len(aps)
    cmc = cmc_sum / n if n else np.zeros(max_rank)
    return EvalReport(cmc, math.fsum(aps) / n if n else 0.0, aps, protocol, n, excluded, ng)


def pool_multi_query(features, labels, cams):
    """Max-pool query features sharing (identity, camera); groups in first-seen order."""
    features = np.asarray(features)
    keys: dict[tuple, list[int]] = {}
    for i, key in enumerate(zip(np.asarray(labels).tolist(), np.asarray(cams).tolist())):
        keys.setdefault(key, []).append(i)
    pooled = np.stack([fuse_max(features[idx]) for idx in keys.values()])
    lab = np.array([k[0] for k in keys])
    cam = np.array([k[1] for k in keys])
    return pooled, lab, cam


def evaluate_features(q_feat, q_labels, q_cams, g_feat, g_labels, g_cams,
                      protocol: EvalProtocol = EvalProtocol()) -> EvalReport:
    if protocol.multi_query:
        q_feat, q_labels, q_cams = pool_multi_query(q_feat, q_labels, q_cams)
    return cmc_map(pairwise_euclidean(q_feat, g_feat), q_labels, q_cams, g_labels, g_cams, protocol)


@dataclass(frozen=True)
class FusionConfig:
    """Which feature branches enter the max fusion.

    ``n_poses`` selects the first n canonical poses; 0 disables backbone B.
    """
    use_backbone_a: bool = True
    n_poses: int = 8

    def __post_init__(self):
        if not self.use_backbone_a and self.n_poses == 0:
            raise ValueError("at least one feature branch must be enabled")


def pipeline_features(images: np.ndarray, backbone_a, backbone_b, generator, canon,
                      fusion: FusionConfig = FusionConfig()) -> np.ndarray:
    """Fused features: 1 vector from backbone A plus one per canonical-pose synthesis from B."""
    from .gan_training import synthesize_batch
    from .reid_features import extract_features

    images = np.asarray(images, dtype=np.float32)
    parts = []
    if fusion.use_backbone_a:
        parts.append(extract_features(images, backbone_a)[:, None, :])
    if fusion.n_poses > 0:
        sub = canon.subset(range(fusion.n_poses))
        synth = synthesize_batch(images, sub, generator)
        n, k = synth.shape[:2]
        fb = extract_features(synth.reshape((n * k,) + images.shape[1:]), backbone_b)
        parts.append(fb.reshape(n, k, -1))
    return np.concatenate(parts, axis=1).max(axis=1)


def evaluate_pipeline(query, gallery, backbone_a, backbone_b, generator, canon,
                      protocol: EvalProtocol = EvalProtocol(),
                      fusion: FusionConfig = FusionConfig()) -> EvalReport:
    """``query``/``gallery`` are (images, labels, cams) triples. Models are only read."""
    qi, ql, qc = query
    gi, gl, gc = gallery
    qf = pipeline_features(qi, backbone_a, backbone_b, generator, canon, fusion)
    gf = pipeline_features(gi, backbone_a, backbone_b, generator, canon, fusion)
    return evaluate_features(qf, ql, qc, gf, gl, gc, protocol)
