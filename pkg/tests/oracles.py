"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch


def central_difference_errors(loss_fn, module: torch.nn.Module, eps: float = 1e-6,
                              floor_fraction: float = 1e-6) -> dict[str, float]:
    """Relative error per parameter tensor between autograd and central differences.

    ``loss_fn()`` must return a scalar float64 tensor and be a pure function of
    the module parameters. Relative error is ||g - fd|| / max(||g|| + ||fd||, floor)
    with floor = floor_fraction * (total gradient norm). The floor keeps a tensor
    whose true gradient is structurally zero (an offset cancelled by a later
    normalisation) from dividing difference noise by difference noise.
    """
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    total = math.sqrt(sum(float(p.grad.norm()) ** 2 for p in module.parameters() if p.grad is not None))
    floor = max(floor_fraction * total, 1e-300)
    errors = {}
    for name, p in module.named_parameters():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = loss_fn().item()
                flat[k] = orig - eps
                down = loss_fn().item()
                flat[k] = orig
                nflat[k] = (up - down) / (2 * eps)
        diff = (analytic - numeric).norm().item()
        scale = analytic.norm().item() + numeric.norm().item()
        errors[name] = diff / max(scale, floor)
    return errors


def brute_force_cmc_map(D, q_labels, q_cams, g_labels, g_cams, cross_camera: bool = True):
    """CMC / mAP written from the definitions with plain loops and sorted tuples."""
    nq, ng = len(D), len(D[0])
    cmc_counts = [0] * ng
    aps = []
    for i in range(nq):
        ranked = sorted(range(ng), key=lambda j: (float(D[i][j]), j))
        kept = [j for j in ranked if not (cross_camera and g_labels[j] == q_labels[i]
                                          and g_cams[j] == q_cams[i])]
        rel = [g_labels[j] == q_labels[i] for j in kept]
        if not any(rel):
            continue
        hits, precisions = 0, []
        for pos, r in enumerate(rel, start=1):
            if r:
                hits += 1
                precisions.append(hits / pos)
        aps.append(math.fsum(precisions) / len(precisions))
        first = rel.index(True)
        for k in range(first, ng):
            cmc_counts[k] += 1
    n = len(aps)
    cmc = [c / n for c in cmc_counts] if n else [0.0] * ng
    return cmc, (math.fsum(aps) / n if n else 0.0), aps


def best_two_partition(points):
    """Exhaustive minimum-inertia split of 1-D points into two non-empty groups."""
    pts = list(points)
    best = (math.inf, None)
    for mask in itertools.product((0, 1), repeat=len(pts)):
        if len(set(mask)) < 2:
            continue
        groups = [[p for p, m in zip(pts, mask) if m == g] for g in (0, 1)]
        inertia = sum(sum((p - sum(g) / len(g)) ** 2 for p in g) for g in groups)
        if inertia < best[0] - 1e-15:
            best = (inertia, groups)
    return best


def adjusted_rand(a, b) -> float:
    """Adjusted Rand index from the pair-counting contingency table."""
    a, b = np.asarray(a), np.asarray(b)
    la, ia = np.unique(a, return_inverse=True)
    lb, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(la), len(lb)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    comb = lambda x: x * (x - 1) / 2  # noqa: E731
    sum_cells = comb(table).sum()
    sum_a, sum_b = comb(table.sum(1)).sum(), comb(table.sum(0)).sum()
    expected = sum_a * sum_b / comb(len(a))
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def dda_line(x0: int, y0: int, x1: int, y1: int) -> set[tuple[int, int]]:
    """Grid walk along the major axis, rounding the exact minor coordinate."""
    n = max(abs(x1 - x0), abs(y1 - y0))
    if n == 0:
        return {(x0, y0)}
    return {(x0 + round((x1 - x0) * t / n), y0 + round((y1 - y0) * t / n)) for t in range(n + 1)}
