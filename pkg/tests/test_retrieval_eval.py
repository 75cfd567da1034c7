import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_cmc_map
from pnreid.canonical_poses import select_canonical_poses
from pnreid.networks import ArchConfig, init_params
from pnreid.gan_training import synthesize_batch
from pnreid.reid_features import BackboneConfig, extract_features, init_backbone
from pnreid.retrieval_eval import (
    EvalProtocol, FusionConfig, average_precision, cmc_map, evaluate_features, evaluate_pipeline, fuse_max,
    pairwise_euclidean, pipeline_features, pool_multi_query,
)

vec = arrays(np.float64, 5, elements=st.floats(-10, 10))


def test_fuse_max_examples():
    assert fuse_max([[1, 2], [2, 1]]).tolist() == [2, 2]
    v = np.array([0.3, -1.0, 4.0])
    assert np.array_equal(fuse_max([v] * 5), v)
    with pytest.raises(ValueError, match="mismatch"):
        fuse_max([[1, 2], [1, 2, 3]])
    with pytest.raises(ValueError):
        fuse_max([])


@settings(max_examples=100)
@given(vec, vec, vec)
def test_fuse_max_algebra(a, b, c):
    assert np.array_equal(fuse_max([a, b]), fuse_max([b, a]))
    assert np.array_equal(fuse_max([fuse_max([a, b]), c]), fuse_max([a, fuse_max([b, c])]))
    assert np.array_equal(fuse_max([a, a]), a)
    out = fuse_max([a, b, c])
    scan = [max(a[i], b[i], c[i]) for i in range(len(a))]
    assert out.tolist() == scan
    assert (out >= a).all() and (out >= b).all() and (out >= c).all()


def test_distance_cases(rng):
    assert pairwise_euclidean([[0, 0]], [[3, 4]])[0, 0] == 5
    x = rng.normal(size=(3, 4))
    assert not np.diag(pairwise_euclidean(x, x)).any()
    Q, G = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    D = pairwise_euclidean(Q, G)
    for i in range(3):
        for j in range(5):
            s = 0.0
            for k in range(4):
                s += (Q[i, k] - G[j, k]) ** 2
            assert abs(D[i, j] - s ** 0.5) < 1e-9
    with pytest.raises(ValueError):
        pairwise_euclidean(Q, G[:, :3])


def test_average_precision_cases():
    assert abs(average_precision([1, 0, 1, 0]) - (1 / 1 + 2 / 3) / 2) < 1e-12
    assert average_precision([1, 1, 1]) == 1.0
    assert abs(average_precision([0, 0, 1]) - 1 / 3) < 1e-12
    assert average_precision([0, 0]) is None


def test_perfect_ranking():
    D = np.array([[0.1, 0.9], [0.8, 0.2]])
    r = cmc_map(D, [0, 1], [0, 0], [0, 1], [1, 1])
    assert r.rank(1) == 1.0 and r.map == 1.0


def test_single_query_hand_case():
    D = np.array([[0.1, 0.2, 0.3, 0.4]])
    r = cmc_map(D, [5], [0], [5, 9, 5, 9], [1, 1, 1, 1])
    assert abs(r.map - 0.8333333333) < 1e-9
    assert r.cmc.tolist() == [1, 1, 1, 1]


def random_instance(rng, nq=20, ng=50, n_ids=8, n_cams=3, ties=False):
    D = rng.uniform(size=(nq, ng))
    if ties:
        D = np.round(D * 4) / 4
    return (D, rng.integers(n_ids, size=nq), rng.integers(n_cams, size=nq),
            rng.integers(n_ids, size=ng), rng.integers(n_cams, size=ng))


@pytest.mark.parametrize("ties", [False, True])
@pytest.mark.parametrize("cross", [True, False])
def test_matches_brute_force(rng, ties, cross):
    for _ in range(10):
        D, ql, qc, gl, gc = random_instance(rng, ties=ties)
        r = cmc_map(D, ql, qc, gl, gc, EvalProtocol(cross_camera_filter=cross))
        cmc, mean_ap, aps = brute_force_cmc_map(D, ql, qc, gl, gc, cross)
        assert r.cmc.tolist() == cmc
        assert r.map == mean_ap
        assert r.per_query_ap == aps


def test_cmc_properties(rng):
    D, ql, qc, gl, gc = random_instance(rng)
    r = cmc_map(D, ql, qc, gl, gc)
    assert (np.diff(r.cmc) >= 0).all()
    assert ((0 <= r.cmc) & (r.cmc <= 1)).all()
    assert r.cmc[-1] == 1.0
    assert r.n_queries + r.n_excluded == len(ql)


def test_cross_camera_filter_excludes_same_camera_matches():
    D = np.array([[0.1, 0.2]])
    r = cmc_map(D, [1], [0], [1, 2], [0, 0])
    assert r.n_queries == 0 and r.n_excluded == 1
    r = cmc_map(D, [1], [0], [1, 2], [0, 0], EvalProtocol(cross_camera_filter=False))
    assert r.rank(1) == 1.0


def test_scale_invariance(rng):
    q, g = rng.normal(size=(6, 8)), rng.normal(size=(15, 8))
    for s in (0.001, 3.0, 1e4):
        assert np.array_equal(np.argsort(pairwise_euclidean(q, g), axis=1, kind="stable"),
                              np.argsort(pairwise_euclidean(q * s, g * s), axis=1, kind="stable"))


def test_ties_go_to_lower_gallery_index():
    D = np.array([[0.5, 0.5, 0.5]])
    r = cmc_map(D, [1], [0], [2, 1, 1], [1, 1, 1])
    assert r.cmc.tolist() == [0, 1, 1]
    # reorder the gallery so the relevant items come first: ties now favour them
    r = cmc_map(D, [1], [0], [1, 1, 2], [1, 1, 1])
    assert r.cmc.tolist() == [1, 1, 1]


def test_gallery_permutation(rng):
    D, ql, qc, gl, gc = random_instance(rng)
    perm = rng.permutation(D.shape[1])
    base = cmc_map(D, ql, qc, gl, gc)
    moved = cmc_map(D[:, perm], ql, qc, gl[perm], gc[perm])
    # distinct distances: order of the gallery is irrelevant
    assert moved.cmc.tolist() == base.cmc.tolist() and moved.per_query_ap == base.per_query_ap
    # with ties, the permuted gallery is ranked by its own index order
    D, ql, qc, gl, gc = random_instance(rng, ties=True)
    Dp, glp, gcp = D[:, perm], gl[perm], gc[perm]
    cmc, _, aps = brute_force_cmc_map(Dp, ql, qc, glp, gcp)
    r = cmc_map(Dp, ql, qc, glp, gcp)
    assert r.cmc.tolist() == cmc and r.per_query_ap == aps


def test_multi_query_pooling():
    feats = np.array([[1.0, 0.0], [0.0, 2.0], [5.0, 5.0]])
    pooled, lab, cam = pool_multi_query(feats, [3, 3, 4], [0, 0, 1])
    assert pooled.tolist() == [[1.0, 2.0], [5.0, 5.0]]
    assert lab.tolist() == [3, 4] and cam.tolist() == [0, 1]
    r = evaluate_features(feats, [3, 3, 4], [0, 0, 1], np.array([[1.0, 2.0], [5.0, 5.0]]), [3, 4], [1, 0],
                          EvalProtocol(multi_query=True))
    assert r.n_queries == 2 and r.map == 1.0


@pytest.fixture(scope="module")
def tiny_models(small_dataset):
    canon = select_canonical_poses([(s.keypoints, s.sample_id) for s in small_dataset.samples], K=8)
    gen, _ = init_params(ArchConfig(base_channels=4, n_res_blocks=1), 0)
    cfg = BackboneConfig(base_channels=4, feature_dim=16)
    return canon, gen, init_backbone(cfg, 3, 0), init_backbone(cfg, 3, 1)


def _triple(samples):
    return (np.stack([s.image for s in samples]), [s.identity for s in samples], [s.camera for s in samples])


def test_backbone_b_disabled_equals_backbone_a(small_dataset, tiny_models):
    canon, gen, a, b = tiny_models
    q, g = _triple(small_dataset.subset("query")), _triple(small_dataset.subset("gallery"))
    r = evaluate_pipeline(q, g, a, b, gen, canon, fusion=FusionConfig(n_poses=0))
    direct = evaluate_features(extract_features(q[0], a), q[1], q[2], extract_features(g[0], a), g[1], g[2])
    assert r.cmc.tolist() == direct.cmc.tolist() and r.map == direct.map


def test_one_pose_fuses_two_vectors(small_dataset, tiny_models):
    canon, gen, a, b = tiny_models
    imgs = _triple(small_dataset.subset("query"))[0][:3]
    got = pipeline_features(imgs, a, b, gen, canon, FusionConfig(n_poses=1))
    synth = synthesize_batch(imgs, canon.subset([0]), gen)[:, 0]
    expected = np.maximum(extract_features(imgs, a), extract_features(synth, b))
    assert np.array_equal(got, expected)
    all8 = pipeline_features(imgs, a, b, gen, canon, FusionConfig(n_poses=8))
    parts = [extract_features(imgs, a)] + [extract_features(s, b) for s in
                                           synthesize_batch(imgs, canon, gen).transpose(1, 0, 2, 3, 4)]
    assert np.array_equal(all8, np.max(np.stack(parts), axis=0))


def test_fusion_config_rejects_empty():
    with pytest.raises(ValueError):
        FusionConfig(use_backbone_a=False, n_poses=0)
