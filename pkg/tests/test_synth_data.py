import json

import numpy as np
import pytest

from pnreid.pose_skeleton import KeypointSet, disc_offsets, stamp, to_pixel
from pnreid.synth_data import (
    DOMAIN_CAMERAS, MAX_PALETTE_DISTANCE, POSE_FAMILIES, StickIdentity, SynthConfig, body_mask, build_pose,
    generate_dataset, identity_palette_distance, image_to_uint8, load_dataset, mask_iou, pose_mask_iou,
    render_stickperson, save_dataset,
)

RED = StickIdentity(0, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0))
GRAY = DOMAIN_CAMERAS["A"][0]


@pytest.fixture(scope="module")
def dataset10():
    return generate_dataset(SynthConfig(n_identities=10, n_train_identities=5, images_per_identity=8, seed=0))


def test_render_is_deterministic():
    kp = build_pose(POSE_FAMILIES["front_stand"])
    assert np.array_equal(render_stickperson(RED, kp, GRAY), render_stickperson(RED, kp, GRAY))


def test_invisible_pose_is_pure_background():
    img = render_stickperson(RED, KeypointSet.invisible(), GRAY)
    assert (img == np.float32(GRAY[0]) * 2 - 1).all() or np.allclose(img, np.asarray(GRAY) * 2 - 1)
    assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1


def test_torso_pixels_are_red_dominant():
    kp = build_pose(POSE_FAMILIES["front_stand"])
    img = render_stickperson(RED, kp, GRAY)
    h, w = img.shape[:2]
    # the neck -> right hip torso segment, scanned on its own centre line past the head disc
    neck, rhip = kp.joints[1], kp.joints[8]
    x0, y0 = to_pixel(neck.x, neck.y, (h, w))
    x1, y1 = to_pixel(rhip.x, rhip.y, (h, w))
    line = np.zeros((h, w), dtype=bool)
    n = max(abs(x1 - x0), abs(y1 - y0))
    pts = [(x0 + round((x1 - x0) * t / n), y0 + round((y1 - y0) * t / n)) for t in range(n // 4, n - 1)]
    stamp(line, pts, disc_offsets(0))
    px = img[line]
    assert len(px) > 5
    assert (px[:, 0] > px[:, 1]).all() and (px[:, 0] > px[:, 2]).all()


def test_sample_count_and_determinism(dataset10):
    assert len(dataset10.samples) == 80
    again = generate_dataset(SynthConfig(n_identities=10, n_train_identities=5, images_per_identity=8, seed=0))
    assert [s.sample_id for s in again.samples] == [s.sample_id for s in dataset10.samples]
    assert again.identities == dataset10.identities
    assert all(np.array_equal(a.image, b.image) for a, b in zip(again.samples, dataset10.samples))


def test_palettes_are_separated(dataset10):
    vecs = [i.palette_vector() for i in dataset10.identities]
    for a in range(len(vecs)):
        for b in range(a + 1, len(vecs)):
            assert np.linalg.norm(vecs[a] - vecs[b]) >= 0.3


def test_splits_disjoint_and_covering(dataset10):
    split = dataset10.split
    ids = [s.sample_id for s in dataset10.samples]
    parts = [set(split[k]) for k in ("train", "query", "gallery")]
    assert sum(len(p) for p in parts) == len(ids)
    assert set().union(*parts) == set(ids)
    train_ids = {s.identity for s in dataset10.subset("train")}
    test_ids = {s.identity for s in dataset10.subset("query") + dataset10.subset("gallery")}
    assert not train_ids & test_ids


def test_every_sample_matches_its_pose(dataset10):
    for s in dataset10.samples:
        assert pose_mask_iou(s.image, s.keypoints) >= 0.99


def test_own_identity_is_nearest(dataset10):
    for s in dataset10.samples:
        own = identity_palette_distance(s.image, dataset10.identity(s.identity))
        assert own < 0.05
        others = [identity_palette_distance(s.image, i) for i in dataset10.identities if i.id != s.identity]
        assert own < min(others)


def test_background_has_sentinel_distance():
    img = render_stickperson(RED, KeypointSet.invisible(), GRAY)
    assert identity_palette_distance(img, RED) == MAX_PALETTE_DISTANCE


def test_disjoint_pose_iou_near_zero():
    up = build_pose(POSE_FAMILIES["front_stand"])
    xy = up.xy.copy()
    xy[:, 1] = xy[:, 1] * 0.45  # squash into the top half
    top = KeypointSet.from_arrays(xy, up.visible)
    xy2 = xy.copy()
    xy2[:, 1] += 0.55
    bottom = KeypointSet.from_arrays(xy2, up.visible)
    img = render_stickperson(RED, top, GRAY)
    assert pose_mask_iou(img, bottom) < 0.05


def test_partial_overlap_matches_pixel_sets():
    kp = build_pose(POSE_FAMILIES["front_stand"])
    xy = kp.xy.copy()
    xy[:, 0] += 0.15
    shifted = KeypointSet.from_arrays(xy, kp.visible)
    img = render_stickperson(RED, kp, GRAY)
    a = {tuple(p) for p in np.argwhere(body_mask(kp, (64, 32)))}
    b = {tuple(p) for p in np.argwhere(body_mask(shifted, (64, 32)))}
    expected = len(a & b) / len(a | b)
    got = pose_mask_iou(img, shifted)
    assert 0 < got < 1
    assert abs(got - expected) < 1e-12
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0


def test_bad_config():
    with pytest.raises(ValueError):
        SynthConfig(n_identities=0).validate()
    with pytest.raises(ValueError, match="pose family"):
        SynthConfig(pose_bank=("moonwalk",)).validate()


def test_save_load_round_trip(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path)
    back = load_dataset(tmp_path)
    assert back.split == small_dataset.split
    assert back.identities == small_dataset.identities
    for a, b in zip(back.samples, small_dataset.samples):
        assert a.sample_id == b.sample_id and a.identity == b.identity and a.camera == b.camera
        assert np.array_equal(image_to_uint8(a.image), image_to_uint8(b.image))
        assert np.allclose(a.image, b.image, atol=1e-6)
    meta = json.loads((tmp_path / "split.json").read_text())
    assert len(meta["samples"]) == len(small_dataset.samples)
