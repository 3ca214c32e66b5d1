import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from diffuld.bootstrap import (AugConfig, BootstrapConfig, CorrespondencePair, SimilarityTransform,
                               bootstrap_train, correspondence_field, correspondence_nll, detector_bce,
                               make_pair, mnn_targets, warp_image)
from diffuld.losslog import trend_decreasing
from diffuld.model import ExtractConfig, LandmarkNet, NetConfig

IDENTITY = AugConfig(max_angle_deg=0.0, flip_prob=0.0)


def _pair(image, transform):
    h, w = image.shape[:2]
    tgt, mask = correspondence_field(transform, h, w)
    return CorrespondencePair(image, warp_image(image, transform), transform, mask, tgt)


def test_identity_bounds_give_identity(rng):
    img = rng.random((12, 10, 3)).astype(np.float32)
    pair = make_pair(img, 5, IDENTITY)
    assert pair.transform.is_identity and pair.mask.all()
    np.testing.assert_array_equal(pair.image_aug, img)


def test_pure_flip_maps_x_to_w_minus_1_minus_x(rng):
    pair = make_pair(rng.random((8, 11, 3)).astype(np.float32), 0, AugConfig(0.0, 1.0))
    assert pair.transform.flip
    pts = np.array([[0, 0], [3, 5], [10, 7]], dtype=float)
    np.testing.assert_allclose(pair.transform.apply(pts), [[10, 0], [7, 5], [0, 7]], atol=1e-12)
    np.testing.assert_array_equal(pair.image_aug, pair.image[:, ::-1])


def test_quarter_turn_square_image(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    t = SimilarityTransform(angle=math.pi / 2, cx=7.5, cy=7.5)
    pair = _pair(img, t)
    assert pair.mask.all()
    corners = np.array([[0, 0], [15, 0], [15, 15], [0, 15]], dtype=float)
    np.testing.assert_allclose(t.apply(corners), [[15, 0], [15, 15], [0, 15], [0, 0]], atol=1e-12)
    np.testing.assert_array_equal(pair.image_aug, np.rot90(img, k=-1))


def test_mask_consistency(rng):
    for seed in range(5):
        pair = make_pair(rng.random((20, 20, 3)).astype(np.float32), seed, AugConfig(30.0, 0.5, (0.8, 1.2), 2.0))
        ys, xs = np.nonzero(pair.mask)
        q = np.stack([xs, ys], axis=1).astype(float)
        back = pair.transform.inverse_apply(pair.transform.apply(q))
        assert np.abs(back - q).max() <= 0.5
        r = np.rint(pair.target_xy[pair.mask])
        assert r.min() >= 0 and r.max() <= 19


def test_scale_must_be_positive():
    with pytest.raises(ValueError):
        SimilarityTransform(scale=0.0)


# --------------------------------------------------------------------------
# losses


def test_bce_zero_when_predictions_match_binary_targets(rng):
    img = rng.random((6, 6, 3)).astype(np.float32)
    pair = make_pair(img, 0, IDENTITY)
    t = torch.from_numpy((rng.random((6, 6)) > 0.5).astype(np.float64))
    assert detector_bce(t, t, pair, t).item() == pytest.approx(0.0, abs=1e-12)


def test_bce_half_prediction_is_ln2(rng):
    pair = make_pair(rng.random((6, 6, 3)).astype(np.float32), 0, IDENTITY)
    h = torch.full((6, 6), 0.5, dtype=torch.float64)
    t = torch.from_numpy(np.indices((6, 6)).sum(0) % 2).double()
    assert detector_bce(h, h, pair, t).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_bce_nonnegative_and_empty_mask(rng):
    img = rng.random((6, 6, 3)).astype(np.float32)
    pair = make_pair(img, 1, AugConfig(30.0, 0.5))
    for _ in range(5):
        h, ha, t = (torch.from_numpy(rng.random((6, 6))) for _ in range(3))
        assert detector_bce(h, ha, pair, t.round()).item() >= 0
    empty = CorrespondencePair(img, img, SimilarityTransform.identity(6, 6), np.zeros((6, 6), bool),
                               np.zeros((6, 6, 2)))
    with pytest.raises(ValueError):
        detector_bce(h, ha, empty, t)


def test_nll_limit_case_near_zero(rng):
    pair = make_pair(rng.random((4, 4, 3)).astype(np.float32), 0, IDENTITY)
    vol = torch.eye(16, dtype=torch.float64).reshape(16, 4, 4)
    assert correspondence_nll(vol, vol, pair, temperature=0.01).item() < 1e-10


def test_nll_uniform_descriptors_give_log_n(rng):
    pair = make_pair(rng.random((5, 6, 3)).astype(np.float32), 0, IDENTITY)
    vol = F.normalize(torch.ones(8, 5, 6, dtype=torch.float64), dim=0)
    assert correspondence_nll(vol, vol, pair, 0.1).item() == pytest.approx(math.log(30), abs=1e-12)


def test_nll_decreases_with_true_similarity(rng):
    pair = make_pair(rng.random((4, 4, 3)).astype(np.float32), 0, IDENTITY)
    vol = F.normalize(torch.from_numpy(rng.standard_normal((8, 4, 4))), dim=0)
    base = correspondence_nll(vol, vol, pair, 0.5).item()
    # push every source descriptor a bit towards its own match only: raise <f(q), f'(q)>
    boosted = vol * 1.5
    assert correspondence_nll(boosted, vol, pair, 0.5).item() < base
    with pytest.raises(ValueError):
        correspondence_nll(vol, vol, pair, 0.0)


def test_nll_gradient_matches_finite_differences(rng):
    pair = make_pair(rng.random((4, 4, 3)).astype(np.float32), 3, AugConfig(30.0, 0.5))
    vol = torch.from_numpy(rng.standard_normal((8, 4, 4)))
    vol_a = torch.from_numpy(rng.standard_normal((8, 4, 4)))
    x = torch.cat([vol, vol_a]).requires_grad_(True)

    def loss(t):
        return correspondence_nll(t[:8], t[8:], pair, 0.3)

    loss(x).backward()
    g = x.grad.numpy().ravel()
    fd = np.zeros_like(g)
    eps = 1e-6
    flat = x.detach().clone().view(-1)
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += eps
        down[i] -= eps
        fd[i] = (loss(up.view_as(x)).item() - loss(down.view_as(x)).item()) / (2 * eps)
    big = np.maximum(np.abs(g), np.abs(fd)) > 1e-7
    rel = np.abs(g - fd)[big] / np.maximum(np.abs(g), np.abs(fd))[big]
    assert rel.max() < 1e-4


def test_mnn_targets_identity_pair_orthogonal_descriptors(rng):
    pair = make_pair(rng.random((4, 4, 3)).astype(np.float32), 0, IDENTITY)
    vol = torch.eye(16).reshape(16, 4, 4)
    np.testing.assert_array_equal(mnn_targets(vol, vol, pair).numpy(), np.ones((4, 4)))
    flat = torch.ones(16, 4, 4)
    assert mnn_targets(flat, flat, pair).sum() <= 1


# --------------------------------------------------------------------------
# training


@pytest.fixture(scope="module")
def trained(small_world):
    torch.manual_seed(0)
    net = LandmarkNet(small_world.adapter, NetConfig(), seed=0)
    cfg = BootstrapConfig(iterations=300, batch_size=4, lr=1e-3, seed=0)
    return bootstrap_train(small_world, net, cfg, k=6)


def test_bootstrap_loss_goes_down(trained):
    _, _, report = trained
    total = report.series("total", "bootstrap")
    assert len(total) == 300
    assert trend_decreasing(total, 0.1)
    assert np.median(total[-30:]) < np.median(total[:30])


def test_bootstrap_every_image_has_keypoints(trained, small_world):
    _, X, _ = trained
    assert len(X) == len(small_world)
    assert all(len(r.points) >= 1 for r in X.records)
    assert all(len(r.points) <= ExtractConfig().max_keypoints for r in X.records)
    assert X.epoch == -1


def test_bootstrap_is_deterministic(small_world):
    outs = []
    for _ in range(2):
        net = LandmarkNet(small_world.adapter, NetConfig(), seed=1)
        _, X, rep = bootstrap_train(small_world, net, BootstrapConfig(iterations=4, seed=2), k=6)
        outs.append((X, rep))
    (a, ra), (b, rb) = outs
    assert ra.records == rb.records
    for p, q in zip(a.records, b.records):
        np.testing.assert_array_equal(p.points, q.points)
        np.testing.assert_array_equal(p.descriptors, q.descriptors)


def test_bootstrap_rejects_empty(small_world):
    from diffuld.data import ImageBank
    empty = ImageBank([], [], small_world.adapter)
    with pytest.raises(ValueError):
        bootstrap_train(empty, LandmarkNet(small_world.adapter), BootstrapConfig(iterations=1), k=6)
