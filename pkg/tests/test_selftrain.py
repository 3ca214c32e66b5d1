import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffuld.clustering import update_training_set
from diffuld.data import ImageBank, generate_synthetic_dataset
from diffuld.losslog import TrainingDiverged, trend_decreasing
from diffuld.model import LandmarkNet, NetConfig, param_checksum
from diffuld.pose_proxy import PoseVAE
from diffuld.selftrain import (Schedule, _step, descriptor_contrastive, evaluate_elbo, heatmap_mse,
                               pseudo_targets, train_duld, train_duldpp, train_proxy)


def test_mse_examples(rng):
    g = torch.from_numpy(rng.random((5, 7)))
    assert heatmap_mse(g, g).item() == 0.0
    assert heatmap_mse(g + 0.1, g).item() == pytest.approx(0.01, abs=1e-12)
    h = torch.from_numpy(rng.random((5, 7)))
    assert heatmap_mse(h, g).item() == heatmap_mse(g, h).item()
    with pytest.raises(ValueError):
        heatmap_mse(g, g[:, :6])


def _desc(d_same, d_other):
    f = torch.zeros(1, 3, dtype=torch.float64)
    a, b = f.clone(), f.clone()
    a[0, 0] = d_same
    b[0, 2] = d_other
    return f, a, b


def test_descriptor_contrastive_examples():
    assert descriptor_contrastive(*_desc(0.0, 0.8), 1, 1, 2, 0.8).item() == 0.0
    assert descriptor_contrastive(*_desc(0.2, 0.5), 1, 1, 2, 0.8).item() == pytest.approx(0.5, abs=1e-9)
    with pytest.raises(ValueError):
        descriptor_contrastive(*_desc(0.2, 0.5), 1, 2, 3)
    with pytest.raises(ValueError):
        descriptor_contrastive(*_desc(0.2, 0.5), 1, 1, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_descriptor_contrastive_nonnegative(seed, m):
    r = np.random.default_rng(seed)
    f, a, b = (torch.from_numpy(r.standard_normal((4, 5))) for _ in range(3))
    assert descriptor_contrastive(f, a, b, 0, 0, 1, m).item() >= 0


def test_schedule_contract():
    with pytest.raises(ValueError):
        Schedule(margin=0.0)
    with pytest.raises(ValueError):
        Schedule(stage="pretrain")
    s = Schedule(recluster_every=5)
    assert [i for i in range(12) if s.is_recluster(i)] == [0, 5, 10]
    assert [i for i in range(12) if Schedule(recluster_every=None).is_recluster(i)] == [0]


# --------------------------------------------------------------------------
# loops


def _net(world, seed=0):
    return LandmarkNet(world.adapter, NetConfig(), seed=seed)


def _sched(**kw):
    base = dict(total_iterations=20, recluster_every=10, batch_size=4, n_init=1, learning_rate=1e-3)
    base.update(kw)
    return Schedule(**base)


def _records_equal(a, b):
    return all(np.array_equal(p.points, q.points) and np.array_equal(p.labels, q.labels)
               for p, q in zip(a.records, b.records))


def test_recluster_events_at_multiples(small_world):
    seen = []
    _, traj, rep = train_duld(None, _net(small_world), small_world, _sched(), k=6,
                              on_recluster=lambda it, net, X: seen.append(it))
    assert [it for it, _ in rep.recluster_events] == [0, 10, 20] == seen
    assert [e for _, e in rep.recluster_events] == [0, 1, 2] == [X.epoch for X in traj]
    assert all(len(r.labels) <= 6 for X in traj for r in X.records)
    assert len(rep.series("total", "duld")) == 20


def test_zero_learning_rate_keeps_trajectory(small_world):
    net = _net(small_world)
    before = param_checksum(net)
    _, traj, _ = train_duld(None, net, small_world, _sched(learning_rate=0.0), k=6)
    assert param_checksum(net) == before
    assert all(_records_equal(traj[0], X) for X in traj[1:])


def test_fixed_targets_loss_trend(small_world):
    _, traj, rep = train_duld(None, _net(small_world), small_world,
                              _sched(total_iterations=120, recluster_every=None), k=6)
    assert [it for it, _ in rep.recluster_events] == [0, 120]
    assert trend_decreasing(rep.series("total", "duld"), 0.1)


def test_stale_targets_rejected(small_world):
    X = update_training_set(None, _net(small_world), small_world, k=6)
    pseudo_targets(X, [0, 1], 2.5, 48, 48, epoch=0)
    with pytest.raises(RuntimeError, match="stale"):
        pseudo_targets(X, [0, 1], 2.5, 48, 48, epoch=1)


def test_divergence_aborts_with_last_weights(small_world):
    net = _net(small_world)
    init = copy.deepcopy(net.state_dict())
    with pytest.raises(TrainingDiverged) as exc:
        train_duld(None, net, small_world, _sched(mse_weight=float("nan")), k=6)
    assert exc.value.iteration == 0 and exc.value.stage == "duld"
    for key, v in init.items():
        assert torch.equal(exc.value.state[key], v)
    lin = torch.nn.Linear(2, 1)
    opt = torch.optim.Adam(lin.parameters())
    with pytest.raises(TrainingDiverged):
        _step(lin(torch.tensor([[float("inf"), 0.0]])).sum(), opt, lin, "proxy", 7)


def test_training_is_deterministic(small_world):
    runs = [train_duld(None, _net(small_world), small_world, _sched(total_iterations=6, recluster_every=3),
                       k=6) for _ in range(2)]
    assert runs[0][2].records == runs[1][2].records
    assert param_checksum(runs[0][0]) == param_checksum(runs[1][0])


# --------------------------------------------------------------------------
# proxy and D-ULD++


@pytest.fixture(scope="module")
def heldout(small_world):
    images, manifest = generate_synthetic_dataset(8, 6, "bimodal_right", seed=11)
    return ImageBank(images, list(manifest.entries), small_world.adapter)


def _proxy(world, seed=0, iters=40):
    net = _net(world)
    X = update_training_set(None, net, world, k=6)
    vae = PoseVAE(seed=seed)
    return net, X, vae, _sched(total_iterations=iters, stage="proxy", seed=seed)


def test_proxy_freezes_network_and_improves_heldout_elbo(small_world, heldout):
    net, X, vae, sched = _proxy(small_world)
    X_held = update_training_set(None, net, heldout, k=6)
    before_sum = param_checksum(net)
    desc_sum = param_checksum(net.descriptor)
    elbo0 = evaluate_elbo(net, vae, X_held, heldout, sched.heat_sigma)
    vae, rep = train_proxy(net, vae, X, small_world, sched)
    assert param_checksum(net) == before_sum and param_checksum(net.descriptor) == desc_sum
    assert all(p.requires_grad for p in net.parameters())
    assert evaluate_elbo(net, vae, X_held, heldout, sched.heat_sigma) < elbo0
    assert len(rep.series("elbo", "proxy")) == 40


def test_proxy_deterministic(small_world):
    outs = []
    for _ in range(2):
        net, X, vae, sched = _proxy(small_world, seed=2, iters=5)
        outs.append(param_checksum(train_proxy(net, vae, X, small_world, sched)[0]))
    assert outs[0] == outs[1]


def test_duldpp_contracts(small_world):
    net = _net(small_world)
    vae = PoseVAE(seed=0)
    desc_sum = param_checksum(net.descriptor)
    dec_sum = param_checksum(vae.decoder)
    enc_sum = param_checksum(vae.encoder)
    det_sum = param_checksum(net.detector)
    net, vae, traj, rep = train_duldpp(net, vae, None, small_world, _sched(stage="duldpp"), k=3, q=2)
    assert param_checksum(net.descriptor) == desc_sum
    assert param_checksum(vae.decoder) == dec_sum
    assert all(p.grad is None for p in vae.decoder.parameters())
    assert param_checksum(vae.encoder) != enc_sum and param_checksum(net.detector) != det_sum
    assert [e for _, e in rep.recluster_events] == [0, 1, 2]
    for X in traj:
        assert X.mode == "two_stage" and X.label_space == 6
        labels = set(np.concatenate([r.labels for r in X.records]).tolist())
        assert len(labels) <= 6 and all(r.pose_label in (0, 1) for r in X.records)


def test_duldpp_full_vae_updates_decoder(small_world):
    vae = PoseVAE(seed=0)
    dec_sum = param_checksum(vae.decoder)
    _, vae, _, _ = train_duldpp(_net(small_world), vae, None, small_world,
                                _sched(stage="duldpp", total_iterations=3, full_vae=True), k=3, q=2)
    assert param_checksum(vae.decoder) != dec_sum
