import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _oracles import finite_difference_check
from diffuld.heads import Heatmap, Keypoint, render_gaussians
from diffuld.pose_proxy import (PoseVAE, VaeConfig, decode, elbo_loss, elbo_terms, encode, kl_standard_normal,
                                latent_contrastive, reparameterize, sample_triples)

TINY = VaeConfig(height=16, width=16, latent_dim=4, channels=(2, 2, 2, 2))
# wide enough that no ReLU unit is dead, so every parameter gets a gradient
GRAD = VaeConfig(height=16, width=16, latent_dim=4, channels=(3, 3, 3, 3))


def _tiny(seed=0):
    return PoseVAE(TINY, seed=seed).double()


def _heat(rng, size=16):
    pts = [Keypoint(*rng.uniform(2, size - 3, 2)) for _ in range(3)]
    return render_gaussians(pts, 1.5, size, size)


def test_default_latent_is_64(rng):
    code = encode(_heat(rng, 48), PoseVAE())
    assert code.phi.shape == (64,) and np.isfinite(code.phi).all()


def test_inference_encode_deterministic(rng):
    vae, h = _tiny(), _heat(rng)
    a, b = encode(h, vae), encode(h, vae)
    np.testing.assert_array_equal(a.phi, b.phi)
    np.testing.assert_array_equal(a.phi, a.mu)
    assert a.eps is None


def test_training_encode_records_eps(rng):
    vae, h = _tiny(), _heat(rng)
    c = encode(h, vae, training=True, seed=3)
    np.testing.assert_allclose(c.phi, c.mu + np.exp(0.5 * c.logvar) * c.eps, atol=1e-12)
    with pytest.raises(ValueError):
        encode(np.zeros((12, 16)), vae)


def test_encoder_gradient_matches_finite_differences(rng):
    vae = PoseVAE(GRAD, seed=1).double()
    h = torch.from_numpy(_heat(rng).grid)[None, None]

    def loss():
        mu, logvar = vae.encoder(h)
        return (mu ** 2).sum() + logvar.sum()

    assert finite_difference_check(vae.encoder, loss) < 1e-4


def test_decoder_gradient_matches_finite_differences():
    vae = PoseVAE(GRAD, seed=3).double()
    phi = torch.tensor([[0.3, -0.7, 1.1, 0.2]], dtype=torch.float64)
    w = torch.rand(1, 1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert finite_difference_check(vae.decoder, lambda: (vae.decoder(phi) * w).sum()) < 1e-4


def test_decode_range_and_determinism(rng):
    vae = _tiny()
    for _ in range(5):
        phi = rng.standard_normal(4) * 3
        a, b = decode(phi, vae), decode(phi, vae)
        np.testing.assert_array_equal(a.grid, b.grid)
        assert a.grid.shape == (16, 16) and a.grid.min() >= 0 and a.grid.max() <= 1
    with pytest.raises(ValueError):
        decode(np.zeros(5), vae)


# --------------------------------------------------------------------------
# ELBO


def test_kl_standard_normal_zero():
    assert kl_standard_normal(torch.zeros(64), torch.zeros(64)).item() == 0.0


def test_kl_unit_mean_64_dims_is_32():
    assert kl_standard_normal(torch.ones(64), torch.zeros(64)).item() == pytest.approx(32.0)


def test_reconstruction_zero_for_exact_binary(rng):
    t = (rng.random((16, 16)) > 0.5).astype(np.float64)
    rec, kl = elbo_terms(Heatmap(t), Heatmap(t), torch.zeros(1, 4), torch.zeros(1, 4))
    assert rec.item() == pytest.approx(0.0, abs=1e-12) and kl.item() == 0.0
    with pytest.raises(ValueError):
        elbo_terms(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5), torch.zeros(1, 4), torch.zeros(1, 4))


def test_beta_weights_kl(rng):
    r, t = torch.full((1, 1, 4, 4), 0.3, dtype=torch.float64), torch.full((1, 1, 4, 4), 0.6, dtype=torch.float64)
    mu, lv = torch.ones(1, 4, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.float64)
    assert (elbo_loss(r, t, mu, lv, beta=2.0) - elbo_loss(r, t, mu, lv, beta=1.0)).item() == pytest.approx(2.0)


def test_kl_matches_monte_carlo(rng):
    mu = rng.standard_normal(6) * 0.7
    logvar = rng.uniform(-1, 0.5, 6)
    sd = np.exp(0.5 * logvar)
    z = mu + sd * rng.standard_normal((100_000, 6))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + logvar + math.log(2 * math.pi)).sum(1)
    log_p = -0.5 * (z ** 2 + math.log(2 * math.pi)).sum(1)
    mc = float((log_q - log_p).mean())
    closed = kl_standard_normal(torch.from_numpy(mu), torch.from_numpy(logvar)).item()
    assert abs(mc - closed) <= 0.01 * closed


def test_reparameterisation_moments():
    mu = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    logvar = torch.tensor([0.0, math.log(0.25), math.log(4.0)], dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    draws = torch.stack([reparameterize(mu, logvar, gen)[0] for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(0).numpy(), mu.numpy(), rtol=0.05)
    np.testing.assert_allclose(draws.var(0).numpy(), logvar.exp().numpy(), rtol=0.05)


def test_elbo_training_lowers_reconstruction(rng):
    vae = _tiny(4)
    h = torch.stack([torch.from_numpy(_heat(rng).grid)[None] for _ in range(6)])

    def rec():
        with torch.no_grad():
            mu, logvar = vae.encoder(h)
            return elbo_terms(vae.decoder(mu), h, mu, logvar)[0].item()

    before = rec()
    opt = torch.optim.Adam(vae.parameters(), lr=1e-2)
    gen = torch.Generator().manual_seed(0)
    for _ in range(60):
        opt.zero_grad()
        recon, mu, logvar = vae(h, gen)
        elbo_loss(recon, h, mu, logvar).backward()
        opt.step()
    assert rec() < before


# --------------------------------------------------------------------------
# latent margin loss


def _codes(d_same, d_other):
    phi = torch.zeros(1, 4, dtype=torch.float64)
    same = phi.clone()
    same[0, 0] = d_same
    other = phi.clone()
    other[0, 1] = d_other
    return phi, same, other


def test_latent_contrastive_zero_case():
    phi, same, other = _codes(0.0, 0.9)
    assert latent_contrastive(phi, same, other, 0, 0, 1, 0.8).item() == 0.0


def test_latent_contrastive_positive_term_only():
    assert latent_contrastive(*_codes(0.3, 1.0), 0, 0, 1, 0.8).item() == pytest.approx(0.3)


def test_latent_contrastive_hinge_only():
    assert latent_contrastive(*_codes(0.0, 0.5), 2, 2, 0, 0.8).item() == pytest.approx(0.3)


def test_latent_contrastive_label_preconditions():
    with pytest.raises(ValueError):
        latent_contrastive(*_codes(0.1, 0.1), 0, 1, 2)
    with pytest.raises(ValueError):
        latent_contrastive(*_codes(0.1, 0.1), 0, 0, 0)


@settings(max_examples=50, deadline=None)
# squared distances below ~1e-154 underflow, so non-zero offsets start at 1e-6
@given(st.one_of(st.just(0.0), st.floats(1e-6, 3)), st.floats(0, 3), st.floats(0.1, 2))
def test_latent_contrastive_nonnegative_and_zero_iff(ds, do, m):
    v = latent_contrastive(*_codes(ds, do), 0, 0, 1, m).item()
    assert v >= 0
    assert (v == 0) == (ds == 0 and do >= m)


def test_triples_respect_labels(rng):
    labels = np.array([0, 0, 1, 1, 1, 2])
    t = sample_triples(labels, rng)
    # the lone label-2 anchor has no positive partner
    assert set(t[:, 0].tolist()) == {0, 1, 2, 3, 4}
    assert np.all(labels[t[:, 0]] == labels[t[:, 1]]) and np.all(t[:, 0] != t[:, 1])
    assert np.all(labels[t[:, 0]] != labels[t[:, 2]])
    assert len(sample_triples(labels, rng, cap=2)) == 2
    assert len(sample_triples(np.zeros(4), rng)) == 0
