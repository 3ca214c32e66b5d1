"""Self-training loops: D-ULD, the pose proxy task and D-ULD++ step two."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .clustering import TrainingSet, update_training_set
from .heads import gaussian_grid, sample_descriptors
from .losslog import LossReport, TrainingDiverged, assert_finite_grads
from .model import ExtractConfig, LandmarkNet
from .pose_proxy import PoseVAE, elbo_terms, margin_contrastive, sample_triples

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    total_iterations: int = 2000
    recluster_every: int | None = 200  # None: cluster once, never refresh
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    margin: float = 0.8
    stage: str = "duld"
    heat_sigma: float = 2.5
    mse_weight: float = 1.0
    contrastive_weight: float = 1.0
    triple_cap: int = 64
    beta: float = 1.0
    full_vae: bool = False
    n_init: int = 4
    seed: int = 0
    extract: ExtractConfig = field(default_factory=ExtractConfig)

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.stage not in ("bootstrap", "duld", "proxy", "duldpp"):
            raise ValueError(f"unknown stage {self.stage!r}")

    def is_recluster(self, it: int) -> bool:
        return it == 0 if not self.recluster_every else it % self.recluster_every == 0


def heatmap_mse(h, g) -> torch.Tensor:
    h = torch.as_tensor(h)
    g = torch.as_tensor(g, dtype=h.dtype)
    if h.shape != g.shape:
        raise ValueError(f"shape mismatch {tuple(h.shape)} vs {tuple(g.shape)}")
    return ((h - g) ** 2).mean()


def descriptor_contrastive(f, f_same, f_other, c, c_same, c_other, margin: float = 0.8) -> torch.Tensor:
    if c != c_same:
        raise ValueError(f"positive descriptor must share the anchor's label ({c} vs {c_same})")
    if c == c_other:
        raise ValueError(f"negative descriptor must have a different label (both {c})")
    return margin_contrastive(f, f_same, f_other, margin)


def pseudo_targets(X: TrainingSet, indices, sigma: float, height: int, width: int,
                   epoch: int | None = None) -> torch.Tensor:
    """Gaussian pseudo-ground-truth heatmaps (N x H x W) from the current training set."""
    if epoch is not None and X.epoch != epoch:
        raise RuntimeError(f"stale training set: epoch {X.epoch}, expected {epoch}")
    grids = [gaussian_grid(X.records[i].points, sigma, height, width) for i in indices]
    return torch.from_numpy(np.stack(grids)).float()


def _descriptor_loss(desc: torch.Tensor, X: TrainingSet, indices, rng, sched: Schedule):
    feats, labels = [], []
    for j, i in enumerate(indices):
        rec = X.records[i]
        if len(rec.points) == 0:
            continue
        feats.append(sample_descriptors(desc[j], torch.from_numpy(rec.points).to(desc.dtype)))
        labels.append(rec.labels)
    if not feats:
        return desc.sum() * 0.0
    feats = torch.cat(feats)
    triples = sample_triples(np.concatenate(labels), rng, sched.triple_cap)
    if len(triples) == 0:
        return desc.sum() * 0.0
    t = torch.from_numpy(triples)
    return margin_contrastive(feats[t[:, 0]], feats[t[:, 1]], feats[t[:, 2]], sched.margin)


def _batch(n: int, sched: Schedule, it: int):
    rng = np.random.default_rng([sched.seed, it])
    idx = rng.choice(n, size=sched.batch_size, replace=n < sched.batch_size)
    return np.sort(idx).tolist(), rng


def _step(loss, opt, module, stage, it):
    """One Adam step; a non-finite loss or gradient aborts with the current (last finite) weights."""
    if not torch.isfinite(loss):
        _abort(module, stage, it)
    opt.zero_grad()
    loss.backward()
    if not assert_finite_grads(module):
        _abort(module, stage, it)
    opt.step()


def _abort(module, stage, it):
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    raise TrainingDiverged(stage, it, state)


class Interrupted(RuntimeError):
    """Raised by ``stop_after`` to simulate a killed run."""


@dataclass
class StageState:
    """Everything needed to resume a loop: iteration, optimiser state, training set."""

    iteration: int
    optimizer: dict
    training_set: TrainingSet


def train_duld(X: TrainingSet | None, net: LandmarkNet, bank, sched: Schedule, k: int,
               report: LossReport | None = None, on_recluster=None, checkpoint_fn=None,
               resume: StageState | None = None, stop_after: int | None = None):
    """Alternate flat re-clustering with Adam steps on heatmap MSE + descriptor margin loss.

    ``on_recluster(iteration, net, X)`` runs after every training-set refresh
    (including the stage-end one); ``checkpoint_fn(iteration, net, opt, X)``
    after every refresh inside the loop. Returns (net, trajectory, report).
    """
    report = report or LossReport()
    opt = torch.optim.Adam(net.parameters(), lr=sched.learning_rate, betas=tuple(sched.adam_betas))
    trajectory = []
    start = 0
    if resume is not None:
        opt.load_state_dict(resume.optimizer)
        X, start = resume.training_set, resume.iteration
        trajectory.append(X)
    net.train()
    h, w = bank.height, bank.width
    for it in range(start, sched.total_iterations):
        if sched.is_recluster(it) and not (resume is not None and it == start):
            X = _refresh(X, net, bank, k, sched, it, report, trajectory, on_recluster)
            if checkpoint_fn is not None:
                checkpoint_fn(it, net, opt, X)
        if stop_after is not None and it >= stop_after:
            raise Interrupted(f"stopped at iteration {it}")
        idx, rng = _batch(len(bank), sched, it)
        heat, desc = net(bank.raw(idx))
        target = pseudo_targets(X, idx, sched.heat_sigma, h, w, epoch=trajectory[-1].epoch)
        mse = heatmap_mse(heat[:, 0], target)
        con = _descriptor_loss(desc, X, idx, rng, sched)
        loss = sched.mse_weight * mse + sched.contrastive_weight * con
        _step(loss, opt, net, "duld", it)
        report.log(it, "duld", "mse", mse.item())
        report.log(it, "duld", "contrastive", con.item())
        report.log(it, "duld", "total", loss.item())
    X = _refresh(X, net, bank, k, sched, sched.total_iterations, report, trajectory, on_recluster)
    net.eval()
    return net, trajectory, report


def _refresh(X, net, bank, k, sched, it, report, trajectory, on_recluster, q=1, encoder=None):
    was = net.training
    X = update_training_set(X, net, bank, k, q=q, encoder=encoder, extract_cfg=sched.extract,
                            seed=sched.seed, n_init=sched.n_init)
    net.train(was)
    report.recluster_events.append((it, X.epoch))
    trajectory.append(X)
    if on_recluster is not None:
        on_recluster(it, net, X)
    return X


def train_proxy(net: LandmarkNet, vae: PoseVAE, X: TrainingSet, bank, sched: Schedule,
                report: LossReport | None = None):
    """ELBO training of the VAE on detector heatmaps; the landmark network is frozen."""
    report = report or LossReport()
    for p in net.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(vae.parameters(), lr=sched.learning_rate, betas=tuple(sched.adam_betas))
    vae.train()
    h, w = bank.height, bank.width
    for it in range(sched.total_iterations):
        idx, _ = _batch(len(bank), sched, it)
        with torch.no_grad():
            heat = net.heatmaps(bank.raw(idx))
        target = pseudo_targets(X, idx, sched.heat_sigma, h, w)[:, None]
        gen = torch.Generator().manual_seed(sched.seed * 1_000_003 + it)
        recon, mu, logvar = vae(heat, gen)
        rec, kl = elbo_terms(recon, target, mu, logvar)
        loss = rec + sched.beta * kl
        _step(loss, opt, vae, "proxy", it)
        report.log(it, "proxy", "reconstruction", rec.item())
        report.log(it, "proxy", "kl", kl.item())
        report.log(it, "proxy", "elbo", loss.item())
    for p in net.parameters():
        p.requires_grad_(True)
    vae.eval()
    return vae, report


def evaluate_elbo(net: LandmarkNet, vae: PoseVAE, X: TrainingSet, bank, sigma: float,
                  beta: float = 1.0) -> float:
    """Deterministic ELBO (phi = mu) over the whole bank."""
    with torch.no_grad():
        heat = net.heatmaps(bank.raw(range(len(bank))))
        target = pseudo_targets(X, range(len(bank)), sigma, bank.height, bank.width)[:, None]
        mu, logvar = vae.encoder(heat)
        rec, kl = elbo_terms(vae.decoder(mu), target, mu, logvar)
    return float(rec + beta * kl)


def train_duldpp(net: LandmarkNet, vae: PoseVAE, X: TrainingSet | None, bank, sched: Schedule,
                 k: int, q: int, report: LossReport | None = None, on_recluster=None,
                 checkpoint_fn=None, resume: StageState | None = None, stop_after: int | None = None):
    """Two-stage re-clustering with Adam steps on heatmap MSE (aggregator + detector)
    and the latent margin loss (encoder). The descriptor head stays frozen; the
    decoder only takes part when ``sched.full_vae`` is set."""
    report = report or LossReport()
    for p in net.descriptor.parameters():
        p.requires_grad_(False)
    params = list(net.aggregator.parameters()) + list(net.detector.parameters()) \
        + list(vae.encoder.parameters())
    if sched.full_vae:
        params += list(vae.decoder.parameters())
    opt = torch.optim.Adam(params, lr=sched.learning_rate, betas=tuple(sched.adam_betas))
    trajectory = []
    start = 0
    if resume is not None:
        opt.load_state_dict(resume.optimizer)
        X, start = resume.training_set, resume.iteration
        trajectory.append(X)
    net.train()
    vae.train()
    h, w = bank.height, bank.width
    for it in range(start, sched.total_iterations):
        if sched.is_recluster(it) and not (resume is not None and it == start):
            X = _refresh(X, net, bank, k, sched, it, report, trajectory, on_recluster, q, vae)
            if checkpoint_fn is not None:
                checkpoint_fn(it, net, opt, X)
        if stop_after is not None and it >= stop_after:
            raise Interrupted(f"stopped at iteration {it}")
        idx, rng = _batch(len(bank), sched, it)
        heat = net.heatmaps(bank.raw(idx))
        target = pseudo_targets(X, idx, sched.heat_sigma, h, w, epoch=trajectory[-1].epoch)
        mse = heatmap_mse(heat[:, 0], target)
        mu, logvar = vae.encoder(heat)
        u = np.array([X.records[i].pose_label for i in idx])
        triples = sample_triples(u, rng, sched.triple_cap)
        if len(triples):
            t = torch.from_numpy(triples)
            lat = margin_contrastive(mu[t[:, 0]], mu[t[:, 1]], mu[t[:, 2]], sched.margin)
        else:
            lat = mu.sum() * 0.0
        loss = sched.mse_weight * mse + sched.contrastive_weight * lat
        if sched.full_vae:
            gen = torch.Generator().manual_seed(sched.seed * 1_000_003 + it)
            recon, _, _ = vae(heat, gen)
            rec, kl = elbo_terms(recon, target[:, None], mu, logvar)
            loss = loss + rec + sched.beta * kl
        _step(loss, opt, torch.nn.ModuleList([net, vae]), "duldpp", it)
        report.log(it, "duldpp", "mse", mse.item())
        report.log(it, "duldpp", "latent_contrastive", lat.item())
        report.log(it, "duldpp", "total", loss.item())
    X = _refresh(X, net, bank, k, sched, sched.total_iterations, report, trajectory, on_recluster, q, vae)
    for p in net.descriptor.parameters():
        p.requires_grad_(True)
    net.eval()
    vae.eval()
    return net, vae, trajectory, report
