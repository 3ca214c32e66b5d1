"""VAE over detector heatmaps: latent pose codes, ELBO and the latent margin loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .heads import Heatmap


@dataclass
class VaeConfig:
    height: int = 48
    width: int = 48
    latent_dim: int = 64
    channels: tuple[int, int, int, int] = (8, 16, 32, 32)
    beta: float = 1.0


@dataclass
class LatentPoseCode:
    phi: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray | None = None
    pose_label: int | None = None


class PoseEncoder(nn.Module):
    """Four stride-2 convolution blocks, then a linear map to (mu, log sigma^2)."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        if cfg.height % 16 or cfg.width % 16:
            raise ValueError("heatmap size must be divisible by 16")
        layers, cin = [], 1
        for c in cfg.channels:
            layers += [nn.Conv2d(cin, c, 3, stride=2, padding=1), nn.ReLU()]
            cin = c
        self.conv = nn.Sequential(*layers)
        self.flat = cfg.channels[-1] * (cfg.height // 16) * (cfg.width // 16)
        self.fc = nn.Linear(self.flat, 2 * cfg.latent_dim)
        self.cfg = cfg

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(h.shape[-2:]) != (self.cfg.height, self.cfg.width) or h.shape[-3] != 1:
            raise ValueError(f"expected N x 1 x {self.cfg.height} x {self.cfg.width} heatmaps, "
                             f"got {tuple(h.shape)}")
        z = self.fc(self.conv(h).flatten(1))
        mu, logvar = z.chunk(2, dim=1)
        return mu, logvar


class PoseDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.h0, self.w0 = cfg.height // 16, cfg.width // 16
        chans = list(cfg.channels[::-1])
        self.fc = nn.Linear(cfg.latent_dim, chans[0] * self.h0 * self.w0)
        layers = []
        for i, c in enumerate(chans):
            cout = chans[i + 1] if i + 1 < len(chans) else 1
            layers.append(nn.ConvTranspose2d(c, cout, 4, stride=2, padding=1))
            if i + 1 < len(chans):
                layers.append(nn.ReLU())
        self.deconv = nn.Sequential(*layers)

    def forward(self, phi: torch.Tensor) -> torch.Tensor:
        if phi.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent dimension {phi.shape[-1]} != {self.cfg.latent_dim}")
        x = F.relu(self.fc(phi)).view(-1, self.cfg.channels[-1], self.h0, self.w0)
        return torch.sigmoid(self.deconv(x))


class PoseVAE(nn.Module):
    def __init__(self, cfg: VaeConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or VaeConfig()
        torch.manual_seed(seed)
        self.encoder = PoseEncoder(self.cfg)
        self.decoder = PoseDecoder(self.cfg)

    def encode_mean(self, h: torch.Tensor) -> torch.Tensor:
        return self.encoder(h)[0]

    def forward(self, h: torch.Tensor, generator: torch.Generator | None = None):
        mu, logvar = self.encoder(h)
        phi, _ = reparameterize(mu, logvar, generator)
        return self.decoder(phi), mu, logvar


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None):
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps, eps


def _heat_tensor(h, dtype) -> torch.Tensor:
    if isinstance(h, Heatmap):
        return torch.from_numpy(h.grid).to(dtype)[None, None]
    h = torch.as_tensor(h, dtype=dtype)
    return h.reshape(1, 1, *h.shape[-2:]) if h.dim() < 4 else h


def encode(h, vae: PoseVAE, training: bool = False, seed: int | None = None) -> LatentPoseCode:
    """Latent pose code of one heatmap: phi = mu at inference, mu + sigma * eps in training."""
    dtype = next(vae.parameters()).dtype
    with torch.no_grad():
        mu, logvar = vae.encoder(_heat_tensor(h, dtype))
        eps = None
        phi = mu
        if training:
            gen = torch.Generator().manual_seed(0 if seed is None else seed)
            phi, eps = reparameterize(mu, logvar, gen)
    return LatentPoseCode(phi[0].double().numpy(), mu[0].double().numpy(), logvar[0].double().numpy(),
                          None if eps is None else eps[0].double().numpy())


def decode(phi, vae: PoseVAE) -> Heatmap:
    dtype = next(vae.parameters()).dtype
    with torch.no_grad():
        out = vae.decoder(torch.as_tensor(np.asarray(phi), dtype=dtype).reshape(1, -1))
    return Heatmap(out[0, 0].double().numpy(), source="detector_output")


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over dimensions, per row."""
    return 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).sum(-1)


def elbo_terms(recon, target, mu, logvar) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction BCE summed over pixels, KL), both averaged over the batch."""
    recon = _as_batch(recon)
    target = _as_batch(target).to(recon.dtype)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    mu = torch.as_tensor(mu, dtype=recon.dtype).reshape(recon.shape[0], -1)
    logvar = torch.as_tensor(logvar, dtype=recon.dtype).reshape(recon.shape[0], -1)
    bce = F.binary_cross_entropy(recon.clamp(0.0, 1.0), target, reduction="none")
    rec = bce.flatten(1).sum(1).mean()
    return rec, kl_standard_normal(mu, logvar).mean()


def elbo_loss(recon, target, mu, logvar, beta: float = 1.0) -> torch.Tensor:
    rec, kl = elbo_terms(recon, target, mu, logvar)
    return rec + beta * kl


def _as_batch(h) -> torch.Tensor:
    if isinstance(h, Heatmap):
        return torch.from_numpy(h.grid)[None, None]
    h = torch.as_tensor(h)
    while h.dim() < 4:
        h = h[None]
    return h


def safe_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance over the last axis with a zero (sub)gradient at a == b."""
    sq = ((a - b) ** 2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def margin_contrastive(anchor, positive, negative, margin: float) -> torch.Tensor:
    """||a - p|| + max(0, margin - ||a - n||), averaged over rows."""
    a = torch.as_tensor(anchor, dtype=torch.float64) if not torch.is_tensor(anchor) else anchor
    p = torch.as_tensor(positive, dtype=a.dtype) if not torch.is_tensor(positive) else positive
    n = torch.as_tensor(negative, dtype=a.dtype) if not torch.is_tensor(negative) else negative
    loss = safe_distance(a, p) + F.relu(margin - safe_distance(a, n))
    return loss.mean()


def latent_contrastive(phi, phi_same, phi_other, u, u_same, u_other, margin: float = 0.8) -> torch.Tensor:
    if u != u_same:
        raise ValueError(f"positive code must share the anchor's pose label ({u} vs {u_same})")
    if u == u_other:
        raise ValueError(f"negative code must have a different pose label (both {u})")
    return margin_contrastive(phi, phi_same, phi_other, margin)


def sample_triples(labels, rng: np.random.Generator, cap: int | None = None) -> np.ndarray:
    """(anchor, positive, negative) index triples: per anchor one same-label and one
    different-label partner drawn uniformly; anchors lacking either are skipped."""
    labels = np.asarray(labels)
    out = []
    for i, lab in enumerate(labels):
        same = np.flatnonzero(labels == lab)
        same = same[same != i]
        diff = np.flatnonzero(labels != lab)
        if len(same) == 0 or len(diff) == 0:
            continue
        out.append((i, int(rng.choice(same)), int(rng.choice(diff))))
    out = np.asarray(out, dtype=np.int64).reshape(-1, 3)
    if cap is not None and len(out) > cap:
        out = out[np.sort(rng.choice(len(out), cap, replace=False))]
    return out
