"""VAE and adversarial objectives.

The network heads output log-variance, so the KL term reads
``-0.5 * sum(1 + logvar - mean**2 - exp(logvar))``, summed over latent
dimensions and averaged over the batch. Reconstruction terms are pixel means.
"""

from __future__ import annotations

import torch

EPS = 1e-7
KLD_WEIGHT = 0.5


def kld(mean, log_variance):
    """KL(N(mean, exp(log_variance)) || N(0, I)), per-sample sum, batch mean."""
    mean = torch.atleast_2d(mean)
    log_variance = torch.atleast_2d(log_variance)
    per_dim = -0.5 * (1.0 + log_variance - mean.pow(2) - log_variance.exp())
    return per_dim.sum(dim=1).mean()


def bce(target, pred):
    """Pixel-mean binary cross-entropy with predictions clamped to [EPS, 1-EPS]."""
    pred = pred.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(pred) + (1.0 - target) * torch.log1p(-pred)).mean()


def mse(target, pred):
    return (pred - target).pow(2).mean()


def saliency_vae_loss(y_t, y_p, mean, log_variance, kld_weight=KLD_WEIGHT) -> dict:
    content = bce(y_t, y_p)
    reg = kld(mean, log_variance)
    return {"total": content + kld_weight * reg, "content": content, "kld": reg}


def eeg_vae_loss(y_t, y_p, mean, log_variance, kld_weight=KLD_WEIGHT) -> dict:
    content = mse(y_t, y_p)
    reg = kld(mean, log_variance)
    return {"total": content + kld_weight * reg, "content": content, "kld": reg}


def generator_loss(y_t, y_p, mean, log_variance, d_fake, d_real=None,
                   kld_weight=KLD_WEIGHT, adversarial=True) -> dict:
    """Content BCE + weighted KL + BCE(D(fake), 1).

    ``BCE(D(real), 1)`` does not depend on generator parameters; when
    ``d_real`` is given it is reported as ``real_term`` but left out of
    ``total``.
    """
    content = bce(y_t, y_p)
    reg = kld(mean, log_variance)
    out = {"content": content, "kld": reg}
    total = content + kld_weight * reg
    if adversarial:
        adv = bce(torch.ones_like(d_fake), d_fake)
        out["adv"] = adv
        total = total + adv
    if d_real is not None:
        out["real_term"] = bce(torch.ones_like(d_real), d_real).detach()
    out["total"] = total
    return out


def discriminator_loss(d_real, d_fake):
    return bce(torch.ones_like(d_real), d_real) + bce(torch.zeros_like(d_fake), d_fake)
