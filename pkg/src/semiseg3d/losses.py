"""Discriminator and generator losses for the (K+1)-class semi-supervised GAN.

The discriminator emits K logits per voxel. The fake class is the implicit
(K+1)-th output with its logit pinned to 0, so with ``Z = sum_k exp(l_k)``:

    p(class k) = exp(l_k) / (Z + 1),    p(fake) = 1 / (Z + 1).

Every loss is a mean over batch and voxels. Everything is written in terms of
``log Z`` and ``softplus(t) = log(1 + e^t)`` so saturated logits neither
overflow nor cancel. Gradients come from torch autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ContractError, InvalidInputError, InvalidLabelError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FeatureSummary:
    """Batch-mean activation vector taken at one discriminator layer."""

    mean_activation: torch.Tensor
    tap_id: str

    @classmethod
    def from_features(cls, features: torch.Tensor, tap_id: str) -> "FeatureSummary":
        """Summarise per-sample feature vectors of shape (B, C)."""
        return cls(features.mean(dim=0), tap_id)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian q(z|x) with 0 < sigma <= theta."""

    mu: torch.Tensor
    sigma: torch.Tensor
    theta: float = 1.0

    def validate(self):
        if self.mu.shape != self.sigma.shape:
            raise ContractError(f"mu {tuple(self.mu.shape)} and sigma {tuple(self.sigma.shape)} differ")
        s = self.sigma.detach()
        if bool((s <= 0).any()) or bool((s > self.theta).any()):
            raise ContractError(f"sigma must lie in (0, {self.theta}]")


def _check_finite(logits: torch.Tensor):
    if logits.ndim < 1 or logits.shape[-1] < 1:
        raise InvalidInputError("logits need a trailing class axis with K >= 1")
    if not bool(torch.isfinite(logits.detach()).all()):
        raise InvalidInputError("logits contain non-finite values")


def _softplus(t: torch.Tensor) -> torch.Tensor:
    # Exact log(1 + e^t); F.softplus switches to the identity above a threshold.
    return torch.logaddexp(t, torch.zeros_like(t))


def log_partition(logits: torch.Tensor) -> torch.Tensor:
    """log Z per voxel, via max-shifted log-sum-exp over the class axis."""
    _check_finite(logits)
    return torch.logsumexp(logits, dim=-1)


def partition(logits: torch.Tensor) -> torch.Tensor:
    """Z = sum_k exp(l_k) per voxel."""
    return torch.exp(log_partition(logits))


def softmax_kplus1(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over [l_1, ..., l_K, 0]; the last output channel is p(fake)."""
    _check_finite(logits)
    zero = torch.zeros_like(logits[..., :1])
    return torch.softmax(torch.cat([logits, zero], dim=-1), dim=-1)


def fake_probability(logits: torch.Tensor) -> torch.Tensor:
    """p(fake) = 1 / (Z + 1) per voxel."""
    return torch.exp(-_softplus(log_partition(logits)))


def labeled_loss(logits: torch.Tensor, labels: torch.Tensor, weight_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy -log p(y_i | x) under the (K+1)-way softmax.

    With ``weight_mask`` the per-voxel terms are re-weighted and divided by the
    total weight instead of the voxel count.
    """
    _check_finite(logits)
    if logits.numel() == 0:
        return logits.new_zeros(())
    if labels.shape != logits.shape[:-1]:
        raise ContractError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape[:-1])}")
    k = logits.shape[-1]
    labels = labels.long()
    if bool((labels < 0).any()) or bool((labels >= k).any()):
        raise InvalidLabelError(f"labels must lie in 0..{k - 1}")
    # log p(y) = l_y - log(Z + 1) = l_y - softplus(log Z)
    picked = torch.gather(logits, -1, labels.unsqueeze(-1)).squeeze(-1)
    nll = _softplus(torch.logsumexp(logits, dim=-1)) - picked
    if weight_mask is None:
        return nll.mean()
    weight_mask = weight_mask.to(nll.dtype)
    if weight_mask.shape != nll.shape:
        raise ContractError("weight_mask must match the label shape")
    return (nll * weight_mask).sum() / weight_mask.sum()


def unlabeled_loss(logits: torch.Tensor) -> torch.Tensor:
    """Mean of -log(Z / (Z + 1)) = softplus(-log Z)."""
    _check_finite(logits)
    if logits.numel() == 0:
        return logits.new_zeros(())
    return _softplus(-torch.logsumexp(logits, dim=-1)).mean()


def fake_loss(logits: torch.Tensor) -> torch.Tensor:
    """Mean of -log(1 / (Z + 1)) = softplus(log Z), on generated patches."""
    _check_finite(logits)
    if logits.numel() == 0:
        return logits.new_zeros(())
    return _softplus(torch.logsumexp(logits, dim=-1)).mean()


def discriminator_loss(labeled_logits, labels, unlabeled_logits=None, fake_logits=None, weight_mask=None):
    """Sum of the labeled, unlabeled and fake terms.

    Returns ``(total, breakdown)`` where ``breakdown`` maps ``"labeled"``,
    ``"unlabeled"`` and ``"fake"`` to their scalar tensors. Missing or empty
    batches contribute 0.
    """
    l_lab = labeled_loss(labeled_logits, labels, weight_mask)
    zero = l_lab.new_zeros(())
    l_unl = zero if unlabeled_logits is None else unlabeled_loss(unlabeled_logits)
    l_fake = zero if fake_logits is None else fake_loss(fake_logits)
    total = l_lab + l_unl + l_fake
    return total, {"labeled": l_lab, "unlabeled": l_unl, "fake": l_fake}


def feature_matching_loss(real_summary: FeatureSummary, fake_summary: FeatureSummary) -> torch.Tensor:
    """||mean f(real) - mean f(fake)||^2."""
    if real_summary.tap_id != fake_summary.tap_id:
        raise ContractError(f"feature taps differ: {real_summary.tap_id!r} vs {fake_summary.tap_id!r}")
    real, fake = real_summary.mean_activation, fake_summary.mean_activation
    if real.shape != fake.shape:
        raise ContractError(f"feature sizes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    return ((real - fake) ** 2).sum()


def negative_entropy_bound(z: torch.Tensor, posterior: GaussianPosterior) -> torch.Tensor:
    """Batch mean of -log q(z | x) for a diagonal Gaussian posterior.

    Upper-bounds the generator's negative entropy; minimised jointly by the
    generator and the encoder that produces ``posterior``.
    """
    posterior.validate()
    if z.shape != posterior.mu.shape:
        raise ContractError(f"z {tuple(z.shape)} and posterior {tuple(posterior.mu.shape)} are not aligned")
    var = posterior.sigma ** 2
    nll = 0.5 * (LOG_2PI + torch.log(var)) + (z - posterior.mu) ** 2 / (2.0 * var)
    return nll.sum(dim=-1).mean()


_MODE_ALIASES = {
    "normal": "normal",
    "normal_gan": "normal",
    "fm": "fm",
    "fm_gan": "fm",
    "bad_gan": "bad_gan",
}


def generator_loss(mode, fake_logits=None, real_summary=None, fake_summary=None, z=None, posterior=None,
                   lambda_ent=1.0):
    """Generator objective for ``mode`` in {normal, fm, bad_gan}.

    normal:  -fake_loss(fake_logits)
    fm:      feature_matching_loss(real_summary, fake_summary)
    bad_gan: fm + lambda_ent * negative_entropy_bound(z, posterior)
    """
    try:
        kind = _MODE_ALIASES[mode]
    except KeyError:
        raise ContractError(f"unknown generator mode {mode!r}") from None
    if kind == "normal":
        if fake_logits is None:
            raise ContractError("normal mode needs fake_logits")
        return -fake_loss(fake_logits)
    if real_summary is None or fake_summary is None:
        raise ContractError(f"{mode} mode needs real_summary and fake_summary")
    fm = feature_matching_loss(real_summary, fake_summary)
    if kind == "fm":
        return fm
    if z is None or posterior is None:
        raise ContractError("bad_gan mode needs z and posterior")
    return fm + lambda_ent * negative_entropy_bound(z, posterior)
