"""Objectives for the attribute-specific encoders and the debiased collaborative encoder.

Each attribute encoder is trained jointly with an auxiliary classifier: the
classifier fits the attribute posterior from the current embeddings (inner
step), then the encoder minimizes a compression penalty plus the weighted
classification loss under the refreshed classifier (outer step). The
collaborative encoder instead plays an adversarial game against per-attribute
discriminators while reconstructing the original user embedding.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term is NaN/inf; carries the offending batch index."""


def _check_finite(per_sample: torch.Tensor, what: str) -> None:
    finite = torch.isfinite(per_sample)
    if not bool(finite.all()):
        idx = int((~finite).nonzero()[0, 0])
        raise NonFiniteLossError(f"{what} is non-finite at batch index {idx}")


def compression_penalty(z: torch.Tensor) -> torch.Tensor:
    """Per-sample penalty 0.5 * ||z||^2 discouraging excess information in z."""
    return 0.5 * z.pow(2).sum(dim=-1)


def alignment_losses(
    encoder: nn.Module,
    classifier: nn.Module,
    u: torch.Tensor,
    labels: torch.Tensor,
    beta: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (encoder objective, classifier objective) for one batch.

    The classifier objective is the mean cross-entropy with embeddings
    detached; the encoder objective is mean(0.5*||z||^2) + beta * cross-entropy
    with gradients flowing through z.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = encoder(u)
    ce_c = F.cross_entropy(classifier(z.detach()), labels, reduction="none")
    _check_finite(ce_c, "classifier cross-entropy")
    ce_e = F.cross_entropy(classifier(z), labels, reduction="none")
    penalty = compression_penalty(z)
    per_sample_e = penalty + beta * ce_e
    _check_finite(per_sample_e, "encoder objective")
    return per_sample_e.mean(), ce_c.mean()


def alignment_step(
    encoder: nn.Module,
    classifier: nn.Module,
    u: torch.Tensor,
    labels: torch.Tensor,
    beta: float,
    encoder_opt: torch.optim.Optimizer,
    classifier_opt: torch.optim.Optimizer,
) -> tuple[float, float]:
    """One classifier step followed by one encoder step, in that order.

    The encoder step sees the classifier parameters *after* its update.
    Returns (encoder loss, classifier loss) as floats.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = encoder(u)

    ce_c = F.cross_entropy(classifier(z.detach()), labels, reduction="none")
    _check_finite(ce_c, "classifier cross-entropy")
    loss_c = ce_c.mean()
    classifier_opt.zero_grad()
    loss_c.backward()
    classifier_opt.step()

    ce_e = F.cross_entropy(classifier(z), labels, reduction="none")
    per_sample = compression_penalty(z) + beta * ce_e
    _check_finite(per_sample, "encoder objective")
    loss_e = per_sample.mean()
    encoder_opt.zero_grad()
    classifier_opt.zero_grad()  # discard classifier grads from the encoder objective
    loss_e.backward()
    encoder_opt.step()
    classifier_opt.zero_grad()
    return float(loss_e), float(loss_c)


def reconstruction_loss(z0: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance ||z0 - u||^2 averaged over the batch."""
    if z0.shape != u.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(u.shape)}")
    return (z0 - u).pow(2).sum(dim=-1).mean()


def _adversarial_term(logits: torch.Tensor, labels: torch.Tensor, mode: str) -> torch.Tensor:
    """Per-attribute term the collaborative encoder minimizes.

    ``log_confidence`` pushes the discriminator's log-probability on the true
    label down; ``confusion`` pulls its output toward the uniform distribution.
    """
    if mode == "log_confidence":
        return -F.cross_entropy(logits, labels)  # mean log q(true label)
    if mode == "confusion":
        return -F.log_softmax(logits, dim=-1).mean(dim=-1).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def adversarial_objectives(
    collab: nn.Module,
    discriminators: Sequence[nn.Module],
    u: torch.Tensor,
    labels: torch.Tensor,
    lam: float,
    mode: str = "log_confidence",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (collaborative-encoder objective, discriminator objective).

    Discriminators minimize the summed cross-entropy on detached embeddings;
    the encoder minimizes reconstruction plus ``lam`` times the summed
    adversarial terms, with gradients flowing through the embedding.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    z0 = collab(u)
    loss_d = z0.new_zeros(())
    adv = z0.new_zeros(())
    for i, disc in enumerate(discriminators):
        ce = F.cross_entropy(disc(z0.detach()), labels[:, i], reduction="none")
        _check_finite(ce, f"discriminator {i} cross-entropy")
        loss_d = loss_d + ce.mean()
        adv = adv + _adversarial_term(disc(z0), labels[:, i], mode)
    recon = reconstruction_loss(z0, u)
    loss_f = recon + lam * adv
    if not torch.isfinite(loss_f):
        raise NonFiniteLossError("collaborative-encoder objective is non-finite")
    return loss_f, loss_d


def adversarial_step(
    collab: nn.Module,
    discriminators: Sequence[nn.Module],
    u: torch.Tensor,
    labels: torch.Tensor,
    lam: float,
    collab_opt: torch.optim.Optimizer,
    disc_opts: Sequence[torch.optim.Optimizer],
    mode: str = "log_confidence",
) -> tuple[float, float]:
    """One discriminator step then one collaborative-encoder step.

    The encoder step sees the discriminators *after* their update. Returns
    (encoder loss, discriminator loss) as floats.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    z0 = collab(u)

    loss_d = z0.new_zeros(())
    for i, disc in enumerate(discriminators):
        ce = F.cross_entropy(disc(z0.detach()), labels[:, i], reduction="none")
        _check_finite(ce, f"discriminator {i} cross-entropy")
        loss_d = loss_d + ce.mean()
    for opt in disc_opts:
        opt.zero_grad()
    loss_d.backward()
    for opt in disc_opts:
        opt.step()

    adv = z0.new_zeros(())
    for i, disc in enumerate(discriminators):
        adv = adv + _adversarial_term(disc(z0), labels[:, i], mode)
    loss_f = reconstruction_loss(z0, u) + lam * adv
    if not torch.isfinite(loss_f):
        raise NonFiniteLossError("collaborative-encoder objective is non-finite")
    collab_opt.zero_grad()
    for opt in disc_opts:
        opt.zero_grad()  # discard discriminator grads from the encoder objective
    loss_f.backward()
    collab_opt.step()
    for opt in disc_opts:
        opt.zero_grad()
    return float(loss_f), float(loss_d)
