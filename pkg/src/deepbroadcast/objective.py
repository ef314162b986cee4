"""Task losses, the Gaussian KL rate term and the composite broadcast-IB objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch


class LossConfigError(ValueError):
    pass


@dataclass
class LatentStats:
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class LossWeights:
    task_weights: Sequence[float] = (0.5, 0.5)
    beta: float = 1e-4
    gamma: Optional[Sequence[float]] = None  # None -> uniform 1/N

    def __post_init__(self):
        n = len(self.task_weights)
        if n < 1:
            raise LossConfigError("need at least one task weight")
        if any(w < 0 for w in self.task_weights):
            raise LossConfigError("task weights must be nonnegative")
        if self.beta < 0:
            raise LossConfigError("beta must be nonnegative")
        if self.gamma is None:
            self.gamma = [1.0 / n] * n
        if len(self.gamma) != n:
            raise LossConfigError(f"gamma has {len(self.gamma)} entries, expected {n}")
        if any(g < 0 for g in self.gamma):
            raise LossConfigError("gamma must be nonnegative")
        if abs(sum(self.gamma) - 1.0) > 1e-9:
            raise LossConfigError(f"gamma must sum to 1, got {sum(self.gamma)!r}")
        self.task_weights = [float(w) for w in self.task_weights]
        self.gamma = [float(g) for g in self.gamma]

    @property
    def n_users(self):
        return len(self.task_weights)


@dataclass
class LossBreakdown:
    task_losses: torch.Tensor
    kls: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "task_losses": [float(v) for v in self.task_losses.detach()],
            "kls": [float(v) for v in self.kls.detach()],
        }


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax of the labelled class (log-sum-exp stabilised)."""
    logits = torch.as_tensor(logits)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    n_label = logits.shape[-1]
    if n_label < 2:
        raise ValueError("cross entropy needs at least two classes")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_label):
        raise ValueError(f"label out of range for {n_label} classes")
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -log_probs.gather(-1, labels.unsqueeze(-1)).mean()


def kl_to_standard_normal(stats_or_mu, sigma=None) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over latent dims, averaged over batch."""
    if sigma is None:
        mu, sigma = stats_or_mu.mu, stats_or_mu.sigma
    else:
        mu = stats_or_mu
    mu, sigma = torch.as_tensor(mu), torch.as_tensor(sigma)
    if bool((sigma <= 0).any()):
        raise ValueError("sigma must be strictly positive")
    per_dim = (mu.pow(2) + sigma.pow(2) - 1.0) / 2.0 - torch.log(sigma)
    if per_dim.dim() == 1:
        return per_dim.sum()
    return per_dim.sum(dim=-1).mean()


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def task_loss(output: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "classify":
        return cross_entropy(output, target)
    if kind == "recover":
        return l1_loss(output, target)
    raise ValueError(f"unknown task kind {kind!r}")


def broadcast_ib_loss(task_losses, kls, weights: LossWeights) -> LossBreakdown:
    """``sum_i w_i * L_i + beta * sum_i gamma_i * KL_i``.

    Deterministic-latent variants pass zero KLs (and usually ``beta = 0``).
    """
    task_losses = torch.stack([torch.as_tensor(v) for v in task_losses]) if isinstance(task_losses, (list, tuple)) else torch.as_tensor(task_losses)
    kls = torch.stack([torch.as_tensor(v) for v in kls]) if isinstance(kls, (list, tuple)) else torch.as_tensor(kls)
    n = weights.n_users
    if task_losses.shape != (n,) or kls.shape != (n,):
        raise LossConfigError(f"expected {n} task losses and KLs, got {tuple(task_losses.shape)} and {tuple(kls.shape)}")
    w = torch.tensor(weights.task_weights, dtype=task_losses.dtype)
    g = torch.tensor(weights.gamma, dtype=kls.dtype)
    total = (w * task_losses).sum() + weights.beta * (g * kls).sum()
    return LossBreakdown(task_losses, kls, total, weights)


def case1_loss(l1, ce):
    """Recovery + classification objective: L1 dominates, CE weighted by 1e-3."""
    return l1 + 1e-3 * ce
