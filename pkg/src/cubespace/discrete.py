"""Discrete relaxations, temperature annealing, priors and closed-form loss terms.

Everything here operates on torch tensors (plain floats and numpy arrays are
accepted and converted) so the same functions serve training, evaluation and
the finite-difference gradient checks in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

# clamp applied to probabilities before any logarithm
DELTA = 1e-7


@dataclass(frozen=True)
class AnnealSchedule:
    tau_max: float = 5.0
    tau_min: float = 0.5
    anneal_epochs: int = 1000

    def __post_init__(self):
        if not self.tau_max >= self.tau_min > 0:
            raise ValueError(f"need tau_max >= tau_min > 0, got {self.tau_max}, {self.tau_min}")
        if self.anneal_epochs <= 0:
            raise ValueError("anneal_epochs must be positive")

    def __call__(self, epoch: int) -> float:
        return anneal_tau(self, epoch)


@dataclass(frozen=True)
class LatentConfig:
    F: int = 50
    A: int = 6000
    C: int = 2
    epsilon: float = 0.1
    sigma_rec: float = 0.1
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0

    def __post_init__(self):
        if min(self.F, self.A, self.C) <= 0:
            raise ValueError("F, A and C must be positive")
        if not 0 < self.epsilon <= 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5], got {self.epsilon}")
        if self.sigma_rec <= 0:
            raise ValueError("sigma_rec must be positive")
        if min(self.beta1, self.beta2, self.beta3) < 1:
            raise ValueError("beta coefficients must be >= 1")


def anneal_tau(schedule: AnnealSchedule, epoch: int) -> float:
    """Exponential decay from tau_max to tau_min, held constant after anneal_epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    frac = min(epoch, schedule.anneal_epochs) / schedule.anneal_epochs
    return schedule.tau_max * (schedule.tau_min / schedule.tau_max) ** frac


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.get_default_dtype())


def _uniform(shape, like: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=like.dtype, device=like.device)
    eps = torch.finfo(like.dtype).eps
    return u.clamp(eps, 1 - eps)


def logistic_noise(shape, like: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    u = _uniform(shape, like, generator)
    return torch.log(u) - torch.log1p(-u)


def gumbel_noise(shape, like: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    u = _uniform(shape, like, generator)
    return -torch.log(-torch.log(u))


def binary_concrete_sample(logits, tau: float, generator: torch.Generator | None = None,
                           stochastic: bool = True) -> torch.Tensor:
    """Sigmoid((l + log u - log(1-u)) / tau).

    With ``stochastic=False`` the noise is replaced by its median (0), which
    gives a deterministic relaxation used by the noise-free forward passes.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = _tensor(logits)
    if stochastic:
        logits = logits + logistic_noise(logits.shape, logits, generator)
    return torch.sigmoid(logits / tau)


def gumbel_softmax_sample(logits, tau: float, generator: torch.Generator | None = None,
                          stochastic: bool = True) -> torch.Tensor:
    """softmax((l + g) / tau) over the last axis, g ~ Gumbel(0, 1)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = _tensor(logits)
    if stochastic:
        logits = logits + gumbel_noise(logits.shape, logits, generator)
    # the Gumbel median is a constant shift, so it cancels inside softmax
    return torch.softmax(logits / tau, dim=-1)


def determinize_bc(logits) -> torch.Tensor:
    """Heaviside step; a logit of exactly 0 maps to 1."""
    logits = _tensor(logits)
    return (logits >= 0).to(logits.dtype if logits.is_floating_point() else torch.get_default_dtype())


def determinize_gs(logits) -> torch.Tensor:
    """One-hot argmax over the last axis; ties go to the lowest index."""
    logits = _tensor(logits)
    idx = torch.argmax(logits, dim=-1)  # torch returns the first maximal index
    dtype = logits.dtype if logits.is_floating_point() else torch.get_default_dtype()
    return torch.nn.functional.one_hot(idx, logits.shape[-1]).to(dtype)


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(DELTA, 1 - DELTA)


def kl_bernoulli(q, eps: float) -> torch.Tensor:
    """Elementwise KL(Bern(q) || Bern(eps))."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    q = _clamp(_tensor(q))
    kl = q * (torch.log(q) - math.log(eps)) + (1 - q) * (torch.log1p(-q) - math.log1p(-eps))
    return kl.clamp_min(0.0)  # roundoff near q == eps


def kl_bernoulli_pair(q, p) -> torch.Tensor:
    """Sum over the last axis of elementwise KL(Bern(q_f) || Bern(p_f))."""
    q = _clamp(_tensor(q))
    p = _clamp(_tensor(p))
    terms = q * (torch.log(q) - torch.log(p)) + (1 - q) * (torch.log1p(-q) - torch.log1p(-p))
    return terms.clamp_min(0.0).sum(dim=-1)


def _xlogx(q: torch.Tensor) -> torch.Tensor:
    # 0 log 0 := 0, with a gradient-safe branch
    safe = torch.where(q > 0, q, torch.ones_like(q))
    return torch.where(q > 0, q * torch.log(safe), torch.zeros_like(q))


def kl_categorical_uniform(q) -> torch.Tensor:
    """KL(Cat(q) || Cat(1/C)) = sum q log q + log C, over the last axis."""
    q = _tensor(q)
    return (_xlogx(q).sum(dim=-1) + math.log(q.shape[-1])).clamp_min(0.0)


def kl_categorical(q, p) -> torch.Tensor:
    """KL(Cat(q) || Cat(p)) over the last axis; p is clamped away from 0."""
    q = _tensor(q)
    p = _tensor(p).clamp_min(DELTA)
    return (_xlogx(q) - q * torch.log(p)).sum(dim=-1).clamp_min(0.0)


def gaussian_nll(x, xhat, sigma: float, include_constant: bool = False, start_dim: int = 0) -> torch.Tensor:
    """Negative log-likelihood of x under N(xhat, sigma^2), summed over dims >= start_dim."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = _tensor(x)
    xhat = _tensor(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    sq = (x - xhat) ** 2 / (2 * sigma**2)
    dims = tuple(range(start_dim, x.dim()))
    out = sq.sum(dim=dims) if dims else sq
    if include_constant:
        d = math.prod(x.shape[start_dim:])
        out = out + d * 0.5 * math.log(2 * math.pi * sigma**2)
    return out


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def split_generators(seed: int, n: int) -> list[torch.Generator]:
    """Independent generator streams derived from one master seed."""
    master = torch.Generator()
    master.manual_seed(int(seed))
    seeds = torch.randint(0, 2**62, (n,), generator=master)
    return [make_generator(int(s)) for s in seeds]
