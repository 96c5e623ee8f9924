"""Evaluation metrics over finalized checkpoints: ELBO, symbol stability, bit usage, PDDL statistics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import discrete as D
from . import strips as S
from .extraction import encode_pairs, predict_successors
from .models import CubeSpaceAE, StateAE, TwoPhaseAAE


def _t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


@torch.no_grad()
def objective(model, x0, x1, betas=None, batch: int = 256) -> float:
    """Mean per-pair loss in eval mode; ``betas=None`` uses the trained betas."""
    model.eval()
    x0, x1 = _t(x0), _t(x1)
    total, n = 0.0, 0
    for i in range(0, len(x0), batch):
        b0, b1 = x0[i:i + batch], x1[i:i + batch]
        if isinstance(model, TwoPhaseAAE):
            sae = model.sae
            x = torch.cat([b0, b1])
            # one loss per pair: both images through the SAE, the pair through the AAE
            v = 2 * sae.loss(sae(x, 1.0), x, betas).total
            z0, z1 = sae.encode_bits(b0), sae.encode_bits(b1)
            v = v + model.aae.loss(model.aae(z0, z1, 1.0), z1).total
        elif isinstance(model, StateAE):
            x = torch.cat([b0, b1])
            v = 2 * model.loss(model(x, 1.0), x, betas).total
        else:
            v = model.loss(model(b0, b1, 1.0), b0, b1, betas).total
        total += float(v) * len(b0)
        n += len(b0)
    return total / n if n else float("nan")


def eval_neg_elbo(model, x0, x1) -> float:
    """Negative ELBO with every beta reset to 1, constant term excluded."""
    return objective(model, x0, x1, betas=(1.0, 1.0, 1.0))


@torch.no_grad()
def state_variance(model, x, sigma: float = 0.3, k: int = 10, seed: int = 0) -> float:
    """Mean over examples and bits of the variance of sampled bits under input noise.

    Each of the ``k`` draws corrupts the (normalized) input with N(0, sigma) and
    samples every bit from Bernoulli(sigmoid(logit)), the zero-temperature limit
    of a Binary Concrete sample.  The variance uses the unbiased estimator so a
    coin-flip bit scores 0.25 in expectation.
    """
    model.eval()
    enc = model.sae.encoder if isinstance(model, TwoPhaseAAE) else model.encoder
    gen = D.make_generator(seed)
    x = _t(x)
    draws = []
    for _ in range(k):
        noisy = x + sigma * torch.randn(x.shape, generator=gen)
        p = torch.sigmoid(enc(noisy))
        draws.append((torch.rand(p.shape, generator=gen) < p).double())
    z = torch.stack(draws)
    return float(z.var(dim=0, unbiased=True).mean())


def bit_usage(z) -> dict:
    """Counts of bits that vary, stay 0 and stay 1 across the rows of ``z``."""
    z = np.asarray(z).astype(np.int8)
    if len(z) == 0:
        raise ValueError("bit usage needs at least one code")
    lo, hi = z.min(axis=0), z.max(axis=0)
    return {"effective": int((lo != hi).sum()), "constant_zero": int((hi == 0).sum()),
            "constant_one": int((lo == 1).sum())}


def _codes(model, x):
    return model.encode_bits(_t(x)).numpy().astype(np.int8)


def effective_bits(model, x) -> int:
    return bit_usage(_codes(model, x))["effective"]


def constant_zero_bits(model, x) -> int:
    return bit_usage(_codes(model, x))["constant_zero"]


def constant_one_bits(model, x) -> int:
    return bit_usage(_codes(model, x))["constant_one"]


@torch.no_grad()
def successor_error(model, x0, x1) -> float:
    """Mean |z1 - z2| over pairs and bits, z2 being the model's predicted successor."""
    z0, z1, labels = encode_pairs(model, x0, x1)
    if isinstance(model, CubeSpaceAE):
        z2 = predict_successors(model, z0, labels)
    elif isinstance(model, TwoPhaseAAE):
        a = torch.nn.functional.one_hot(torch.as_tensor(labels, dtype=torch.long), model.latent.A).float()
        z2 = model.aae.successor(_t(z0), a).numpy()
    else:
        raise ValueError(f"{model.kind} models do not predict successors")
    return float(np.abs(z1.astype(np.float64) - z2).mean())


def pddl_statistics(domain: S.Domain, report=None, z0=None, z1=None) -> dict:
    """Action counts, mean literal-set sizes and the mean Hamming distance of transitions."""
    acts = domain.actions

    def mean(key):
        return float(np.mean([len(getattr(a, key)) for a in acts])) if acts else 0.0

    stats = {"actions_A1": report.A1 if report is not None else len(acts), "actions_A2": len(acts),
             "mean_add": mean("add"), "mean_del": mean("delete"), "mean_pos": mean("pos"), "mean_neg": mean("neg")}
    if z0 is not None and len(z0):
        stats["mean_state_difference"] = float((np.asarray(z0) != np.asarray(z1)).sum(axis=1).mean())
    else:
        stats["mean_state_difference"] = 0.0
    return stats


@dataclass
class MetricsReport:
    kind: str
    F: int
    beta1: float
    beta3: float
    epsilon: float
    neg_elbo_beta1: float
    objective: float
    state_variance: float
    effective_bits: int
    constant_zero_bits: int
    constant_one_bits: int
    successor_abs_error: float | None = None
    xor_effect_mean: float = 0.0
    xor_precondition_mean: float = 0.0
    actions_A1: int = 0
    actions_A2: int = 0
    mean_state_difference: float = 0.0
    mean_add: float = 0.0
    mean_del: float = 0.0
    mean_pos: float = 0.0
    mean_neg: float = 0.0

    def __post_init__(self):
        if self.effective_bits + self.constant_zero_bits + self.constant_one_bits != self.F:
            raise AssertionError("effective, constant-zero and constant-one bits must partition F")


def evaluate(model, x0, x1, domain=None, report=None, seed: int = 0) -> MetricsReport:
    """Every metric for one checkpoint on one (normalized) test split."""
    lat = model.latent
    z0, z1, _ = encode_pairs(model, x0, x1)
    usage = bit_usage(np.concatenate([z0, z1]))
    r = MetricsReport(
        kind=model.kind, F=lat.F, beta1=lat.beta1, beta3=lat.beta3, epsilon=lat.epsilon,
        neg_elbo_beta1=eval_neg_elbo(model, x0, x1), objective=objective(model, x0, x1),
        state_variance=state_variance(model, np.concatenate([np.asarray(x0), np.asarray(x1)]), seed=seed),
        effective_bits=usage["effective"], constant_zero_bits=usage["constant_zero"],
        constant_one_bits=usage["constant_one"],
        successor_abs_error=successor_error(model, x0, x1) if not isinstance(model, StateAE) else None)
    if report is not None:
        r.xor_effect_mean, r.xor_precondition_mean = report.xor_effect_mean, report.xor_precondition_mean
    if domain is not None:
        for k, v in pddl_statistics(domain, report, z0, z1).items():
            setattr(r, k, v)
    return r


def write_table(reports: list[MetricsReport], path, extra: list[dict] | None = None) -> None:
    """One row per checkpoint; ``extra`` adds per-row columns such as the domain name."""
    extra = extra or [{} for _ in reports]
    keys = list(extra[0].keys()) if extra else []
    keys += [f.name for f in fields(MetricsReport)]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r, e in zip(reports, extra):
            row = {**e, **asdict(r)}
            w.writerow({k: ("" if v is None else f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def scatter_plot(xs, ys, path, xlabel: str, ylabel: str, title: str = "") -> None:
    """Paired-comparison scatter with the diagonal drawn in."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(xs, ys, s=12)
    lo = min(min(xs), min(ys))
    hi = max(max(xs), max(ys))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def curve_plot(rows: list[dict], path, key: str = "total") -> None:
    """Train/val curve of one loss term from a training log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    for split in ("train", "val"):
        pts = [(r["epoch"], r[key]) for r in rows if r.get("split") == split and r.get(key) not in (None, "")]
        if pts:
            ax.plot(*zip(*pts), label=split)
    ax.set_xlabel("epoch")
    ax.set_ylabel(key)
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
