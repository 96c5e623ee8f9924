"""The four action-model acquisition networks and their exact losses.

* ``StateAE``        - state autoencoder (AMA1 uses it directly)
* ``ActionAE``       - action autoencoder trained on a frozen SAE (AMA2)
* ``CubeSpaceAE``    - joint SAE + Back-to-Logit action model (AMA3+)
* ``BidirectionalCSAE`` - CSAE plus the time-reversed regression branch (AMA4+)

In train mode latents are relaxed samples (Binary Concrete / Gumbel-Softmax);
in eval mode they are determinized with step / argmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from . import discrete as D
from .networks import ActionNet, ActionPrior, BackToLogit, Decoder, Encoder, build


@dataclass(frozen=True)
class ArchConfig:
    channels: int = 32
    kernel: int = 5
    action_hidden: int = 1000
    input_noise: float = 0.2
    dropout: float = 0.2


@dataclass
class ElboBreakdown:
    """Per-term negative ELBO components, each averaged over the batch."""

    total: torch.Tensor
    rec_x0: torch.Tensor | None = None
    rec_x1_direct: torch.Tensor | None = None
    rec_x1_applied: torch.Tensor | None = None
    kl_prior: torch.Tensor | None = None
    kl_action: torch.Tensor | None = None
    kl_effect: torch.Tensor | None = None
    rec_x0_regressed: torch.Tensor | None = None
    kl_prior_x1: torch.Tensor | None = None
    kl_regaction: torch.Tensor | None = None
    kl_precondition: torch.Tensor | None = None
    rec_successor: torch.Tensor | None = None

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.items()}


def _betas(latent: D.LatentConfig, betas):
    if betas is None:
        return latent.beta1, latent.beta2, latent.beta3
    return betas


class _LatentModel(nn.Module):
    """Shared encode/decode machinery."""

    kind = "base"

    def __init__(self, image_shape, latent: D.LatentConfig, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.latent = latent
        self.arch = arch
        self.encoder = Encoder(self.image_shape, latent.F, arch.channels, arch.kernel,
                               arch.input_noise, arch.dropout)
        self.decoder = Decoder(self.image_shape, latent.F, arch.channels, arch.kernel, arch.dropout)

    # -- discretization --------------------------------------------------
    def bits(self, logits, tau, generator=None, stochastic=True):
        if self.training:
            return D.binary_concrete_sample(logits, tau, generator, stochastic)
        return D.determinize_bc(logits)

    def onehot(self, logits, tau, generator=None, stochastic=True):
        if self.training:
            return D.gumbel_softmax_sample(logits, tau, generator, stochastic)
        return D.determinize_gs(logits)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    @torch.no_grad()
    def encode_bits(self, x) -> torch.Tensor:
        """Deterministic binary codes (eval semantics regardless of current mode)."""
        was = self.training
        self.eval()
        try:
            return D.determinize_bc(self.encoder(torch.as_tensor(x, dtype=torch.float32)))
        finally:
            self.train(was)

    def rec(self, x, xhat):
        return D.gaussian_nll(x, xhat, self.latent.sigma_rec, start_dim=1)

    def kl_prior_term(self, logits):
        return D.kl_bernoulli(torch.sigmoid(logits), self.latent.epsilon).sum(dim=-1)

    def describe(self) -> dict:
        return {"kind": self.kind, "image_shape": list(self.image_shape),
                "latent": asdict(self.latent), "arch": asdict(self.arch),
                "encoder": self.encoder.schedule, "decoder": self.decoder.schedule}


class StateAE(_LatentModel):
    kind = "ama1"

    def forward(self, x, tau, generator=None, stochastic=True):
        l = self.encode(x)
        z = self.bits(l, tau, generator, stochastic)
        return {"l": l, "z": z, "xhat": self.decode(z)}

    def loss(self, out, x, betas=None) -> ElboBreakdown:
        b1, _, _ = _betas(self.latent, betas)
        rec = self.rec(x, out["xhat"])
        kl = self.kl_prior_term(out["l"])
        return ElboBreakdown(total=(rec + b1 * kl).mean(), rec_x0=rec.mean(), kl_prior=kl.mean())

    def run(self, batch, tau=1.0, generator=None, stochastic=True):
        return self(batch[0], tau, generator, stochastic)

    def batch_loss(self, batch, out, betas=None):
        return self.loss(out, batch[0], betas)


class ActionAE(nn.Module):
    """Clusters latent transitions into A one-hot labels and predicts successors from (a, z0)."""

    kind = "aae"

    def __init__(self, F: int, A: int, hidden: int = 1000, dropout: float = 0.2):
        super().__init__()
        self.F, self.A = F, A
        self.action = ActionNet(F, A, hidden, dropout)
        self.apply_schedule = [("fc", hidden), ("relu",), ("bn",), ("dropout", dropout), ("fc", F)]
        self.apply_net = build(self.apply_schedule, (A + F,))

    def forward(self, z0, z1, tau, generator=None, stochastic=True):
        la = self.action(z0, z1)
        if self.training:
            a = D.gumbel_softmax_sample(la, tau, generator, stochastic)
        else:
            a = D.determinize_gs(la)
        l1hat = self.apply_net(torch.cat([a, z0], dim=-1))
        z1hat = torch.sigmoid(l1hat) if self.training else D.determinize_bc(l1hat)
        return {"la": la, "a": a, "l1hat": l1hat, "z1hat": z1hat}

    def loss(self, out, z1) -> ElboBreakdown:
        bce = nn.functional.binary_cross_entropy_with_logits(out["l1hat"], z1, reduction="none").sum(-1)
        kl = D.kl_categorical_uniform(torch.softmax(out["la"], dim=-1))
        return ElboBreakdown(total=(bce + kl).mean(), rec_successor=bce.mean(), kl_action=kl.mean())

    @torch.no_grad()
    def labels(self, z0, z1) -> torch.Tensor:
        return torch.argmax(self.action(z0, z1), dim=-1)

    def successor(self, z0, a):
        """Black-box successor function: binary z1 for state z0 and one-hot a."""
        return D.determinize_bc(self.apply_net(torch.cat([a, z0], dim=-1)))


class TwoPhaseAAE(nn.Module):
    """AMA2: a frozen state autoencoder plus an action autoencoder over its codes."""

    kind = "ama2"

    def __init__(self, image_shape, latent: D.LatentConfig, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.sae = StateAE(image_shape, latent, arch)
        self.aae = ActionAE(latent.F, latent.A, arch.action_hidden, arch.dropout)
        self.image_shape = tuple(image_shape)
        self.latent = latent
        self.arch = arch

    def encode_bits(self, x):
        return self.sae.encode_bits(x)

    def decode(self, z):
        return self.sae.decode(z)

    def describe(self) -> dict:
        d = self.sae.describe()
        d.update(kind=self.kind, aae_apply=self.aae.apply_schedule)
        return d


class CubeSpaceAE(_LatentModel):
    kind = "ama3plus"

    def __init__(self, image_shape, latent: D.LatentConfig, arch: ArchConfig = ArchConfig()):
        super().__init__(image_shape, latent, arch)
        self.action = ActionNet(latent.F, latent.A, arch.action_hidden, arch.dropout)
        self.apply_btl = BackToLogit(latent.F, latent.A)
        self.applicable = ActionPrior(latent.F, latent.A)

    def forward(self, x0, x1, tau, generator=None, stochastic=True):
        l0, l1 = self.encode(x0), self.encode(x1)
        z0 = self.bits(l0, tau, generator, stochastic)
        z1 = self.bits(l1, tau, generator, stochastic)
        la = self.action(l0, l1)
        a = self.onehot(la, tau, generator, stochastic)
        l2 = self.apply_btl(z0, a)
        z2 = self.bits(l2, tau, generator, stochastic)
        out = {"l0": l0, "l1": l1, "z0": z0, "z1": z1, "la": la, "a": a, "l2": l2, "z2": z2,
               "xhat0": self.decode(z0), "xhat1": self.decode(z1), "xhat2": self.decode(z2),
               # gradients do not reach z0 through the prior side of the action KL
               "lapp": self.applicable(z0.detach())}
        return out

    def forward_terms(self, out, x0, x1) -> dict:
        return {
            "rec_x0": self.rec(x0, out["xhat0"]),
            "rec_x1_direct": self.rec(x1, out["xhat1"]),
            "rec_x1_applied": self.rec(x1, out["xhat2"]),
            "kl_prior": self.kl_prior_term(out["l0"]),
            "kl_action": D.kl_categorical(torch.softmax(out["la"], -1), torch.softmax(out["lapp"], -1)),
            "kl_effect": D.kl_bernoulli_pair(torch.sigmoid(out["l1"]), torch.sigmoid(out["l2"])),
        }

    def loss(self, out, x0, x1, betas=None) -> ElboBreakdown:
        b1, b2, b3 = _betas(self.latent, betas)
        t = self.forward_terms(out, x0, x1)
        total = (t["rec_x0"] + 0.5 * t["rec_x1_direct"] + 0.5 * t["rec_x1_applied"]
                 + b1 * t["kl_prior"] + b2 * t["kl_action"] + 0.5 * b3 * t["kl_effect"])
        return ElboBreakdown(total=total.mean(), **{k: v.mean() for k, v in t.items()})

    def run(self, batch, tau=1.0, generator=None, stochastic=True):
        return self(batch[0], batch[1], tau, generator, stochastic)

    def batch_loss(self, batch, out, betas=None):
        return self.loss(out, batch[0], batch[1], betas)

    @torch.no_grad()
    def action_labels(self, x0, x1) -> torch.Tensor:
        """Argmax action index per pair, eval semantics."""
        was = self.training
        self.eval()
        try:
            return torch.argmax(self.action(self.encode(x0), self.encode(x1)), dim=-1)
        finally:
            self.train(was)


class BidirectionalCSAE(CubeSpaceAE):
    kind = "ama4plus"

    def __init__(self, image_shape, latent: D.LatentConfig, arch: ArchConfig = ArchConfig()):
        super().__init__(image_shape, latent, arch)
        self.regress_btl = BackToLogit(latent.F, latent.A)
        self.regressable = ActionPrior(latent.F, latent.A)

    def forward(self, x0, x1, tau, generator=None, stochastic=True):
        out = super().forward(x0, x1, tau, generator, stochastic)
        l3 = self.regress_btl(out["z1"], out["a"])
        z3 = self.bits(l3, tau, generator, stochastic)
        out.update(l3=l3, z3=z3, xhat3=self.decode(z3), lreg=self.regressable(out["z1"].detach()))
        return out

    def backward_terms(self, out, x0) -> dict:
        return {
            "rec_x0_regressed": self.rec(x0, out["xhat3"]),
            "kl_prior_x1": self.kl_prior_term(out["l1"]),
            "kl_regaction": D.kl_categorical(torch.softmax(out["la"], -1), torch.softmax(out["lreg"], -1)),
            "kl_precondition": D.kl_bernoulli_pair(torch.sigmoid(out["l0"]), torch.sigmoid(out["l3"])),
        }

    def loss(self, out, x0, x1, betas=None) -> ElboBreakdown:
        b1, b2, b3 = _betas(self.latent, betas)
        f = self.forward_terms(out, x0, x1)
        b = self.backward_terms(out, x0)
        forward = (f["rec_x0"] + 0.5 * f["rec_x1_direct"] + 0.5 * f["rec_x1_applied"]
                   + b1 * f["kl_prior"] + b2 * f["kl_action"] + 0.5 * b3 * f["kl_effect"])
        backward = (f["rec_x1_direct"] + 0.5 * f["rec_x0"] + 0.5 * b["rec_x0_regressed"]
                    + b1 * b["kl_prior_x1"] + b2 * b["kl_regaction"] + 0.5 * b3 * b["kl_precondition"])
        total = 0.5 * (forward + backward)
        terms = {**f, **b}
        return ElboBreakdown(total=total.mean(), **{k: v.mean() for k, v in terms.items()})


MODEL_KINDS = {"ama1": StateAE, "ama2": TwoPhaseAAE, "ama3plus": CubeSpaceAE, "ama4plus": BidirectionalCSAE}


def make_model(kind: str, image_shape, latent: D.LatentConfig, arch: ArchConfig = ArchConfig()):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}") from None
    return cls(image_shape, latent, arch)


# functional aliases --------------------------------------------------------

def sae_forward(model: StateAE, x, tau, generator=None):
    out = model(x, tau, generator)
    return out["l"], out["z"], out["xhat"]


def aae_forward(model: ActionAE, z0, z1, tau, generator=None):
    out = model(z0, z1, tau, generator)
    return out["la"], out["a"], out["l1hat"], out["z1hat"]


def csae_forward(model: CubeSpaceAE, x0, x1, tau, generator=None, stochastic=True):
    return CubeSpaceAE.forward(model, x0, x1, tau, generator, stochastic)


def csae_loss(model: CubeSpaceAE, out, x0, x1, betas=None) -> ElboBreakdown:
    return CubeSpaceAE.loss(model, out, x0, x1, betas)


def bicsae_forward(model: BidirectionalCSAE, x0, x1, tau, generator=None, stochastic=True):
    return model(x0, x1, tau, generator, stochastic)


def bicsae_loss(model: BidirectionalCSAE, out, x0, x1, betas=None) -> ElboBreakdown:
    return model.loss(out, x0, x1, betas)
