"""Minibatch training, batch-norm finalization and checkpoint I/O."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import discrete as D
from .models import ArchConfig, BidirectionalCSAE, CubeSpaceAE, StateAE, TwoPhaseAAE, make_model
from .networks import finalize_batchnorm

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cubespace-checkpoint/1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 400
    learning_rate: float = 1e-3
    grad_clip_norm: float = 0.1
    seed: int = 0
    schedule: D.AnnealSchedule = field(default_factory=D.AnnealSchedule)
    latent: D.LatentConfig = field(default_factory=D.LatentConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if min(self.epochs, self.batch_size) <= 0 or self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("epochs, batch_size, learning_rate and grad_clip_norm must be positive")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized defaults: short anneal, small latent/action spaces, narrow convolutions.

        With only ~450 training pairs, small batches and a larger step size buy
        enough updates in 300 epochs; beta3=100 is one point of the usual grid.
        """
        base = cls(epochs=300, batch_size=10, learning_rate=3e-3, seed=0,
                   schedule=D.AnnealSchedule(5.0, 0.5, 150),
                   latent=D.LatentConfig(F=36, A=128, epsilon=0.1, beta1=1, beta2=1, beta3=100),
                   arch=ArchConfig(channels=16, action_hidden=256))
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sched = D.AnnealSchedule(**d.pop("schedule", {}))
        latent = D.LatentConfig(**d.pop("latent", {}))
        arch = ArchConfig(**d.pop("arch", {}))
        return cls(schedule=sched, latent=latent, arch=arch, **d)


# -- batching -------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:  # batch norm needs two samples in train mode
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _check_finite(br, epoch: int) -> None:
    for name, v in br.items():
        if not torch.isfinite(v):
            raise TrainingDiverged(f"loss term {name!r} became {float(v.detach())} at epoch {epoch}")


def _mean_breakdown(rows: list[tuple[int, dict]]) -> dict:
    n = sum(w for w, _ in rows)
    keys = rows[0][1].keys()
    return {k: sum(w * r[k] for w, r in rows) / n for k in keys}


def _fit(model, data: tuple, config: TrainConfig, val: tuple | None, params, run, loss,
         tag: str = "", log_rows: list | None = None):
    """Generic loop; ``run(model, batch, tau, gen)`` and ``loss(model, batch, out)``."""
    rng = np.random.default_rng(config.seed)
    gen = D.make_generator(config.seed + 1)
    opt = torch.optim.RAdam(params, lr=config.learning_rate)
    n = len(data[0])
    rows = [] if log_rows is None else log_rows
    for epoch in range(config.epochs):
        tau = config.schedule(epoch)
        model.train()
        acc = []
        for idx in _batches(n, config.batch_size, rng):
            batch = tuple(t[idx] for t in data)
            out = run(model, batch, tau, gen)
            br = loss(model, batch, out)
            _check_finite(br, epoch)
            opt.zero_grad()
            br.total.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
            opt.step()
            acc.append((len(idx), br.as_floats()))
        rows.append({"stage": tag, "epoch": epoch, "tau": tau, "split": "train", **_mean_breakdown(acc)})
        if val is not None and len(val[0]) > 0:
            model.eval()
            with torch.no_grad():
                out = run(model, val, tau, gen)
                rows.append({"stage": tag, "epoch": epoch, "tau": tau, "split": "val",
                             **loss(model, val, out).as_floats()})
    return rows


def _tensors(*arrays):
    return tuple(torch.as_tensor(np.asarray(a), dtype=torch.float32) for a in arrays)


def _chunks(data: tuple, size: int = 256):
    n = len(data[0])
    return [tuple(t[i:i + size] for t in data) for i in range(0, n, size)]


def finalize(model, x0, x1) -> None:
    """Whole-training-set batch-norm statistics for every model kind."""
    x0, x1 = _tensors(x0, x1)
    if isinstance(model, TwoPhaseAAE):
        finalize_batchnorm(model.sae, lambda b: model.sae(b[0], 1.0), _chunks((torch.cat([x0, x1]),)))
        z0, z1 = model.sae.encode_bits(x0), model.sae.encode_bits(x1)
        finalize_batchnorm(model.aae, lambda b: model.aae(b[0], b[1], 1.0), _chunks((z0, z1)))
    elif isinstance(model, StateAE):
        finalize_batchnorm(model, lambda b: model(b[0], 1.0), _chunks((torch.cat([x0, x1]),)))
    else:
        finalize_batchnorm(model, lambda b: model(b[0], b[1], 1.0), _chunks((x0, x1)))


def train(kind: str, x0, x1, config: TrainConfig, val: tuple | None = None, image_shape=None):
    """Train a model of ``kind`` on normalized pairs; returns (finalized model, log rows)."""
    torch.manual_seed(config.seed)
    x0t, x1t = _tensors(x0, x1)
    valt = _tensors(*val) if val is not None else None
    shape = tuple(image_shape or x0t.shape[1:])
    model = make_model(kind, shape, config.latent, config.arch)
    rows: list[dict] = []

    if isinstance(model, (StateAE, TwoPhaseAAE)):
        sae = model.sae if isinstance(model, TwoPhaseAAE) else model
        images = (torch.cat([x0t, x1t]),)
        vimages = (torch.cat(valt),) if valt is not None else None
        _fit(sae, images, config, vimages, list(sae.parameters()),
             lambda m, b, tau, g: m(b[0], tau, g), lambda m, b, o: m.loss(o, b[0]), "sae", rows)
        if isinstance(model, TwoPhaseAAE):
            finalize_batchnorm(sae, lambda b: sae(b[0], 1.0), _chunks(images))
            for p in sae.parameters():
                p.requires_grad_(False)
            z = (sae.encode_bits(x0t), sae.encode_bits(x1t))
            vz = (sae.encode_bits(valt[0]), sae.encode_bits(valt[1])) if valt is not None else None
            _fit(model.aae, z, config, vz, list(model.aae.parameters()),
                 lambda m, b, tau, g: m(b[0], b[1], tau, g), lambda m, b, o: m.loss(o, b[1]), "aae", rows)
    else:
        _fit(model, (x0t, x1t), config, valt, list(model.parameters()),
             lambda m, b, tau, g: m(b[0], b[1], tau, g), lambda m, b, o: m.loss(o, b[0], b[1]),
             kind, rows)
    finalize(model, x0t, x1t)
    return model, rows


def write_log(rows: list[dict], path) -> None:
    """Tab-separated training log, one row per (stage, epoch, split)."""
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, delimiter="\t", restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def read_log(path) -> list[dict]:
    with open(path) as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    for r in rows:
        for k, v in r.items():
            if k not in ("stage", "split") and v != "":
                r[k] = float(v)
    return rows


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(model, path, config: TrainConfig | None = None, normalizer=None, extra: dict | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "describe": json.dumps(model.describe()),
        "image_shape": list(model.image_shape),
        "latent": asdict(model.latent),
        "arch": asdict(model.arch),
        "config": config.to_dict() if config is not None else None,
        "state_dict": model.state_dict(),
        "normalizer": None if normalizer is None else {"mean": np.asarray(normalizer.mean),
                                                       "std": np.asarray(normalizer.std)},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model in eval mode, payload dict)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    model = make_model(payload["kind"], payload["image_shape"], D.LatentConfig(**payload["latent"]),
                       ArchConfig(**payload["arch"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def is_cube_space(model) -> bool:
    return isinstance(model, CubeSpaceAE)


def is_bidirectional(model) -> bool:
    return isinstance(model, BidirectionalCSAE)


