"""Ground-truth plan validators: parse decoded images back to configurations and check the rules."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .domains import DomainSpec, Hanoi, LightsOut, SlidingTile, TwistedLightsOut, make_domain

LIGHTSOUT_THETA = 0.01
TWISTED_THETA = 0.04
THETA_RANGE = (0.0, 0.5)
MAX_THETA_ITERATIONS = 30


@dataclass
class ValidationVerdict:
    found: bool
    valid: bool = False
    optimal: bool | None = None
    failure_step: int | None = None
    failure_reason: str = ""
    plan_length: int | None = None
    g: int | None = None
    theta: float | None = None

    def __post_init__(self):
        if self.valid and not self.found:
            raise ValueError("a plan cannot be valid without being found")
        if self.optimal and not self.valid:
            raise ValueError("a plan cannot be optimal without being valid")


@dataclass
class ParsedState:
    config: np.ndarray | None
    reason: str = ""
    theta: float | None = None
    n1: int = 0
    n2: int = 0

    @property
    def ok(self) -> bool:
        return self.config is not None and not self.reason


@dataclass
class TraceCheck:
    valid: bool
    states: list = field(default_factory=list)
    failure_step: int | None = None
    failure_reason: str = ""

    @property
    def configs(self):
        return [s.config for s in self.states]


# -- patch matching ----------------------------------------------------------------

def patches(image, rows: int, cols: int, ph: int, pw: int) -> np.ndarray:
    """(rows*cols, ph, pw, C) patches in row-major order."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[0] != rows * ph or img.shape[1] != cols * pw:
        raise ValueError(f"image of shape {img.shape[:2]} is not a {rows}x{cols} grid of {ph}x{pw} patches")
    return (img.reshape(rows, ph, cols, pw, -1).transpose(0, 2, 1, 3, 4).reshape(rows * cols, ph, pw, -1))


def patch_errors(ps: np.ndarray, tiles: np.ndarray) -> np.ndarray:
    """Mean absolute error of every patch against every ground-truth tile, (P, T)."""
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim == 3:
        tiles = tiles[..., None]
    return np.abs(ps[:, None] - tiles[None]).mean(axis=(2, 3, 4))


def match_counts(err: np.ndarray, theta: float) -> tuple[int, int]:
    """(n1 ambiguous patches, n2 unmatched patches) at threshold ``theta``."""
    hits = (err < theta).sum(axis=1)
    return int((hits > 1).sum()), int((hits == 0).sum())


def search_theta(err: np.ndarray, lo: float = THETA_RANGE[0], hi: float = THETA_RANGE[1],
                 max_iter: int = MAX_THETA_ITERATIONS) -> tuple[float, int, int, int]:
    """Binary search balancing ambiguous against unmatched patches; (theta, n1, n2, iterations)."""
    theta = (lo + hi) / 2
    n1, n2 = match_counts(err, theta)
    it = 1
    while abs(n1 - n2) > 1 and it < max_iter:
        if n1 < n2:
            lo = theta
        else:
            hi = theta
        theta = (lo + hi) / 2
        n1, n2 = match_counts(err, theta)
        it += 1
    return theta, n1, n2, it


def _assign(err: np.ndarray, theta: float) -> np.ndarray:
    """Nearest matching tile per patch, -1 where nothing is within theta."""
    out = np.argmin(err, axis=1)
    out[(err < theta).sum(axis=1) == 0] = -1
    return out


# -- sliding tile ------------------------------------------------------------------

def parse_tiles(image, domain: SlidingTile) -> ParsedState:
    s = domain.spec
    err = patch_errors(patches(image, s.rows, s.cols, s.cell, s.cell), domain.atlas)
    theta, n1, n2, _ = search_theta(err)
    if n1 and n2:
        return ParsedState(None, f"ambiguous ({n1}) and unmatched ({n2}) patches", theta, n1, n2)
    ids = _assign(err, theta)
    if (ids < 0).any():
        return ParsedState(None, f"{int((ids < 0).sum())} patches match no tile", theta, n1, n2)
    if len(set(ids.tolist())) != len(ids):
        return ParsedState(None, "duplicate tiles", theta, n1, n2)
    return ParsedState(ids, "", theta, n1, n2)


def tile_transition(c0, c1, domain: SlidingTile) -> str:
    """Empty string if legal, else the reason."""
    changed = np.flatnonzero(np.asarray(c0) != np.asarray(c1))
    if len(changed) != 2:
        return f"{len(changed)} tiles changed, expected 2"
    p, q = changed.tolist()
    if not domain.adjacent(p, q):
        return f"swapped positions {p} and {q} are not adjacent"
    if 0 not in (c0[p], c0[q]):
        return "neither swapped tile is the blank"
    return ""


def validate_tiles(images, domain: SlidingTile | DomainSpec) -> TraceCheck:
    domain = make_domain(domain) if isinstance(domain, DomainSpec) else domain
    return _check_trace([parse_tiles(im, domain) for im in images],
                        lambda a, b: tile_transition(a, b, domain))


# -- LightsOut ----------------------------------------------------------------------

def parse_lightsout(image, domain: LightsOut, twisted: bool | None = None) -> ParsedState:
    """A cell is on when it differs from the blank tile by at least theta on average."""
    if twisted is None:
        twisted = isinstance(domain, TwistedLightsOut)
    s = domain.spec
    img = np.asarray(image, dtype=np.float64)
    if twisted:
        img = TwistedLightsOut.unswirl(domain, img) if isinstance(domain, TwistedLightsOut) else img
    theta = TWISTED_THETA if twisted else LIGHTSOUT_THETA
    err = patch_errors(patches(img, s.n, s.n, s.cell, s.cell), domain.off_tile[None])[:, 0]
    return ParsedState((err >= theta).astype(np.int64), "", theta)


def lightsout_transition(c0, c1, domain: LightsOut) -> str:
    diff = (np.asarray(c0) != np.asarray(c1)).astype(np.uint8)
    if any(np.array_equal(diff, m) for m in domain.masks):
        return ""
    return f"changed cells {np.flatnonzero(diff).tolist()} are not one button's toggle pattern"


def validate_lightsout(images, domain: LightsOut | DomainSpec, twisted: bool | None = None) -> TraceCheck:
    domain = make_domain(domain) if isinstance(domain, DomainSpec) else domain
    return _check_trace([parse_lightsout(im, domain, twisted) for im in images],
                        lambda a, b: lightsout_transition(a, b, domain))


# -- Hanoi ---------------------------------------------------------------------------

def hanoi_tiles(domain: Hanoi) -> np.ndarray:
    """Ground-truth patches: index 0 is background, index d+1 is disk d."""
    s = domain.spec
    bg = np.empty((s.disk_height, s.disk_width, 3))
    bg[:] = np.asarray(domain.render_stacks([[] for _ in range(s.towers)]))[0, 0]
    disks = [np.broadcast_to(c, (s.disk_height, s.disk_width, 3)) for c in domain.colors]
    return np.stack([bg, *disks])


def parse_hanoi(image, domain: Hanoi) -> ParsedState:
    s = domain.spec
    err = patch_errors(patches(image, s.disks, s.towers, s.disk_height, s.disk_width), hanoi_tiles(domain))
    theta, n1, n2, _ = search_theta(err)
    if n1 and n2:
        return ParsedState(None, f"ambiguous ({n1}) and unmatched ({n2}) patches", theta, n1, n2)
    ids = _assign(err, theta).reshape(s.disks, s.towers)  # row 0 is the top level
    if (ids < 0).any():
        return ParsedState(None, f"{int((ids < 0).sum())} patches match nothing", theta, n1, n2)
    config = np.full(s.disks, -1)
    for t in range(s.towers):
        column = ids[::-1, t]  # bottom first
        height = int(np.argmax(column == 0)) if (column == 0).any() else len(column)
        if (column[height:] != 0).any():
            return ParsedState(None, f"floating disk on tower {t}", theta, n1, n2)
        stack = (column[:height] - 1).tolist()
        if any(a <= b for a, b in zip(stack, stack[1:])):
            return ParsedState(None, f"larger disk on a smaller one on tower {t}", theta, n1, n2)
        for d in stack:
            if config[d] >= 0:
                return ParsedState(None, f"disk {d} appears twice", theta, n1, n2)
            config[d] = t
    if (config < 0).any():
        return ParsedState(None, f"disks {np.flatnonzero(config < 0).tolist()} are missing", theta, n1, n2)
    return ParsedState(config, "", theta, n1, n2)


def hanoi_transition(c0, c1, domain: Hanoi) -> str:
    c0, c1 = np.asarray(c0), np.asarray(c1)
    moved = np.flatnonzero(c0 != c1)
    if len(moved) != 1:
        return f"{len(moved)} disks moved, expected 1"
    d = int(moved[0])
    before, after = domain.stacks(c0), domain.stacks(c1)
    if before[c0[d]][-1] != d:
        return f"disk {d} was not on top of tower {c0[d]}"
    if after[c1[d]][-1] != d:
        return f"disk {d} is not on top of tower {c1[d]}"
    return ""


def validate_hanoi(images, domain: Hanoi | DomainSpec) -> TraceCheck:
    domain = make_domain(domain) if isinstance(domain, DomainSpec) else domain
    return _check_trace([parse_hanoi(im, domain) for im in images],
                        lambda a, b: hanoi_transition(a, b, domain))


# -- traces and verdicts ----------------------------------------------------------------

def _check_trace(states: list[ParsedState], transition) -> TraceCheck:
    for i, st in enumerate(states):
        if not st.ok:
            return TraceCheck(False, states, i, f"state {i}: {st.reason}")
    for i in range(len(states) - 1):
        why = transition(states[i].config, states[i + 1].config)
        if why:
            return TraceCheck(False, states, i + 1, f"transition {i}->{i + 1}: {why}")
    return TraceCheck(True, states)


def validate_trace(images, spec: DomainSpec) -> TraceCheck:
    dom = make_domain(spec)
    if isinstance(dom, SlidingTile):
        return validate_tiles(images, dom)
    if isinstance(dom, LightsOut):
        return validate_lightsout(images, dom)
    if isinstance(dom, Hanoi):
        return validate_hanoi(images, dom)
    raise ValueError(f"no validator for domain kind {spec.kind!r}")


def judge(spec: DomainSpec, init, goal, g: int | None, images, found: bool = True) -> ValidationVerdict:
    """found/valid/optimal for one instance from the decoded plan images (init first, goal last)."""
    if not found:
        return ValidationVerdict(False, failure_reason="no plan", g=g)
    images = list(images)
    length = len(images) - 1
    check = validate_trace(images, spec)
    theta = next((s.theta for s in check.states if s.theta is not None), None)
    v = ValidationVerdict(True, plan_length=length, g=g, theta=theta)
    if not check.valid:
        v.failure_step, v.failure_reason = check.failure_step, check.failure_reason
        v.optimal = False if g is not None else None
        return v
    if not np.array_equal(check.configs[0], np.asarray(init)):
        v.failure_step, v.failure_reason = 0, "decoded initial state does not match the instance"
    elif not np.array_equal(check.configs[-1], np.asarray(goal)):
        v.failure_step, v.failure_reason = length, "decoded final state does not match the goal"
    else:
        v.valid = True
    v.optimal = (v.valid and length == g) if g is not None else None
    return v


VERDICT_FIELDS = ["instance", "domain", "kind", "heuristic", "F", "beta1", "beta3", "epsilon",
                  "found", "valid", "optimal", "plan_length", "g", "theta", "failure_step", "failure_reason"]


def write_verdicts(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=VERDICT_FIELDS, delimiter="\t", extrasaction="ignore",
                           restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else (f"{v:.6g}" if isinstance(v, float) else v))
                        for k, v in r.items()})


def verdict_row(v: ValidationVerdict, **context) -> dict:
    return {**context, **asdict(v)}


# -- visualization ---------------------------------------------------------------------

def decode_states(model, states, normalizer=None) -> np.ndarray:
    """Bit vectors (N, F) -> de-normalized images clipped to [0, 1]."""
    import torch

    states = np.asarray(states, dtype=np.float32)
    if len(states) == 0:
        return np.zeros((0, *model.image_shape))
    model.eval()
    with torch.no_grad():
        x = model.decode(torch.as_tensor(states)).numpy().astype(np.float64)
    if normalizer is not None:
        x = normalizer.denormalize(x)
    return np.clip(x, 0.0, 1.0)


def contact_sheet(images, columns: int = 8, pad: int = 1) -> np.ndarray:
    images = np.asarray(images)
    n, h, w, c = images.shape
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    sheet = np.ones((rows * (h + pad) + pad, columns * (w + pad) + pad, c))
    for i, im in enumerate(images):
        r, k = divmod(i, columns)
        sheet[pad + r * (h + pad):pad + r * (h + pad) + h, pad + k * (w + pad):pad + k * (w + pad) + w] = im
    return sheet


def save_png(image, path, scale: int = 8) -> None:
    from PIL import Image

    arr = (np.clip(np.asarray(image), 0, 1) * 255).round().astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    im = Image.fromarray(arr)
    im.resize((im.width * scale, im.height * scale), Image.NEAREST).save(path)


def visualize(states, model, normalizer=None, out_dir=None, prefix: str = "step") -> np.ndarray:
    """Decode a latent trace; optionally write one PNG per step plus a contact sheet."""
    images = decode_states(model, states, normalizer)
    if out_dir is not None and len(images):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(images):
            save_png(im, out / f"{prefix}_{i:03d}.png")
        save_png(contact_sheet(images), out / f"{prefix}_sheet.png")
    return images
