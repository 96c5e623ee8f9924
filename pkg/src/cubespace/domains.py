"""Procedural image domains, transition datasets and planning instances.

Ground-truth configurations are small integer vectors:

* LightsOut: ``n*n`` bits, row-major
* sliding tile: ``rows*cols`` tile ids by position, 0 is the blank
* Hanoi: tower index of each disk, disk 0 is the smallest

Images are float arrays in [0, 1] of shape ``(H, W, C)``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DATASET_FORMAT = "cubespace-dataset/1"


@dataclass(frozen=True)
class DomainSpec:
    kind: str = "lights_out"  # lights_out | twisted_lights_out | sliding_tile | hanoi
    n: int = 3
    rows: int = 3
    cols: int = 3
    disks: int = 3
    towers: int = 3
    cell: int = 3
    disk_height: int = 1
    disk_width: int = 4
    atlas: str | None = None
    swirl_strength: float = 3.0
    swirl_radius_ratio: float = 0.75

    def __post_init__(self):
        if self.kind not in DOMAINS:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @property
    def domain(self) -> "Domain":
        return make_domain(self)


class Domain:
    spec: DomainSpec

    def __init__(self, spec: DomainSpec):
        self.spec = spec

    # subclasses implement: image_shape, num_states, render, neighbors, goal, random_state
    def key(self, config) -> tuple:
        return tuple(int(v) for v in config)


class LightsOut(Domain):
    def __init__(self, spec: DomainSpec):
        super().__init__(spec)
        n = spec.n
        self.masks = np.zeros((n * n, n * n), dtype=np.uint8)
        for r in range(n):
            for c in range(n):
                for dr, dc in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < n and 0 <= cc < n:
                        self.masks[r * n + c, rr * n + cc] = 1
        k = spec.cell
        self.on_tile = np.zeros((k, k), dtype=np.float64)
        self.on_tile[k // 2, :] = 1.0
        self.on_tile[:, k // 2] = 1.0
        self.off_tile = np.zeros((k, k), dtype=np.float64)

    @property
    def image_shape(self):
        s = self.spec.n * self.spec.cell
        return (s, s, 1)

    @property
    def num_states(self) -> int:
        return 2 ** (self.spec.n**2)

    def goal(self):
        return np.zeros(self.spec.n**2, dtype=np.int64)

    def random_state(self, rng):
        return rng.integers(0, 2, self.spec.n**2)

    def press(self, config, button: int):
        return np.asarray(config) ^ self.masks[button]

    def neighbors(self, config):
        return [self.press(config, b) for b in range(self.spec.n**2)]

    def render(self, config):
        n, k = self.spec.n, self.spec.cell
        grid = np.asarray(config).reshape(n, n)
        img = np.zeros((n * k, n * k), dtype=np.float64)
        for r in range(n):
            for c in range(n):
                if grid[r, c]:
                    img[r * k:(r + 1) * k, c * k:(c + 1) * k] = self.on_tile
        return img[:, :, None]


class TwistedLightsOut(LightsOut):
    def swirl(self, image):
        return swirl_image(image, self.spec.swirl_strength, self.spec.swirl_radius_ratio)

    def unswirl(self, image):
        return swirl_image(image, -self.spec.swirl_strength, self.spec.swirl_radius_ratio)

    def render(self, config):
        return self.swirl(super().render(config))


def swirl_image(image, strength: float, radius_ratio: float):
    """Swirl about the image centre with linear interpolation; negative strength inverts."""
    from skimage.transform import swirl

    img = np.asarray(image, dtype=np.float64)
    radius = radius_ratio * img.shape[0]
    out = swirl(img[:, :, 0] if img.ndim == 3 else img, strength=strength, radius=radius,
                order=1, mode="constant", cval=0.0, preserve_range=True)
    return out[:, :, None] if img.ndim == 3 else out


def procedural_atlas(num_tiles: int, size: int, seed: int = 7) -> np.ndarray:
    """Distinct high-contrast binary glyphs; tile 0 (the blank) is all zeros."""
    rng = np.random.default_rng(seed)
    atlas = np.zeros((num_tiles, size, size), dtype=np.float64)
    seen: list[np.ndarray] = []
    t = 1
    while t < num_tiles:
        glyph = (rng.random((size, size)) < 0.5).astype(np.float64)
        if glyph.mean() < 0.25 or any(np.abs(glyph - g).mean() < 0.3 for g in seen):
            continue
        seen.append(glyph)
        atlas[t] = glyph
        t += 1
    return atlas


def load_atlas(path, num_tiles: int, size: int) -> np.ndarray:
    """Tile images from a ``.npy`` array (num_tiles, h, w) or a directory of ``<id>.png`` files."""
    from PIL import Image

    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        arr = np.stack([np.asarray(Image.open(path / f"{t}.png").convert("L"), dtype=np.float64)
                        for t in range(num_tiles)])
    if arr.max() > 1:
        arr = arr / 255.0
    if arr.shape[0] != num_tiles:
        raise ValueError(f"atlas has {arr.shape[0]} tiles, expected {num_tiles}")
    if arr.shape[1:] != (size, size):
        arr = np.stack([np.asarray(Image.fromarray((a * 255).astype(np.uint8)).resize((size, size)),
                                   dtype=np.float64) / 255.0 for a in arr])
    return arr


class SlidingTile(Domain):
    def __init__(self, spec: DomainSpec):
        super().__init__(spec)
        n = spec.rows * spec.cols
        self.atlas = (load_atlas(spec.atlas, n, spec.cell) if spec.atlas
                      else procedural_atlas(n, spec.cell))

    @property
    def image_shape(self):
        return (self.spec.rows * self.spec.cell, self.spec.cols * self.spec.cell, 1)

    @property
    def num_states(self) -> int:
        return math.factorial(self.spec.rows * self.spec.cols)

    def goal(self):
        return np.arange(self.spec.rows * self.spec.cols)

    def random_state(self, rng):
        return rng.permutation(self.spec.rows * self.spec.cols)

    def adjacent(self, p: int, q: int) -> bool:
        cols = self.spec.cols
        return abs(p // cols - q // cols) + abs(p % cols - q % cols) == 1

    def neighbors(self, config):
        config = np.asarray(config)
        rows, cols = self.spec.rows, self.spec.cols
        b = int(np.flatnonzero(config == 0)[0])
        r, c = divmod(b, cols)
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols:
                nxt = config.copy()
                q = rr * cols + cc
                nxt[b], nxt[q] = nxt[q], nxt[b]
                out.append(nxt)
        return out

    def render(self, config):
        rows, cols, k = self.spec.rows, self.spec.cols, self.spec.cell
        img = np.zeros((rows * k, cols * k), dtype=np.float64)
        for p, t in enumerate(np.asarray(config)):
            r, c = divmod(p, cols)
            img[r * k:(r + 1) * k, c * k:(c + 1) * k] = self.atlas[t]
        return img[:, :, None]


HANOI_BACKGROUND = (0.5, 0.5, 0.5)


class Hanoi(Domain):
    def __init__(self, spec: DomainSpec):
        super().__init__(spec)
        d = spec.disks
        # evenly spaced hues, full saturation; distinct from the gray background
        import colorsys

        self.colors = np.array([colorsys.hsv_to_rgb(i / d, 1.0, 1.0) for i in range(d)])

    @property
    def image_shape(self):
        s = self.spec
        return (s.disk_height * s.disks, s.disk_width * s.towers, 3)

    @property
    def num_states(self) -> int:
        return self.spec.towers ** self.spec.disks

    def goal(self):
        return np.full(self.spec.disks, self.spec.towers - 1)

    def random_state(self, rng):
        return rng.integers(0, self.spec.towers, self.spec.disks)

    def stacks(self, config) -> list[list[int]]:
        """Disks on each tower, bottom first (largest first)."""
        config = np.asarray(config)
        return [sorted(np.flatnonzero(config == t).tolist(), reverse=True) for t in range(self.spec.towers)]

    def neighbors(self, config):
        config = np.asarray(config)
        stacks = self.stacks(config)
        out = []
        for src in range(self.spec.towers):
            if not stacks[src]:
                continue
            disk = stacks[src][-1]
            for dst in range(self.spec.towers):
                if dst == src or (stacks[dst] and stacks[dst][-1] < disk):
                    continue
                nxt = config.copy()
                nxt[disk] = dst
                out.append(nxt)
        return out

    def render_stacks(self, stacks) -> np.ndarray:
        s = self.spec
        h, w = s.disk_height, s.disk_width
        H, W, _ = self.image_shape
        img = np.empty((H, W, 3), dtype=np.float64)
        img[:] = HANOI_BACKGROUND
        for t, stack in enumerate(stacks):
            for level, disk in enumerate(stack):
                row = H - (level + 1) * h
                img[row:row + h, t * w:(t + 1) * w] = self.colors[disk]
        return img

    def render(self, config):
        return self.render_stacks(self.stacks(config))


DOMAINS = {"lights_out": LightsOut, "twisted_lights_out": TwistedLightsOut,
           "sliding_tile": SlidingTile, "hanoi": Hanoi}

_CACHE: dict[DomainSpec, Domain] = {}


def make_domain(spec: DomainSpec) -> Domain:
    if spec not in _CACHE:
        _CACHE[spec] = DOMAINS[spec.kind](spec)
    return _CACHE[spec]


def render(spec: DomainSpec, config) -> np.ndarray:
    return make_domain(spec).render(config)


def neighbors(spec: DomainSpec, config) -> list[np.ndarray]:
    return make_domain(spec).neighbors(config)


def bfs_distances(spec: DomainSpec, start, max_depth: int | None = None) -> dict[tuple, int]:
    """Breadth-first distances from ``start``; with max_depth the search stops at that plateau."""
    dom = make_domain(spec)
    start = np.asarray(start)
    dist = {dom.key(start): 0}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        d = dist[dom.key(c)]
        if max_depth is not None and d >= max_depth:
            continue
        for nxt in dom.neighbors(c):
            k = dom.key(nxt)
            if k not in dist:
                dist[k] = d + 1
                queue.append(nxt)
    return dist


# -- datasets -----------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-pixel standardization with training-set statistics.

    Pixels that never vary keep a zero std: they are divided by 1 on the way in
    and restored to their constant mean on the way out.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images: np.ndarray) -> "Normalizer":
        return cls(images.mean(axis=0), images.std(axis=0))

    def normalize(self, images):
        return (np.asarray(images, dtype=np.float64) - self.mean) / np.where(self.std > 0, self.std, 1.0)

    def denormalize(self, images):
        return np.asarray(images, dtype=np.float64) * self.std + self.mean


@dataclass
class TransitionDataset:
    spec: DomainSpec
    x0: np.ndarray  # raw images (N, H, W, C)
    x1: np.ndarray
    c0: np.ndarray  # ground-truth configurations (N, K)
    c1: np.ndarray
    splits: dict = field(default_factory=dict)  # name -> index array
    normalizer: Normalizer | None = None

    def __len__(self):
        return len(self.x0)

    def split(self, name: str, normalized: bool = True):
        idx = self.splits[name]
        x0, x1 = self.x0[idx], self.x1[idx]
        if normalized:
            x0, x1 = self.normalizer.normalize(x0), self.normalizer.normalize(x1)
        return x0.astype(np.float32), x1.astype(np.float32)

    def save(self, path):
        np.savez_compressed(
            path, format=DATASET_FORMAT, spec=json.dumps(asdict(self.spec)),
            x0=self.x0, x1=self.x1, c0=self.c0, c1=self.c1,
            mean=self.normalizer.mean, std=self.normalizer.std,
            **{f"split_{k}": v for k, v in self.splits.items()})

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        with np.load(path, allow_pickle=False) as f:
            if str(f["format"]) != DATASET_FORMAT:
                raise ValueError(f"{path}: not a {DATASET_FORMAT} archive")
            spec = DomainSpec(**json.loads(str(f["spec"])))
            splits = {k[len("split_"):]: f[k] for k in f.files if k.startswith("split_")}
            return cls(spec, f["x0"], f["x1"], f["c0"], f["c1"], splits,
                       Normalizer(f["mean"], f["std"]))


def split_indices(n: int, rng, fractions=(0.9, 0.05, 0.05)) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": np.sort(perm[:n_train]), "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:])}


def sample_transitions(spec: DomainSpec, count: int, rng) -> TransitionDataset:
    """Uniform configuration, uniform successor; normalized with training-split statistics."""
    if count <= 0:
        raise ValueError("count must be positive")
    dom = make_domain(spec)
    c0, c1 = [], []
    for _ in range(count):
        c = dom.random_state(rng)
        succ = dom.neighbors(c)
        c0.append(c)
        c1.append(succ[rng.integers(len(succ))])
    c0, c1 = np.array(c0), np.array(c1)
    x0 = np.stack([dom.render(c) for c in c0])
    x1 = np.stack([dom.render(c) for c in c1])
    splits = split_indices(count, rng)
    tr = splits["train"]
    norm = Normalizer.fit(np.concatenate([x0[tr], x1[tr]]))
    return TransitionDataset(spec, x0, x1, c0, c1, splits, norm)


@dataclass
class Instance:
    init: np.ndarray  # configuration
    goal: np.ndarray
    g: int
    x_init: np.ndarray  # raw image
    x_goal: np.ndarray


def sample_instances(spec: DomainSpec, g: int, count: int, rng) -> list[Instance]:
    """Initial states drawn from the exact-g plateau of a backward search from the canonical goal."""
    dom = make_domain(spec)
    goal = dom.goal()
    # all shipped domains are reversible, so forward neighbors are also predecessors
    dist = bfs_distances(spec, goal, max_depth=g)
    frontier = sorted(k for k, d in dist.items() if d == g)
    if not frontier:
        raise ValueError(f"no state at distance {g} from the goal; maximum available g is {max(dist.values())}")
    replace = len(frontier) < count
    picks = rng.choice(len(frontier), size=count, replace=replace)
    out = []
    for i in picks:
        init = np.array(frontier[i])
        out.append(Instance(init, goal.copy(), g, dom.render(init), dom.render(goal)))
    return out


def save_instances(instances: list[Instance], spec: DomainSpec, path) -> None:
    np.savez_compressed(
        path, format="cubespace-instances/1", spec=json.dumps(asdict(spec)),
        init=np.stack([i.init for i in instances]), goal=np.stack([i.goal for i in instances]),
        g=np.array([i.g for i in instances]),
        x_init=np.stack([i.x_init for i in instances]), x_goal=np.stack([i.x_goal for i in instances]))


def load_instances(path) -> tuple[DomainSpec, list[Instance]]:
    with np.load(path, allow_pickle=False) as f:
        spec = DomainSpec(**json.loads(str(f["spec"])))
        return spec, [Instance(f["init"][i], f["goal"][i], int(f["g"][i]), f["x_init"][i], f["x_goal"][i])
                      for i in range(len(f["g"]))]


def corrupt(images, noise_sigma: float, rng) -> np.ndarray:
    images = np.asarray(images)
    if noise_sigma == 0:
        return images.copy()
    return images + rng.normal(0.0, noise_sigma, images.shape).astype(images.dtype)
