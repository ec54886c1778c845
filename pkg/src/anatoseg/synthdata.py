"""Synthetic nested-anatomy scenes, partially labeled records, augmentation and image pools.

A scene lives on a square canonical canvas.  Every class mask is a boolean
predicate over canvas coordinates built constructively from its parents
(``tuft = tuft_shape & capsule``, ``dt = blobs & cortex & ~capsule & ~pt`` ...),
so rendering any view on any sampling grid keeps subset and exclusion
relations exact pixel by pixel.

Views: scale k (0=5x, 1=10x, 2=20x, 3=40x) is the centered window of extent
``canvas / 2**k`` resampled to ``size`` pixels.
"""

from __future__ import annotations

import json
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .taxonomy import TaxonomyGraph, load_taxonomy

SPLITS = ("train", "val", "test")
SPLIT_RATIO = (6, 1, 3)


@dataclass
class GeneratorConfig:
    canvas: int = 256
    size: int = 128
    scenes: int = 50
    noise: float = 0.02
    seed: int = 0

    @classmethod
    def from_mapping(cls, values: dict) -> "GeneratorConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            k = k.replace("-", "_")
            if k in known:
                kwargs[k] = float(v) if k == "noise" else int(v)
        return cls(**kwargs)


@dataclass(frozen=True)
class SampleRecord:
    image: str
    mask: str
    class_id: int
    scale_id: int
    split: str
    scene: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------------------
# scene geometry

@dataclass
class Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.cx, y - self.cy
        u = (c * dx + s * dy) / self.rx
        v = (-s * dx + c * dy) / self.ry
        return u * u + v * v <= 1.0

    def radial(self, x, y):
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.cx, y - self.cy
        u = (c * dx + s * dy) / self.rx
        v = (-s * dx + c * dy) / self.ry
        return np.sqrt(u * u + v * v)


@dataclass
class Glomerulus:
    capsule: Ellipse
    tuft: Ellipse
    podocytes: list[tuple[float, float, float]]
    mesangial: list[tuple[float, float, float]]


@dataclass
class SceneSpec:
    canvas: int
    normal: tuple[float, float]
    offset: float
    wave: tuple[float, float, float]  # amplitude, frequency, phase of the region boundary
    glomeruli: list[Glomerulus]
    dt: list[Ellipse]
    pt: list[Ellipse]
    texture_seed: int


def _region_field(spec: SceneSpec, x, y):
    c = spec.canvas / 2
    nx, ny = spec.normal
    along = -ny * (x - c) + nx * (y - c)
    amp, freq, phase = spec.wave
    return nx * (x - c) + ny * (y - c) + amp * np.sin(freq * along + phase) - spec.offset


def _disks(x, y, disks):
    out = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for cx, cy, r in disks:
        out |= (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    return out


def class_masks(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    """Evaluate every class predicate at canvas coordinates (x, y)."""
    cortex = _region_field(spec, x, y) < 0
    medulla = ~cortex
    capsule = np.zeros_like(cortex)
    tuft = np.zeros_like(cortex)
    pod = np.zeros_like(cortex)
    mes = np.zeros_like(cortex)
    for g in spec.glomeruli:
        cap_g = g.capsule.inside(x, y) & cortex
        tuft_g = g.tuft.inside(x, y) & cap_g
        pod_g = _disks(x, y, g.podocytes) & tuft_g
        mes_g = _disks(x, y, g.mesangial) & tuft_g & ~pod_g
        capsule |= cap_g
        tuft |= tuft_g
        pod |= pod_g
        mes |= mes_g
    pt = np.zeros_like(cortex)
    for e in spec.pt:
        pt |= e.inside(x, y)
    pt &= cortex & ~capsule
    dt = np.zeros_like(cortex)
    for e in spec.dt:
        dt |= e.inside(x, y)
    dt &= cortex & ~capsule & ~pt
    return {"medulla": medulla, "cortex": cortex, "dt": dt, "pt": pt, "capsule": capsule,
            "tuft": tuft, "podocyte": pod, "mesangial": mes}


def sample_scene(canvas: int, rng: np.random.Generator) -> SceneSpec:
    S = canvas
    c = S / 2
    theta = rng.uniform(0, 2 * math.pi)
    normal = (math.cos(theta), math.sin(theta))
    offset = rng.uniform(0.16, 0.27) * S
    wave = (rng.uniform(0.01, 0.03) * S, rng.uniform(2.0, 5.0) / S * 2 * math.pi, rng.uniform(0, 2 * math.pi))
    spec = SceneSpec(S, normal, offset, wave, [], [], [], int(rng.integers(0, 2**31)))

    def in_cortex(px, py, margin):
        return _region_field(spec, np.float64(px), np.float64(py)) < -margin

    # central glomerulus keeps cells inside the narrowest (20x / 40x) views
    centers = [(c + rng.uniform(-0.025, 0.025) * S, c + rng.uniform(-0.025, 0.025) * S)]
    tries = 0
    n_extra = int(rng.integers(1, 4))
    while len(centers) < 1 + n_extra and tries < 200:
        tries += 1
        px, py = rng.uniform(0.1, 0.9, size=2) * S
        if in_cortex(px, py, 0.14 * S) and all(math.hypot(px - qx, py - qy) > 0.36 * S for qx, qy in centers):
            centers.append((px, py))
    for k, (gx, gy) in enumerate(centers):
        r = rng.uniform(0.12, 0.15) * S if k == 0 else rng.uniform(0.08, 0.12) * S
        capsule = Ellipse(gx, gy, r * rng.uniform(0.95, 1.1), r * rng.uniform(0.85, 1.0), rng.uniform(0, math.pi))
        shrink = rng.uniform(0.7, 0.78)
        tuft = Ellipse(gx + rng.uniform(-0.04, 0.04) * r, gy + rng.uniform(-0.04, 0.04) * r,
                       capsule.rx * shrink, capsule.ry * shrink, capsule.angle)
        pods, mess = [], []
        cell_r = 0.012 * S
        for _ in range(int(rng.integers(10, 16))):
            a = rng.uniform(0, 2 * math.pi)
            rr = rng.uniform(0.62, 0.88)
            pods.append(_on_ellipse(tuft, a, rr) + (cell_r * rng.uniform(0.8, 1.2),))
        for _ in range(int(rng.integers(5, 10))):
            a = rng.uniform(0, 2 * math.pi)
            rr = rng.uniform(0.0, 0.5)
            mess.append(_on_ellipse(tuft, a, rr) + (cell_r * rng.uniform(0.9, 1.3),))
        spec.glomeruli.append(Glomerulus(capsule, tuft, pods, mess))

    for _ in range(400):
        if len(spec.dt) + len(spec.pt) >= 60:
            break
        px, py = rng.uniform(0, 1, size=2) * S
        if not in_cortex(px, py, 0.0):
            continue
        if any(g.capsule.radial(px, py) < 1.35 for g in spec.glomeruli):
            continue
        if any(math.hypot(px - e.cx, py - e.cy) < (e.rx + 0.03 * S) for e in spec.dt + spec.pt):
            continue
        rx = rng.uniform(0.035, 0.055) * S
        e = Ellipse(px, py, rx, rx * rng.uniform(0.55, 0.85), rng.uniform(0, math.pi))
        (spec.pt if rng.uniform() < 0.5 else spec.dt).append(e)
    return spec


def _on_ellipse(e: Ellipse, a: float, rr: float) -> tuple[float, float]:
    u, v = rr * e.rx * math.cos(a), rr * e.ry * math.sin(a)
    c, s = math.cos(e.angle), math.sin(e.angle)
    return (e.cx + c * u - s * v, e.cy + s * u + c * v)


# ---------------------------------------------------------------------------
# rendering

PALETTE = {
    "interstitium": (0.93, 0.80, 0.86),
    "medulla": (0.96, 0.90, 0.92),
    "medulla_streak": (0.86, 0.74, 0.82),
    "pt": (0.84, 0.40, 0.56),
    "dt": (0.70, 0.60, 0.88),
    "lumen": (0.98, 0.96, 0.98),
    "bowman": (0.98, 0.97, 0.98),
    "capsule_rim": (0.55, 0.30, 0.55),
    "tuft": (0.72, 0.48, 0.78),
    "podocyte": (0.22, 0.16, 0.55),
    "mesangial": (0.58, 0.12, 0.36),
}


def _value_noise(x, y, seed: int, cell: float) -> np.ndarray:
    """Smooth noise in [-1, 1], bilinear over a seeded lattice; a pure function of coordinates."""
    gx, gy = x / cell, y / cell
    ix, iy = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
    fx, fy = gx - ix, gy - iy

    def lattice(a, b):
        h = (a * 73856093) ^ (b * 19349663) ^ (seed * 83492791)
        h = (h ^ (h >> 13)) * 1274126177
        return ((h ^ (h >> 16)) & 0xFFFF) / 32767.5 - 1.0

    v00, v10 = lattice(ix, iy), lattice(ix + 1, iy)
    v01, v11 = lattice(ix, iy + 1), lattice(ix + 1, iy + 1)
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy


def render(spec: SceneSpec, x: np.ndarray, y: np.ndarray, masks: dict[str, np.ndarray],
           rng: np.random.Generator, noise: float) -> np.ndarray:
    """RGB image in [0, 1], shape (H, W, 3), for coordinates (x, y)."""
    S = spec.canvas
    out = np.empty(x.shape + (3,), dtype=np.float64)

    def paint(region, key, jitter=0.0, cell=0.03):
        tex = _value_noise(x, y, spec.texture_seed + list(PALETTE).index(key), cell * S) if jitter else 0.0
        col = np.asarray(PALETTE[key])
        for ch in range(3):
            out[..., ch] = np.where(region, col[ch] * (1.0 + jitter * tex), out[..., ch])

    nx, ny = spec.normal
    along = -ny * x + nx * y
    streak = np.sin(along * (2 * math.pi / (0.03 * S))) > 0.55
    paint(np.ones_like(masks["cortex"]), "interstitium", 0.04)
    paint(masks["medulla"], "medulla", 0.03)
    paint(masks["medulla"] & streak, "medulla_streak", 0.03)
    paint(masks["pt"], "pt", 0.10, 0.01)
    paint(masks["dt"], "dt", 0.06, 0.02)
    lumen = np.zeros_like(masks["dt"])
    for e in spec.dt:
        lumen |= e.radial(x, y) < 0.35
    paint(masks["dt"] & lumen, "lumen")
    rim = np.zeros_like(masks["capsule"])
    for g in spec.glomeruli:
        r = g.capsule.radial(x, y)
        rim |= (r > 0.93) & (r <= 1.0)
    paint(masks["capsule"], "bowman", 0.02)
    paint(masks["capsule"] & rim, "capsule_rim", 0.05)
    paint(masks["tuft"], "tuft", 0.10, 0.015)
    paint(masks["podocyte"], "podocyte", 0.08, 0.005)
    paint(masks["mesangial"], "mesangial", 0.08, 0.005)
    out += rng.normal(0.0, noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def view_grid(canvas: int, size: int, scale_id: int) -> tuple[np.ndarray, np.ndarray]:
    extent = canvas / (2 ** scale_id)
    x0 = (canvas - extent) / 2
    t = x0 + (np.arange(size) + 0.5) * (extent / size)
    return np.meshgrid(t, t, indexing="xy")


def render_view(spec: SceneSpec, size: int, scale_id: int, rng: np.random.Generator,
                noise: float = 0.02) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, y = view_grid(spec.canvas, size, scale_id)
    masks = class_masks(spec, x, y)
    return render(spec, x, y, masks, rng, noise), masks


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset generation

def assign_splits(n_scenes: int, seed: int) -> list[str]:
    n_train = round(n_scenes * SPLIT_RATIO[0] / sum(SPLIT_RATIO))
    n_val = round(n_scenes * SPLIT_RATIO[1] / sum(SPLIT_RATIO))
    order = np.random.default_rng([seed, 1]).permutation(n_scenes)
    splits = [""] * n_scenes
    for rank, s in enumerate(order):
        splits[s] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return splits


def _scene_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def _generate_scene(args) -> list[tuple[str, np.ndarray]]:
    scene, seedseq, cfg, classes, wanted, split = args
    rng = np.random.default_rng(seedseq)
    spec = sample_scene(cfg.canvas, rng)
    files = []
    views = {}
    for cls in classes:
        if cls.name not in wanted:
            continue
        k = cls.scale_id
        if k not in views:
            views[k] = render_view(spec, cfg.size, k, np.random.default_rng([seedseq.entropy, scene, k]), cfg.noise)
        img, masks = views[k]
        stem = f"{scene:04d}_{cls.name}_{cls.scale}.png"
        files.append(("images/" + stem, to_uint8(img)))
        files.append(("masks/" + stem, masks[cls.name].astype(np.uint8) * 255))
    gx, gy = np.meshgrid(np.arange(cfg.canvas) + 0.5, np.arange(cfg.canvas) + 0.5, indexing="xy")
    full = class_masks(spec, gx, gy)
    for cls in classes:
        files.append((f"gt/{scene:04d}/{cls.name}.png", full[cls.name].astype(np.uint8) * 255))
    return files


def generate_dataset(out_dir: str | Path, config: GeneratorConfig = GeneratorConfig(),
                     counts: dict[str, int] | None = None, taxonomy: TaxonomyGraph | None = None,
                     workers: int = 1) -> list[SampleRecord]:
    """Render scenes, write PNGs and ``manifest.jsonl``; return the records.

    ``counts`` maps class name to the number of labeled records; scenes are
    shared, so ``max(counts)`` scenes are rendered and class c is labeled in
    the first ``counts[c]`` of them.
    """
    taxonomy = taxonomy or load_taxonomy()
    if config.canvas < 64 or config.size < 16:
        raise ValueError("canvas must be >= 64 and size >= 16")
    counts = counts or {c.name: config.scenes for c in taxonomy.classes}
    for name, k in counts.items():
        if name not in taxonomy.names:
            raise ValueError(f"unknown class {name!r} in counts")
        if int(k) <= 0:
            raise ValueError(f"count for {name!r} must be positive")
    n_scenes = max(counts.values())
    splits = assign_splits(n_scenes, config.seed)
    out = Path(out_dir)
    for sub in ("images", "masks", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    jobs = []
    for scene, ss in enumerate(_scene_seeds(config.seed, n_scenes)):
        wanted = {name for name, k in counts.items() if scene < k}
        jobs.append((scene, ss, config, taxonomy.classes, wanted, splits[scene]))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_generate_scene, jobs))
    else:
        results = [_generate_scene(j) for j in jobs]
    for files in results:
        for rel, arr in files:
            path = out / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr).save(path, format="PNG")

    records = []
    for scene in range(n_scenes):
        for cls in taxonomy.classes:
            if scene < counts.get(cls.name, 0):
                stem = f"{scene:04d}_{cls.name}_{cls.scale}.png"
                records.append(SampleRecord("images/" + stem, "masks/" + stem, cls.id, cls.scale_id,
                                            splits[scene], scene))
    write_manifest(out / "manifest.jsonl", records)
    return records


def write_manifest(path: str | Path, records: Iterable[SampleRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def load_manifest(path: str | Path) -> list[SampleRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(SampleRecord(**json.loads(line)))
    return out


def read_image(path: str | Path) -> np.ndarray:
    """PNG -> float32 (3, H, W) in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path: str | Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.float32)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255).save(path, format="PNG")


class SampleCache:
    """Loads record images and masks once per path."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._images: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}

    def image(self, rec: SampleRecord) -> np.ndarray:
        if rec.image not in self._images:
            self._images[rec.image] = read_image(self.root / rec.image)
        return self._images[rec.image]

    def mask(self, rec: SampleRecord) -> np.ndarray:
        if rec.mask not in self._masks:
            self._masks[rec.mask] = read_mask(self.root / rec.mask)
        return self._masks[rec.mask]


# ---------------------------------------------------------------------------
# augmentation

AUG_OPS = ("hflip", "vflip", "rot90", "brightness", "contrast", "noise", "dropout", "stain")

# colour-mixing matrices standing in for four stains (PAS is the rendered base)
STAINS = (
    np.eye(3),
    np.array([[0.95, 0.10, 0.05], [0.05, 0.80, 0.10], [0.00, 0.10, 0.95]]),   # H&E-like
    np.array([[0.70, 0.20, 0.10], [0.15, 0.70, 0.10], [0.10, 0.15, 0.60]]),   # silver-like, darker
    np.array([[0.75, 0.05, 0.20], [0.05, 0.85, 0.25], [0.10, 0.20, 0.90]]),   # trichrome-like, bluer
)


def augment(image: np.ndarray, mask: np.ndarray, p: float, seed, ops: Sequence[str] = AUG_OPS
            ) -> tuple[np.ndarray, np.ndarray]:
    """Apply each op in ``ops`` independently with probability ``p``.

    image: (3, H, W) float in [0, 1]; mask: (H, W) binary.  Geometric ops
    move the mask with the image, so the mask stays binary.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    img, msk = image, mask
    for op in ops:
        if op not in AUG_OPS:
            raise ValueError(f"unknown augmentation {op!r}")
        if rng.uniform() >= p:
            continue
        if op == "hflip":
            img, msk = img[:, :, ::-1], msk[:, ::-1]
        elif op == "vflip":
            img, msk = img[:, ::-1, :], msk[::-1, :]
        elif op == "rot90":
            img, msk = np.rot90(img, 1, axes=(1, 2)), np.rot90(msk, 1)
        elif op == "brightness":
            img = img * rng.uniform(0.8, 1.2)
        elif op == "contrast":
            mean = img.mean()
            img = (img - mean) * rng.uniform(0.8, 1.2) + mean
        elif op == "noise":
            img = img + rng.normal(0.0, rng.uniform(0.0, 0.05), size=img.shape)
        elif op == "dropout":
            img = img.copy()
            h, w = img.shape[1:]
            for _ in range(int(rng.integers(1, 5))):
                s = int(rng.integers(2, 9))
                r0, c0 = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
                img[:, r0:r0 + s, c0:c0 + s] = 0.0
        elif op == "stain":
            mix = STAINS[int(rng.integers(0, len(STAINS)))]
            img = np.einsum("ij,jhw->ihw", mix, img)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


# ---------------------------------------------------------------------------
# image pools

class ImagePool:
    """Per-class FIFO buffer that releases single-class batches."""

    def __init__(self, class_id: int, capacity: int = 8, batch_size: int = 4):
        if batch_size > capacity:
            raise ValueError("batch size cannot exceed capacity")
        self.class_id = class_id
        self.capacity = capacity
        self.batch_size = batch_size
        self.buffer: deque = deque()

    def __len__(self):
        return len(self.buffer)

    def _take(self, k: int) -> list:
        return [self.buffer.popleft() for _ in range(k)]

    def push(self, record) -> list | None:
        if record.class_id != self.class_id:
            raise ValueError(f"record of class {record.class_id} pushed into pool {self.class_id}")
        forced = None
        if len(self.buffer) >= self.capacity:
            forced = self._take(self.batch_size)
        self.buffer.append(record)
        if forced is not None:
            return forced
        if len(self.buffer) >= self.batch_size:
            return self._take(self.batch_size)
        return None

    def flush(self) -> list | None:
        if not self.buffer:
            return None
        return self._take(len(self.buffer))


def pool_push(pool: ImagePool, record) -> list | None:
    return pool.push(record)


def epoch_batches(records: Sequence[SampleRecord], n_classes: int, seed: int, epoch: int,
                  capacity: int = 8, batch_size: int = 4) -> list[list[SampleRecord]]:
    """Shuffle records, route them through per-class pools, then flush leftovers as short batches."""
    order = np.random.default_rng([seed, epoch, 7]).permutation(len(records))
    pools = [ImagePool(c, capacity, batch_size) for c in range(n_classes)]
    batches = []
    for k in order:
        rec = records[k]
        out = pools[rec.class_id].push(rec)
        if out:
            batches.append(out)
    for pool in pools:
        rest = pool.flush()
        if rest:
            batches.append(rest)
    return batches
