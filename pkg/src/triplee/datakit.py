"""Multi-domain datasets: a synthetic glyph benchmark, PNG directory I/O, and splits."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import RngStream

GENERATOR_VERSION = 3

DOMAIN_NAMES = ("d0_clean", "d1_inverted", "d2_texture", "d3_dilated")


class ConfigError(ValueError):
    """Invalid parameters for dataset construction or training."""


class DatasetError(ValueError):
    """Structural problem with an on-disk dataset."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    label: int
    domain: int
    sample_id: int


@dataclass
class MultiDomainDataset:
    """Samples stored as stacked arrays; ``sample_id`` is the row index."""

    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    domains: np.ndarray  # (N,) int64
    class_count: int
    domain_names: tuple[str, ...]
    class_names: tuple[str, ...]
    source_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.labels) == len(self.domains) == n):
            raise DatasetError("images, labels and domains must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError("label out of range")
        if n and (self.domains.min() < 0 or self.domains.max() >= self.domain_count):
            raise DatasetError("domain tag out of range")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, sample_id: int) -> LabeledSample:
        return LabeledSample(
            self.images[sample_id], int(self.labels[sample_id]), int(self.domains[sample_id]), int(sample_id)
        )

    @property
    def domain_count(self) -> int:
        return len(self.domain_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def domain_indices(self, domain: int) -> np.ndarray:
        return np.flatnonzero(self.domains == domain)

    def per_domain_indices(self) -> list[np.ndarray]:
        return [self.domain_indices(d) for d in range(self.domain_count)]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.labels, self.domains):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic glyphs

# Strokes in normalized coordinates [-1, 1]^2 (x right, y down). Every glyph is
# mirror-symmetric about the vertical axis so horizontal flips keep the class.
_GLYPHS: tuple[tuple[str, tuple], ...] = (
    ("ring", ("circle", 0.0, 0.0, 0.6)),
    ("square", ((-0.55, -0.55), (0.55, -0.55), (0.55, 0.55), (-0.55, 0.55), (-0.55, -0.55))),
    ("triangle", ((0.0, -0.65), (0.62, 0.5), (-0.62, 0.5), (0.0, -0.65))),
    ("plus", ((0.0, -0.65), (0.0, 0.65)), ((-0.65, 0.0), (0.65, 0.0))),
    ("cross", ((-0.55, -0.55), (0.55, 0.55)), ((0.55, -0.55), (-0.55, 0.55))),
    ("bars_h", ((-0.6, -0.3), (0.6, -0.3)), ((-0.6, 0.3), (0.6, 0.3))),
    ("bars_v", ((-0.3, -0.6), (-0.3, 0.6)), ((0.3, -0.6), (0.3, 0.6))),
    ("diamond", ((0.0, -0.65), (0.6, 0.0), (0.0, 0.65), (-0.6, 0.0), (0.0, -0.65))),
    ("tee", ((-0.6, -0.55), (0.6, -0.55)), ((0.0, -0.55), (0.0, 0.65))),
    ("aitch", ((-0.5, -0.6), (-0.5, 0.6)), ((0.5, -0.6), (0.5, 0.6)), ((-0.5, 0.0), (0.5, 0.0))),
)

MAX_CLASSES = len(_GLYPHS)


def _glyph_distance(glyph: tuple, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Distance from each point to the glyph's strokes."""
    parts = glyph[1:]
    if parts[0][0] == "circle":
        _, cx, cy, rad = parts[0]
        return np.abs(np.hypot(px - cx, py - cy) - rad)
    best = np.full(px.shape, np.inf)
    for poly in parts:
        for (ax, ay), (bx, by) in zip(poly[:-1], poly[1:]):
            dx, dy = bx - ax, by - ay
            t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
            t = np.clip(t, 0.0, 1.0)
            best = np.minimum(best, np.hypot(px - ax - t * dx, py - ay - t * dy))
    return best


def render_glyph(label: int, size: int, rng: np.random.Generator, width_scale: float = 1.0) -> np.ndarray:
    """Anti-aliased stroke coverage in [0, 1] with random pose and stroke width."""
    angle = np.deg2rad(rng.uniform(-12.0, 12.0))
    scale = rng.uniform(0.85, 1.1)
    tx, ty = rng.uniform(-0.12, 0.12, size=2)
    half_width_px = rng.uniform(1.0, 1.6) * width_scale
    pixel = 2.0 / size

    coords = (np.arange(size) + 0.5) * pixel - 1.0
    gx, gy = np.meshgrid(coords, coords)
    # inverse pose: glyph frame = R^-1 (p - t) / scale
    c, s = math.cos(angle), math.sin(angle)
    ux, uy = gx - tx, gy - ty
    px = (c * ux + s * uy) / scale
    py = (-s * ux + c * uy) / scale
    dist_px = _glyph_distance(_GLYPHS[label], px, py) * scale / pixel
    return np.clip(half_width_px - dist_px + 0.5, 0.0, 1.0)


def _tint(rng: np.random.Generator) -> np.ndarray:
    """Random RGB colour with its brightest channel at 1, shaped for broadcasting."""
    c = rng.uniform(0.25, 1.0, size=3)
    return (c / c.max())[:, None, None]


def _render_domain(domain: int, label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One RGB sample ``(3, size, size)`` of ``label`` in the style of ``domain``."""
    if domain == 0:
        gray = render_glyph(label, size, rng) * rng.uniform(0.85, 1.0)
        return np.repeat(gray[None], 3, axis=0)
    if domain == 1:
        stroke = render_glyph(label, size, rng)
        theta = rng.uniform(0.0, 2 * np.pi)
        coords = np.linspace(-1.0, 1.0, size)
        gx, gy = np.meshgrid(coords, coords)
        ramp = (math.cos(theta) * gx + math.sin(theta) * gy) / (2 * math.sqrt(2)) + 0.5
        lo, hi = rng.uniform(0.45, 0.7), rng.uniform(0.85, 1.0)
        background = (lo + (hi - lo) * ramp)[None] * _tint(rng)
        ink = rng.uniform(0.0, 0.2, size=3)[:, None, None]
        return background * (1.0 - stroke) + ink * stroke
    if domain == 2:
        stroke = render_glyph(label, size, rng)
        freq = rng.uniform(3.0, 6.0)
        theta = rng.uniform(0.0, 2 * np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.5, 0.8)
        yy, xx = np.mgrid[0:size, 0:size] / size
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (math.cos(theta) * xx + math.sin(theta) * yy) + phase)
        return np.clip(0.85 * stroke[None] * _tint(rng) + amp * wave[None] * _tint(rng), 0.0, 1.0)
    if domain == 3:
        img = render_glyph(label, size, rng, width_scale=2.0)[None] * 0.9 * _tint(rng)
        rate = rng.uniform(0.04, 0.08)
        hits = rng.random((size, size)) < rate
        salt = rng.random((3, size, size)) < 0.5
        return np.where(hits[None], salt.astype(np.float64), img)
    raise ValueError(f"unknown synthetic domain {domain}")


def generate_synthetic(classes: int = 5, per_domain_count: int = 600, image_size: int = 32, seed: int = 0,
                       channels: int = 3) -> MultiDomainDataset:
    """Four domains rendering the same glyph classes with different low-level statistics.

    d0: gray strokes on black. d1: dark strokes on a tinted gradient. d2:
    tinted strokes under a strong coloured sinusoidal texture. d3: thick
    tinted strokes with per-channel impulse noise.

    Sample ids run domain-major; within a domain the label cycles through the
    classes so every (domain, class) cell has ``per_domain_count // classes``
    or one more samples.
    """
    if not 2 <= classes <= MAX_CLASSES:
        raise ConfigError(f"classes must be in [2, {MAX_CLASSES}], got {classes}")
    if per_domain_count < 20 * classes:
        raise ConfigError(f"per_domain_count must be >= 20*classes = {20 * classes}")
    if image_size < 16:
        raise ConfigError("image_size must be >= 16")
    if channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3")

    root = RngStream(seed, ("synthetic", GENERATOR_VERSION))
    n_total = 4 * per_domain_count
    images = np.empty((n_total, channels, image_size, image_size))
    labels = np.empty(n_total, dtype=np.int64)
    domains = np.empty(n_total, dtype=np.int64)
    for d in range(4):
        rng = root.fork(d).generator()
        for k in range(per_domain_count):
            idx = d * per_domain_count + k
            label = k % classes
            rgb = _render_domain(d, label, image_size, rng)
            images[idx] = rgb if channels == 3 else rgb.mean(axis=0, keepdims=True)
            labels[idx] = label
            domains[idx] = d
    class_names = tuple(f"c{i}_{_GLYPHS[i][0]}" for i in range(classes))
    return MultiDomainDataset(images, labels, domains, classes, DOMAIN_NAMES, class_names)


# ---------------------------------------------------------------------------
# directory I/O

def export_directory(dataset: MultiDomainDataset, root: str | Path, manifest: dict | None = None) -> Path:
    """Write ``root/<domain>/<class>/<id>.png`` (8-bit) plus ``manifest.txt``."""
    root = Path(root)
    for i in range(len(dataset)):
        folder = root / dataset.domain_names[dataset.domains[i]] / dataset.class_names[dataset.labels[i]]
        folder.mkdir(parents=True, exist_ok=True)
        pixels = np.round(np.clip(dataset.images[i], 0.0, 1.0) * 255.0).astype(np.uint8)
        if pixels.shape[0] == 1:
            img = Image.fromarray(pixels[0], mode="L")
        else:
            img = Image.fromarray(np.transpose(pixels, (1, 2, 0)), mode="RGB")
        img.save(folder / f"{i:06d}.png")
    info = {
        "classes": dataset.class_count,
        "domains": dataset.domain_count,
        "samples": len(dataset),
        "counts": ",".join(str(int((dataset.domains == d).sum())) for d in range(dataset.domain_count)),
        "generator_version": GENERATOR_VERSION,
    }
    info.update(manifest or {})
    with open(root / "manifest.txt", "w") as fh:
        for key, value in info.items():
            fh.write(f"{key}={value}\n")
    return root


def _read_png(path: Path, size: int | None, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr[None] if channels == 1 else np.transpose(arr, (2, 0, 1))


def load_directory(root: str | Path, image_size: int | None = 32, channels: int = 3) -> MultiDomainDataset:
    """Load ``root/<domain>/<class>/<file>.png``.

    Domain and class indices follow sorted folder names; sample ids follow the
    lexicographic order of relative paths.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DatasetError(f"no domain folders under {root}")
    class_names = sorted({c.name for d in domain_dirs for c in d.iterdir() if c.is_dir()})
    if not class_names:
        raise DatasetError(f"no class folders under {root}")

    entries: list[tuple[str, int, int]] = []
    for d_idx, ddir in enumerate(domain_dirs):
        for c_idx, cname in enumerate(class_names):
            cdir = ddir / cname
            files = sorted(cdir.glob("*.png")) if cdir.is_dir() else []
            if not files:
                raise DatasetError(f"empty (domain, class) cell: {ddir.name}/{cname}")
            entries.extend((f.relative_to(root).as_posix(), d_idx, c_idx) for f in files)
    entries.sort(key=lambda e: e[0])

    images = np.stack([_read_png(root / rel, image_size, channels) for rel, _, _ in entries])
    labels = np.array([e[2] for e in entries], dtype=np.int64)
    domains = np.array([e[1] for e in entries], dtype=np.int64)
    return MultiDomainDataset(
        images, labels, domains, len(class_names),
        tuple(d.name for d in domain_dirs), tuple(class_names), tuple(e[0] for e in entries),
    )


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#") and "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitSpec:
    train: dict[int, np.ndarray]
    val: dict[int, np.ndarray]
    target_domain: int

    @property
    def source_domains(self) -> list[int]:
        return sorted(self.train)

    @property
    def train_ids(self) -> np.ndarray:
        return np.sort(np.concatenate([self.train[d] for d in self.source_domains]))

    @property
    def val_ids(self) -> np.ndarray:
        return np.sort(np.concatenate([self.val[d] for d in self.source_domains]))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(dataset: MultiDomainDataset, target_domain: int, val_fraction: float = 0.1,
               seed: int = 0) -> SplitSpec:
    """Class-stratified train/validation split of every non-target domain."""
    if not 0 < val_fraction < 0.5:
        raise SplitError("val_fraction must lie in (0, 0.5)")
    if not 0 <= target_domain < dataset.domain_count:
        raise SplitError(f"target_domain {target_domain} out of range")
    root = RngStream(seed, ("split",))
    train, val = {}, {}
    for d in range(dataset.domain_count):
        if d == target_domain:
            continue
        tr_parts, va_parts = [], []
        for c in range(dataset.class_count):
            cell = np.flatnonzero((dataset.domains == d) & (dataset.labels == c))
            if len(cell) < 2:
                raise SplitError(f"class {c} has {len(cell)} samples in domain {d}; need >= 2")
            perm = root.fork(d, c).generator().permutation(cell)
            n_val = _round_half_up(val_fraction * len(cell))
            va_parts.append(perm[:n_val])
            tr_parts.append(perm[n_val:])
        train[d] = np.sort(np.concatenate(tr_parts))
        val[d] = np.sort(np.concatenate(va_parts))
    return SplitSpec(train, val, target_domain)
