"""Exhaustive-and-singular augmentation: 14 intra-image ops plus Fourier and style mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import dft2, idft2

MAX_STRENGTH = 30
FILL = 0.5

INTRA = "intra-image"
CROSS = "cross-image"

STANDARD_OP_NAMES = (
    "Identity", "AutoContrast", "Equalize", "Rotate", "Solarize", "Color", "Posterize",
    "Contrast", "Brightness", "Sharpness", "ShearX", "ShearY", "TranslateX", "TranslateY",
)
CROSS_OP_NAMES = ("FourierMix", "StyleMix")
CROSS_MODES = ("fourier", "style", "both", "none")
STYLE_EPS = 1e-5


@dataclass(frozen=True)
class AugOp:
    name: str
    kind: str

    @property
    def is_cross(self) -> bool:
        return self.kind == CROSS


STANDARD_OPS = tuple(AugOp(n, INTRA) for n in STANDARD_OP_NAMES)
FOURIER_MIX = AugOp("FourierMix", CROSS)
STYLE_MIX = AugOp("StyleMix", CROSS)
OPS_BY_NAME = {op.name: op for op in STANDARD_OPS + (FOURIER_MIX, STYLE_MIX)}


@dataclass(frozen=True)
class MixParams:
    """Cross-image parameters; ``partner_id`` is filled in by the caller."""

    lam: float
    xi: float
    partner_id: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= self.xi <= 1.0:
            raise ValueError(f"need 0 <= lam <= xi <= 1, got lam={self.lam}, xi={self.xi}")


@dataclass(frozen=True)
class AugPolicy:
    """The active op list and how one op is picked from it.

    ``cross_prob=None`` draws uniformly over the whole list. A float sends
    that much probability mass to the cross-image ops and the rest uniformly
    to the 14 standard ops. ``cascade > 1`` applies that many ops in sequence
    (the non-singular comparison setting).
    """

    cross_mode: str = "fourier"
    cross_prob: float | None = None
    cascade: int = 1
    phase_source: str = "anchor"
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        if self.cross_mode not in CROSS_MODES:
            raise ValueError(f"cross_mode must be one of {CROSS_MODES}")
        if self.cross_prob is not None and not 0.0 <= self.cross_prob <= 1.0:
            raise ValueError("cross_prob must lie in [0, 1]")
        if self.cascade < 1:
            raise ValueError("cascade must be >= 1")
        if self.phase_source not in ("anchor", "partner"):
            raise ValueError("phase_source must be 'anchor' or 'partner'")

    @property
    def cross_ops(self) -> tuple[AugOp, ...]:
        return {
            "fourier": (FOURIER_MIX,), "style": (STYLE_MIX,),
            "both": (FOURIER_MIX, STYLE_MIX), "none": (),
        }[self.cross_mode]

    @property
    def standard_ops(self) -> tuple[AugOp, ...]:
        return tuple(op for op in STANDARD_OPS if op.name not in self.exclude)

    @property
    def ops(self) -> tuple[AugOp, ...]:
        return self.standard_ops + self.cross_ops


@dataclass(frozen=True)
class AugDraw:
    op: AugOp
    strength: int
    mix: MixParams | None = None


def sample_singular(policy: AugPolicy, rng: np.random.Generator) -> AugDraw:
    """Pick one op, an integer strength in [0, 30] and, for cross ops, mixing weights."""
    cross = policy.cross_ops
    if policy.cross_prob is None or not cross:
        ops = policy.ops
        op = ops[int(rng.integers(len(ops)))]
    elif rng.random() < policy.cross_prob:
        op = cross[int(rng.integers(len(cross)))]
    else:
        standard = policy.standard_ops
        op = standard[int(rng.integers(len(standard)))]
    strength = int(rng.integers(0, MAX_STRENGTH + 1))
    mix = None
    if op is FOURIER_MIX:
        xi = 1.0 - rng.random()  # (0, 1]
        mix = MixParams(lam=float(rng.uniform(0.0, xi)), xi=float(xi))
    elif op is STYLE_MIX:
        mix = MixParams(lam=1.0, xi=1.0)
    return AugDraw(op, strength, mix)


# ---------------------------------------------------------------------------
# intra-image ops, images are (C, H, W) float arrays in [0, 1]

def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def _blend(base: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    return base + factor * (img - base)


def _warp(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample with an output->input affine map about the image center."""
    h, w = img.shape[1:]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=FILL)
        for ch in img
    ])


def _shift(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    return np.stack([ndimage.shift(ch, (dy, dx), order=1, mode="constant", cval=FILL) for ch in img])


def _equalize(img: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c, ch in enumerate(img):
        q = np.clip(np.round(ch * 255.0), 0, 255).astype(np.int64)
        hist = np.bincount(q.ravel(), minlength=256)
        nonzero = hist[hist > 0]
        if len(nonzero) <= 1:
            out[c] = ch
            continue
        cdf = np.cumsum(hist)
        lo = cdf[q.min()]
        lut = (cdf - lo) / max(q.size - lo, 1)
        out[c] = np.clip(lut[q], 0.0, 1.0)
    return out


def _sharpen_base(img: np.ndarray) -> np.ndarray:
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = img.copy()
    for c, ch in enumerate(img):
        smooth[c, 1:-1, 1:-1] = ndimage.correlate(ch, kernel, mode="nearest")[1:-1, 1:-1]
    return smooth


def apply_intra(op: AugOp | str, image: np.ndarray, strength: int, rng: np.random.Generator | None = None,
                sign: int | None = None) -> np.ndarray:
    """Apply one intra-image op at integer strength; output is clamped to [0, 1].

    ``t = strength / 30``. Signed ops draw their sign from ``rng`` unless
    ``sign`` is given.
    """
    if isinstance(op, str):
        op = OPS_BY_NAME[op]
    if op.kind != INTRA:
        raise ValueError(f"{op.name} is not an intra-image op")
    if not 0 <= strength <= MAX_STRENGTH or int(strength) != strength:
        raise ValueError(f"strength must be an integer in [0, {MAX_STRENGTH}], got {strength}")
    img = np.asarray(image, dtype=np.float64)
    t = strength / MAX_STRENGTH
    name = op.name
    if sign is None and name in _SIGNED:
        sign = 1 if (rng if rng is not None else np.random.default_rng()).random() < 0.5 else -1
    h, w = img.shape[1:]

    if name == "Identity":
        out = img.copy()
    elif name == "AutoContrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        out = np.where(span > 0, (img - lo) / np.where(span > 0, span, 1.0), img)
    elif name == "Equalize":
        out = _equalize(img)
    elif name == "Solarize":
        threshold = 1.0 - t
        out = np.where(img > threshold, 1.0 - img, img)
    elif name == "Posterize":
        bits = max(2, 8 - int(np.floor(6 * t)))
        if bits >= 8:
            out = img.copy()
        else:
            levels = 2 ** bits
            q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 1e-9).astype(np.int64) >> (8 - bits)
            out = q * (256 // levels) / 255.0
    elif name in ("Color", "Contrast", "Brightness", "Sharpness"):
        factor = 1.0 + sign * 0.9 * t
        if name == "Color":
            out = _blend(np.broadcast_to(_gray(img), img.shape), img, factor)
        elif name == "Contrast":
            out = _blend(np.full_like(img, _gray(img).mean()), img, factor)
        elif name == "Brightness":
            out = factor * img
        else:
            out = _blend(_sharpen_base(img), img, factor)
    elif t == 0:
        out = img.copy()
    elif name == "Rotate":
        angle = np.deg2rad(sign * 30.0 * t)
        c, s = np.cos(angle), np.sin(angle)
        out = _warp(img, np.array([[c, -s], [s, c]]))
    elif name == "ShearX":
        out = _warp(img, np.array([[1.0, 0.0], [sign * 0.3 * t, 1.0]]))
    elif name == "ShearY":
        out = _warp(img, np.array([[1.0, sign * 0.3 * t], [0.0, 1.0]]))
    elif name == "TranslateX":
        out = _shift(img, 0.0, sign * 0.3 * w * t)
    elif name == "TranslateY":
        out = _shift(img, sign * 0.3 * h * t, 0.0)
    else:  # pragma: no cover - registry and dispatch kept in sync
        raise ValueError(f"unknown op {name}")
    return np.clip(out, 0.0, 1.0)


_SIGNED = frozenset({"Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY",
                     "Color", "Contrast", "Brightness", "Sharpness"})


# ---------------------------------------------------------------------------
# cross-image ops

def _check_pair(x_i: np.ndarray, x_j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x_i, dtype=np.float64)
    b = np.asarray(x_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def fourier_mix(x_i: np.ndarray, x_j: np.ndarray, lam: float, phase_source: str = "anchor",
                clamp: bool = True) -> np.ndarray:
    """Interpolate amplitude spectra channel by channel, keep one image's phase, invert.

    The amplitude of the result is ``(1 - lam) * |F x_i| + lam * |F x_j|``.
    ``phase_source="partner"`` takes the phase from ``x_j`` instead.
    """
    a, b = _check_pair(x_i, x_j)
    out = np.empty_like(a)
    for c in range(a.shape[0]):
        spec_i, spec_j = dft2(a[c]), dft2(b[c])
        amp = (1.0 - lam) * spec_i.amplitude + lam * spec_j.amplitude
        phase = spec_i.phase if phase_source == "anchor" else spec_j.phase
        out[c] = idft2(type(spec_i)(amp, phase))
    return np.clip(out, 0.0, 1.0) if clamp else out


def style_mix(x_i: np.ndarray, x_j: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Give ``x_i`` the per-channel mean and standard deviation of ``x_j``."""
    a, b = _check_pair(x_i, x_j)
    mu_i = a.mean(axis=(1, 2), keepdims=True)
    sd_i = a.std(axis=(1, 2), keepdims=True)
    mu_j = b.mean(axis=(1, 2), keepdims=True)
    sd_j = b.std(axis=(1, 2), keepdims=True)
    out = sd_j * (a - mu_i) / np.maximum(sd_i, STYLE_EPS) + mu_j
    return np.clip(out, 0.0, 1.0) if clamp else out


def apply_draw(draw: AugDraw, image: np.ndarray, rng: np.random.Generator, partner: np.ndarray | None = None,
               phase_source: str = "anchor") -> np.ndarray:
    if draw.op is FOURIER_MIX:
        return fourier_mix(image, partner, draw.mix.lam, phase_source=phase_source)
    if draw.op is STYLE_MIX:
        return style_mix(image, partner)
    return apply_intra(draw.op, image, draw.strength, rng)


# ---------------------------------------------------------------------------
# baseline augmentation: random crop, horizontal flip, colour jitter

def baseline_augment(image: np.ndarray, rng: np.random.Generator, crop_range=(0.8, 1.0),
                     jitter: float = 0.4) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    frac = rng.uniform(*crop_range)
    ch, cw = max(1, int(round(frac * h))), max(1, int(round(frac * w)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = img[:, y0:y0 + ch, x0:x0 + cw]
    if (ch, cw) != (h, w):
        zoom = (h / ch, w / cw)
        crop = np.stack([ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) for c in crop])
    out = crop[:, :, ::-1] if rng.random() < 0.5 else crop
    brightness, contrast, saturation = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
    out = brightness * out
    out = _blend(np.full_like(out, _gray(out).mean()), out, contrast)
    out = _blend(np.broadcast_to(_gray(out), out.shape), out, saturation)
    return np.clip(out, 0.0, 1.0)
