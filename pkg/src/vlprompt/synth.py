"""Procedural shape/colour images, distribution shifts and class splits."""
import json
import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import InputError, OODPurityError, ProtocolError, ScaleError, SplitError
from .rng import Xoshiro256, derive_seed

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.12, 0.78, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "magenta": (0.88, 0.15, 0.85),
    "cyan": (0.10, 0.85, 0.90),
    "orange": (1.00, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
}
SCALES = (16, 24, 32)
PRETRAIN_SCALE = 32
N_CLASSES = len(SHAPES) * len(COLORS)
MAX_BASE = 32

# seed-stream ids; each purpose draws from a disjoint stream
STREAM_PRETRAIN = 1
STREAM_SUPPORT = 2
STREAM_TEST = 3
STREAM_V2 = 4
STREAM_ADV_POOL = 5
STREAM_SHIFT = 6
STREAM_PROBE = 7
STREAM_HELDOUT = 8

# corruption severities 1..5; version bumps whenever a constant changes
CORRUPTION_TABLE = {
    "version": 1,
    "gauss_noise": (0.04, 0.08, 0.12, 0.18, 0.26),      # pixel sigma
    "blur": (0.5, 0.8, 1.2, 1.7, 2.4),                  # gaussian sigma in px at side 32
    "pixelate": (1.5, 2.0, 3.0, 4.0, 6.0),              # downsampling factor
}
CORRUPTION_KINDS = ("gauss_noise", "blur", "pixelate")


@dataclass(frozen=True)
class ClassSpec:
    id: int
    shape: str
    color: str

    @property
    def name(self):
        return f"{self.color}_{self.shape}"

    @property
    def rgb(self):
        return COLORS[self.color]


CLASSES = tuple(
    ClassSpec(i * len(COLORS) + j, shape, color)
    for i, shape in enumerate(SHAPES)
    for j, color in enumerate(COLORS)
)
CLASS_NAMES = tuple(c.name for c in CLASSES)


@dataclass(frozen=True)
class Shift:
    """A distribution-shift kind; ``corruption``/``severity`` only for corruptions."""

    kind: str = "in_dist"
    corruption: str = None
    severity: int = None

    KINDS = ("in_dist", "v2_resample", "rendition", "corruption", "sketch", "adv_filtered")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.kind == "corruption":
            if self.corruption not in CORRUPTION_KINDS:
                raise ValueError(f"unknown corruption {self.corruption!r}")
            if self.severity not in (1, 2, 3, 4, 5):
                raise ValueError(f"corruption severity must be in 1..5, got {self.severity!r}")
        elif self.corruption is not None or self.severity is not None:
            raise ValueError("corruption/severity only apply to kind='corruption'")

    @classmethod
    def corrupt(cls, corruption, severity):
        return cls("corruption", corruption, severity)

    @property
    def tag(self):
        if self.kind == "corruption":
            return f"corruption:{self.corruption}:{self.severity}"
        return self.kind

    @classmethod
    def from_tag(cls, tag):
        if tag.startswith("corruption:"):
            _, name, sev = tag.split(":")
            return cls.corrupt(name, int(sev))
        return cls(tag)


IN_DIST = Shift()


@dataclass(frozen=True)
class JitterProfile:
    position: float = 0.30
    size: tuple = (0.50, 0.75)
    background: tuple = (0.04, 0.30)
    tint: float = 0.12
    color_jitter: float = 0.05
    pixel_noise: float = 0.01


DEFAULT_PROFILE = JitterProfile()
V2_PROFILE = JitterProfile(position=0.36, size=(0.45, 0.80), background=(0.04, 0.36),
                           tint=0.18, color_jitter=0.08, pixel_noise=0.015)


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int
    scale: int
    shift: Shift = IN_DIST
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def class_spec(self):
        return CLASSES[self.label]


def _rng(*parts):
    return np.random.default_rng(derive_seed(*parts))


def _shape_mask(shape, u, v, r):
    if shape == "circle":
        return u * u + v * v <= r * r
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    if shape == "triangle":
        inside = np.ones(u.shape, dtype=bool)
        for k in range(3):
            a = np.pi / 2 + 2 * np.pi * k / 3
            inside &= (u * np.cos(a) + v * np.sin(a)) >= -0.5 * r
        return inside
    if shape == "cross":
        au, av = np.abs(u), np.abs(v)
        return ((au <= 0.3 * r) & (av <= r)) | ((av <= 0.3 * r) & (au <= r))
    if shape == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.28 * r)
    raise ValueError(shape)


def _geometry(rng, profile):
    cx, cy = rng.uniform(-profile.position, profile.position, size=2)
    r = rng.uniform(*profile.size)
    theta = rng.uniform(0.0, 2 * np.pi)
    return cx, cy, r, theta


def _coords(side, cx, cy, theta, supersample=3):
    n = side * supersample
    g = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(g, g, indexing="ij")
    x, y = x - cx, y - cy
    c, s = np.cos(theta), np.sin(theta)
    return c * x + s * y, -s * x + c * y


def _downsample(img, factor):
    n = img.shape[0] // factor
    return img.reshape(n, factor, n, factor, -1).mean(axis=(1, 3))


def render(spec, scale, seed, profile=DEFAULT_PROFILE):
    """Draw one image of ``spec`` at side ``scale``; pure function of its arguments."""
    if not isinstance(spec, ClassSpec):
        spec = CLASSES[int(spec)]
    if scale not in SCALES:
        raise ScaleError(f"scale must be one of {SCALES}, got {scale}")
    rng = _rng(spec.id, seed, hash_profile(profile))
    cx, cy, r, theta = _geometry(rng, profile)
    u, v = _coords(scale, cx, cy, theta)
    mask = _shape_mask(spec.shape, u, v, r).astype(np.float64)[..., None]
    bg_level = rng.uniform(*profile.background)
    tint = rng.uniform(0.0, 1.0, size=3) * profile.tint
    background = np.clip(bg_level + tint, 0.0, 1.0)
    color = np.clip(np.array(spec.rgb) + rng.uniform(-1, 1, size=3) * profile.color_jitter, 0, 1)
    img = mask * color + (1.0 - mask) * background
    img = _downsample(img, 3)
    img = img + rng.normal(0.0, profile.pixel_noise, size=img.shape)
    return ImageSample(np.clip(img, 0.0, 1.0), spec.id, scale, IN_DIST, int(seed),
                       {"profile": profile})


def hash_profile(profile):
    vals = [profile.position, *profile.size, *profile.background, profile.tint,
            profile.color_jitter, profile.pixel_noise]
    return derive_seed(*[int(round(x * 1e6)) for x in vals])


# mid-gray backdrop: on white the frozen encoder is at chance, on dark a
# rendition is barely a shift
RENDITION_BACKGROUND = (0.35, 0.55)


def _render_rendition(spec, scale, seed, profile):
    rng = _rng(spec.id, seed, hash_profile(profile), STREAM_SHIFT)
    cx, cy, r, theta = _geometry(rng, profile)
    u, v = _coords(scale, cx, cy, theta)
    stroke = 0.16
    outer = _shape_mask(spec.shape, u, v, r)
    shrink = max(r - stroke, 0.05) / r
    inner = _shape_mask(spec.shape, u / shrink, v / shrink, r)
    backdrop = rng.uniform(*RENDITION_BACKGROUND)
    period = rng.uniform(0.18, 0.3)
    angle = rng.uniform(0, np.pi)
    stripes = (np.sin((u * np.cos(angle) + v * np.sin(angle)) * 2 * np.pi / period) > 0)
    color = np.array(spec.rgb)
    fill = np.where(stripes[..., None], 0.5 * color + 0.5 * backdrop, backdrop)
    img = np.full(u.shape + (3,), backdrop)
    img = np.where(inner[..., None], fill, img)
    img = np.where((outer & ~inner)[..., None], color * 0.85, img)
    return np.clip(_downsample(img, 3), 0.0, 1.0)


def resize(pixels, side):
    """Resample an ``H x W x 3`` image to ``side x side`` with a triangle filter.

    The filter support widens when shrinking so that downsampling averages
    instead of aliasing.
    """
    def weights(n_in, n_out):
        ratio = n_in / n_out
        support = max(ratio, 1.0)
        w = np.zeros((n_out, n_in))
        centers = (np.arange(n_out) + 0.5) * ratio - 0.5
        idx = np.arange(n_in)
        for i, c in enumerate(centers):
            k = np.maximum(0.0, 1.0 - np.abs(idx - c) / support)
            w[i] = k / k.sum()
        return w

    h, w_ = pixels.shape[:2]
    if h == side and w_ == side:
        return pixels.copy()
    wh, ww = weights(h, side), weights(w_, side)
    return np.clip(np.einsum("ih,hwc,jw->ijc", wh, pixels, ww), 0.0, 1.0)


def _gaussian_blur(img, sigma):
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    n = img.shape[0]
    tmp = sum(k[i] * pad[i:i + n, :, :] for i in range(len(k)))
    return sum(k[i] * tmp[:, i:i + n, :] for i in range(len(k)))


def _corrupt(pixels, corruption, severity, rng):
    level = CORRUPTION_TABLE[corruption][severity - 1]
    side = pixels.shape[0]
    if corruption == "gauss_noise":
        return pixels + rng.normal(0.0, level, size=pixels.shape)
    if corruption == "blur":
        return _gaussian_blur(pixels, level * side / 32.0)
    if corruption == "pixelate":
        small = max(2, int(round(side / level)))
        low = resize(pixels, small)
        idx = (np.arange(side) * small) // side
        return low[idx][:, idx]
    raise ValueError(corruption)


def _sketch(pixels):
    gray = pixels @ np.array([0.299, 0.587, 0.114])
    p = np.pad(gray, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    edge = np.clip(np.hypot(gx, gy) * 1.5, 0.0, 1.0)
    out = 1.0 - edge
    return np.repeat(out[..., None], 3, axis=2)


def apply_shift(sample, shift, seed):
    """Return a shifted copy of an in-distribution sample, clamped to [0, 1]."""
    if sample.shift.kind != "in_dist":
        raise ProtocolError(f"sample already carries shift {sample.shift.tag!r}")
    if shift.kind == "in_dist":
        return replace(sample, pixels=sample.pixels.copy())
    if shift.kind == "adv_filtered":
        raise ProtocolError("adversarially filtered sets come from build_adv_filtered, not a transform")
    spec = CLASSES[sample.label]
    if shift.kind == "v2_resample":
        fresh = render(spec, sample.scale, derive_seed(STREAM_V2, sample.seed, seed), V2_PROFILE)
        pixels = fresh.pixels
    elif shift.kind == "rendition":
        pixels = _render_rendition(spec, sample.scale, derive_seed(sample.seed, seed), DEFAULT_PROFILE)
    elif shift.kind == "sketch":
        pixels = _sketch(sample.pixels)
    else:
        rng = _rng(STREAM_SHIFT, sample.label, sample.seed, seed)
        pixels = _corrupt(sample.pixels, shift.corruption, shift.severity, rng)
    return ImageSample(np.clip(pixels, 0.0, 1.0), sample.label, sample.scale, shift, int(seed))


def make_splits(n_base, n_novel=8, seed=0):
    """Nested base prefixes of one seeded class order; novel ids follow the 32-class pool."""
    if n_base not in (8, 16, 24, 32):
        raise SplitError(f"n_base must be one of 8, 16, 24, 32; got {n_base}")
    if n_base + n_novel > N_CLASSES or MAX_BASE + n_novel > N_CLASSES:
        raise SplitError("not enough classes for the requested split")
    order = Xoshiro256(derive_seed(0x5B117, seed)).permutation(N_CLASSES)
    base = order[:n_base]
    novel = order[MAX_BASE:MAX_BASE + n_novel]
    if set(base) & set(novel):
        raise SplitError("base and novel classes overlap")
    return list(base), list(novel)


@dataclass
class SupportSet:
    samples: list
    base_ids: list

    def __post_init__(self):
        for s in self.samples:
            if s.shift.kind != "in_dist":
                raise OODPurityError(f"support sample carries shift {s.shift.tag!r}")
            if s.scale != PRETRAIN_SCALE:
                raise InputError(f"support samples must be at scale {PRETRAIN_SCALE}")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return [s.label for s in self.samples]

    @property
    def pixels(self):
        return np.stack([s.pixels for s in self.samples])


def build_support(base_ids, seed, per_class=5):
    samples = [
        render(c, PRETRAIN_SCALE, derive_seed(STREAM_SUPPORT, seed, c, i))
        for c in base_ids
        for i in range(per_class)
    ]
    return SupportSet(samples, list(base_ids))


def test_samples(class_ids, shift, seed, per_class=50):
    """Shifted test images; ids and seeds depend only on (class, index, seed), not the regime."""
    out = []
    for c in class_ids:
        for i in range(per_class):
            s = derive_seed(STREAM_TEST, seed, c, i)
            base = render(c, PRETRAIN_SCALE, s)
            out.append(apply_shift(base, shift, s))
    return out


def build_adv_filtered(pool, probe, requested=None):
    """Keep the pool samples ``probe`` gets wrong, tagged as adversarially filtered.

    ``probe`` is either a function of one image or a fitted estimator with a
    batched ``predict``.
    """
    if not pool:
        raise InputError("empty pool")
    for s in pool:
        if s.shift.kind != "in_dist":
            raise ProtocolError("adversarial filtering expects in-distribution samples")
    if hasattr(probe, "predict"):
        preds = probe.predict(np.stack([s.pixels for s in pool]))
    else:
        preds = [probe(s.pixels) for s in pool]
    kept = []
    for s, pred in zip(pool, preds):
        if pred != s.label:
            kept.append(ImageSample(s.pixels, s.label, s.scale, Shift("adv_filtered"), s.seed))
            if requested is not None and len(kept) >= requested:
                break
    if requested is not None and len(kept) < requested:
        warnings.warn(f"adversarial filter found {len(kept)} of {requested} requested samples",
                      stacklevel=2)
    return kept


def assert_in_dist(samples, where="corpus"):
    for s in samples:
        if s.shift.kind != "in_dist":
            raise OODPurityError(f"{where} contains a {s.shift.tag!r} sample (seed {s.seed})")


# ---------------------------------------------------------------- export

SYNI_MAGIC = b"SYNI"
SYNI_VERSION = 1


def write_image(path, pixels):
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(SYNI_MAGIC + struct.pack("<III", SYNI_VERSION, h, w))
        fh.write(np.ascontiguousarray(pixels, dtype="<f8").tobytes())


def read_image(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != SYNI_MAGIC:
            raise ValueError(f"{path}: not a SYNI image")
        version, h, w = struct.unpack("<III", head[4:])
        if version != SYNI_VERSION:
            raise ValueError(f"{path}: unsupported SYNI version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != h * w * 3:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(h, w, 3).astype(np.float64)


def export_dataset(groups, out_dir):
    """Write ``{(shift_tag, split): [ImageSample]}`` under ``out_dir`` plus ``manifest.json``."""
    entries = []
    for (shift_tag, split), samples in sorted(groups.items()):
        sub = f"{shift_tag.replace(':', '-')}__{split}"
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        for i, s in enumerate(samples):
            rel = f"{sub}/{i:05d}.syni"
            write_image(os.path.join(out_dir, rel), s.pixels)
            entries.append({"file": rel, "class_id": s.label, "class_name": CLASS_NAMES[s.label],
                            "shift": s.shift.tag, "split": split, "seed": s.seed})
    manifest = {"version": SYNI_VERSION, "corruption_table": CORRUPTION_TABLE, "files": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
