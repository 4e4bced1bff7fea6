"""Image I/O, preprocessing, augmentation and the synthetic texture dataset.

Raw images are ``H×W×3`` uint8 arrays; normalized images are float32 in
``[0, 1]``. The default preprocessing order is
normalize -> gamma -> resize, with augmentation applied to training images
only.
"""

from __future__ import annotations

import colorsys
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, ParseError

# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

_WS = b" \t\r\n\v\f"
_INT = re.compile(rb"\d+")


def _read_header(data: bytes, magic: bytes) -> tuple[list[int], int]:
    if data[:2] != magic:
        raise ParseError(f"bad magic {data[:2]!r}, expected {magic!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(data) and data[pos] in _WS:
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        m = _INT.match(data, pos)
        if m is None:
            raise ParseError("truncated or malformed header", pos)
        values.append(int(m.group()))
        pos = m.end()
    if pos >= len(data) or data[pos] not in _WS:
        raise ParseError("missing whitespace after header", pos)
    return values, pos + 1


def _parse_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    (width, height, maxval), start = _read_header(data, magic)
    if width < 1 or height < 1:
        raise ParseError(f"invalid dimensions {width}×{height}", 2)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}; only 255 is supported", start - 1)
    need = width * height * channels
    if len(data) - start < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(data) - start}", len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return pixels.reshape(shape).copy()


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 file with maxval 255 into an ``H×W×3`` uint8 array.

    Raises:
        ParseError: bad magic, unsupported maxval, or truncated data.
    """
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3)


def load_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"write_ppm needs H×W×3 uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ContractError(f"write_pgm needs H×W uint8, got {img.shape} {img.dtype}")
    h, w = img.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


# ---------------------------------------------------------------------------
# pointwise preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaParams:
    c: float = 1.0
    gamma: float = 1.1

    def __post_init__(self):
        if self.c <= 0 or self.gamma <= 0:
            raise ConfigurationError(f"gamma transform needs c > 0 and gamma > 0, got {self}")


def normalize(img: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in ``[0, 1]`` by dividing by 255."""
    if img.dtype != np.uint8:
        raise ContractError(f"normalize expects raw uint8 pixels, got {img.dtype} (already normalized?)")
    return img.astype(np.float32) / np.float32(255)


def gamma_transform(img: np.ndarray, params: GammaParams = GammaParams()) -> np.ndarray:
    """``clamp(c * r**gamma, 0, 1)`` on a normalized image."""
    if img.dtype == np.uint8 or img.size and (img.min() < 0 or img.max() > 1):
        raise ContractError("gamma_transform expects normalized pixels in [0, 1]")
    out = params.c * np.power(img, params.gamma)
    return np.clip(out, 0, 1).astype(img.dtype, copy=False)


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with ``out[i, j] = in[i*H//out_h, j*W//out_w]``."""
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"resize target must be >= 1, got {out_h}×{out_w}")
    H, W = img.shape[:2]
    rows = np.arange(out_h) * H // out_h
    cols = np.arange(out_w) * W // out_w
    return img[rows[:, None], cols[None, :]]


@dataclass(frozen=True)
class PreprocessConfig:
    image_size: int = 32
    gamma: GammaParams = GammaParams()
    order: tuple[str, ...] = ("normalize", "gamma", "resize")

    def __post_init__(self):
        if sorted(self.order) != ["gamma", "normalize", "resize"]:
            raise ConfigurationError(f"order must be a permutation of normalize, gamma, resize: {self.order}")
        if self.order.index("normalize") > self.order.index("gamma"):
            raise ConfigurationError("gamma needs unit-range input, so normalize must come before gamma")


def preprocess(raw: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    img = raw
    for step in cfg.order:
        if step == "normalize":
            img = normalize(img)
        elif step == "gamma":
            img = gamma_transform(img, cfg.gamma)
        else:
            img = resize_nearest(img, cfg.image_size, cfg.image_size)
    return img


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 40.0
    shift_frac: float = 0.2
    shear: float = 0.2
    zoom_frac: float = 0.2
    hflip: bool = True

    def __post_init__(self):
        for name in ("shift_frac", "shear", "zoom_frac"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigurationError(f"{name} must be in [0, 1), got {v}")
        if not 0 <= self.rotation_deg < 360:
            raise ConfigurationError(f"rotation_deg must be in [0, 360), got {self.rotation_deg}")


@dataclass(frozen=True)
class AffineParams:
    """One concrete draw of the five augmentations."""

    angle_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    shear: float = 0.0
    zoom_x: float = 1.0
    zoom_y: float = 1.0
    flip: bool = False


def sample_affine(cfg: AugmentConfig, rng: np.random.Generator) -> AffineParams:
    """Draw all seven random numbers unconditionally so the stream advances identically for any config."""
    u = rng.uniform(-1.0, 1.0, size=6)
    flip_draw = rng.random()
    return AffineParams(
        angle_deg=float(u[0] * cfg.rotation_deg),
        shift_x=float(u[1] * cfg.shift_frac),
        shift_y=float(u[2] * cfg.shift_frac),
        shear=float(u[3] * cfg.shear),
        zoom_x=float(1 + u[4] * cfg.zoom_frac),
        zoom_y=float(1 + u[5] * cfg.zoom_frac),
        flip=bool(cfg.hflip and flip_draw < 0.5),
    )


def inverse_affine(p: AffineParams, height: int, width: int) -> np.ndarray:
    """2×3 matrix mapping output pixel ``(x, y)`` to its source location.

    The forward map, about the image centre, is flip, then zoom, shear,
    rotation, and finally translation by ``(shift_x*W, shift_y*H)``.
    Shear is an angle in radians.
    """
    t = np.deg2rad(p.angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    shear = np.array([[1.0, -np.sin(p.shear)], [0.0, np.cos(p.shear)]])
    zoom = np.diag([p.zoom_x, p.zoom_y])
    flip = np.diag([-1.0 if p.flip else 1.0, 1.0])
    A = rot @ shear @ zoom @ flip
    center = np.array([(width - 1) / 2, (height - 1) / 2])
    shift = np.array([p.shift_x * width, p.shift_y * height])
    A_inv = np.linalg.inv(A)
    offset = center - A_inv @ (center + shift)
    return np.hstack([A_inv, offset[:, None]])


def apply_affine(img: np.ndarray, p: AffineParams) -> np.ndarray:
    """Warp with nearest-neighbour sampling; pixels mapped from outside the image become 0."""
    H, W = img.shape[:2]
    squeeze = img.ndim == 2
    src = img[:, :, None] if squeeze else img
    out = kernels.warp_nearest(np.ascontiguousarray(src), inverse_affine(p, H, W))
    return out[:, :, 0] if squeeze else out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random rotation, shift, shear, zoom and horizontal flip composed into one warp."""
    if img.dtype == np.uint8:
        raise ContractError("augment expects a normalized float image")
    return apply_affine(img, sample_affine(cfg, rng))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Raw uint8 images with class indices and a train/test tag per item."""

    items: list[tuple[np.ndarray, int]]
    class_names: list[str]
    splits: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.splits) != len(self.items):
            raise ContractError("every item needs exactly one split tag")
        K = len(self.class_names)
        for _, label in self.items:
            if not 0 <= label < K:
                raise ContractError(f"label {label} out of range for {K} classes")
        if set(self.splits) - {"train", "test"}:
            raise ContractError(f"unknown split tags {set(self.splits) - {'train', 'test'}}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> list[int]:
        return [lab for _, lab in self.items]

    def split(self, name: str) -> tuple[list[np.ndarray], list[int]]:
        pairs = [it for it, s in zip(self.items, self.splits) if s == name]
        return [img for img, _ in pairs], [lab for _, lab in pairs]


def stratified_split(labels: Sequence[int], test_fraction: float, seed: int) -> list[str]:
    """Tag ``round(n_k * test_fraction)`` items of each class as test."""
    if not 0 <= test_fraction < 1:
        raise ConfigurationError(f"test_fraction must be in [0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    tags = ["train"] * len(labels)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        n_test = int(round(len(idx) * test_fraction))
        for i in rng.permutation(idx)[:n_test]:
            tags[int(i)] = "test"
    return tags


def _class_params(num_classes: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    freqs = rng.permutation(np.linspace(1.5, 6.0, num_classes))
    params = []
    for k in range(num_classes):
        params.append(dict(
            hue=(k + rng.uniform(-0.15, 0.15)) / num_classes,
            freq=float(freqs[k]),
            angle=np.pi * k / num_classes + rng.uniform(-0.1, 0.1),
            blobs=float(rng.uniform(0.0, 6.0)),
        ))
    return params


def _render(p: dict, size: int, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    hue = (p["hue"] + rng.uniform(-0.3, 0.3) / num_classes) % 1.0
    angle = p["angle"] + rng.uniform(-0.15, 0.15)
    freq = p["freq"] * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xs * np.cos(angle) + ys * np.sin(angle)) / size + phase)
    base = np.array(colorsys.hsv_to_rgb(hue, 0.8, rng.uniform(0.75, 0.95)))
    img = base[None, None, :] * (0.35 + 0.65 * wave[:, :, None])
    accent = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.7, 0.9))
    for _ in range(rng.poisson(p["blobs"])):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(0.06, 0.12) * size
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        img[mask] = accent
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def color_histograms(images: Sequence[np.ndarray], bins: int = 8) -> np.ndarray:
    """Per-image concatenated per-channel histograms, each channel normalized to sum 1."""
    out = np.zeros((len(images), 3 * bins))
    for i, img in enumerate(images):
        for c in range(3):
            h = np.bincount(img[:, :, c].reshape(-1).astype(np.int64) * bins // 256, minlength=bins)
            out[i, c * bins:(c + 1) * bins] = h / h.sum()
    return out


def histogram_separation(images: Sequence[np.ndarray], labels: Sequence[int]) -> tuple[float, float]:
    """Mean L1 histogram distance within classes and between classes."""
    h = color_histograms(images)
    labels = np.asarray(labels)
    d = np.abs(h[:, None, :] - h[None, :, :]).sum(axis=-1)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    return float(d[same & off_diag].mean()), float(d[~same].mean())


def generate_synthetic_dataset(num_classes: int, per_class: int, size: int, seed: int,
                               test_fraction: float = 0.2) -> LabeledDataset:
    """Procedural texture classes: oriented colour stripes plus accent blobs.

    Each class has its own hue, stripe frequency, stripe angle and blob
    density; each image jitters those and adds noise. Image ``i`` of class
    ``k`` depends only on ``(seed, k, i)``.
    """
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1 or size < 1:
        raise ConfigurationError(f"per_class and size must be >= 1, got {per_class}, {size}")
    params = _class_params(num_classes, seed)
    items = []
    for k in range(num_classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, i]))
            items.append((_render(params[k], size, rng, num_classes), k))
    names = [f"class_{k:02d}" for k in range(num_classes)]
    labels = [lab for _, lab in items]
    intra, inter = histogram_separation([img for img, _ in items], labels)
    meta = dict(seed=seed, split_seed=seed, test_fraction=test_fraction, hist_intra=intra, hist_inter=inter)
    return LabeledDataset(items, names, stratified_split(labels, test_fraction, seed), meta)


def write_dataset_dir(ds: LabeledDataset, root) -> list[Path]:
    """Write ``root/<class_name>/<class_name>_<i>.ppm``; returns the written paths."""
    root = Path(root)
    counters = [0] * ds.num_classes
    paths = []
    for img, label in ds.items:
        d = root / ds.class_names[label]
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{ds.class_names[label]}_{counters[label]:05d}.ppm"
        counters[label] += 1
        write_ppm(path, img)
        paths.append(path)
    return paths


def load_dataset_dir(root, test_fraction: float = 0.2, split_seed: int = 0) -> LabeledDataset:
    """Load a class-per-directory PPM tree; class order is sorted directory name order."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset directory {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ConfigurationError(f"dataset {root} needs at least two class directories")
    items = []
    for k, d in enumerate(class_dirs):
        for f in sorted(d.glob("*.ppm")):
            items.append((load_ppm(f), k))
    if not items:
        raise ConfigurationError(f"no .ppm images under {root}")
    labels = [lab for _, lab in items]
    meta = dict(split_seed=split_seed, test_fraction=test_fraction, root=str(root))
    return LabeledDataset(items, [d.name for d in class_dirs], stratified_split(labels, test_fraction, split_seed), meta)
