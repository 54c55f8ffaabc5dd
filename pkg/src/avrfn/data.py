"""Grayscale image I/O, bicubic resampling and the bicubic-plus-noise degradation.

Randomness is stateless per draw: every random quantity is generated from a
``numpy`` generator seeded with ``[seed, stream, ...]`` where ``stream`` tags
what is being drawn.  A recorded key therefore reproduces its draw exactly,
independent of how many batches were produced before it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")
_STREAM_OFFSETS, _STREAM_PATCH_NOISE, _STREAM_EVAL_NOISE = 0, 1, 2


@dataclass
class GrayImage:
    pixels: np.ndarray
    max_value: float = 255.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"gray image must be 2-D, got shape {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("image contains non-finite pixels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# -- I/O -----------------------------------------------------------------------


def load_image(path) -> GrayImage:
    """Read an 8/16-bit grayscale PNG or PGM.  Colour images are averaged over RGB."""
    path = Path(path)
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    mode = im.mode
    if mode == "L":
        return GrayImage(np.asarray(im), 255.0)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im)
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
            raise ValueError(f"unsupported bit depth in {path}")
        return GrayImage(arr, 65535.0)
    if mode == "1":
        return GrayImage(np.asarray(im.convert("L")), 255.0)
    if mode in ("RGB", "RGBA", "LA", "P", "PA", "CMYK", "YCbCr"):
        if mode == "LA":
            return GrayImage(np.asarray(im)[..., 0], 255.0)
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        return GrayImage(rgb.mean(axis=-1), 255.0)
    raise ValueError(f"unsupported image mode {mode!r} in {path}")


def save_image(img: GrayImage, path) -> None:
    """Write an image, rounding and clipping to its integer domain."""
    path = Path(path)
    if img.max_value == 255.0:
        arr = np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)
    elif img.max_value == 65535.0:
        arr = np.clip(np.rint(img.pixels), 0, 65535).astype(np.uint16)
    else:
        raise ValueError(f"cannot store intensity domain [0, {img.max_value}]")
    Image.fromarray(arr).save(path)


def from_unit(arr: np.ndarray, max_value: float = 255.0) -> GrayImage:
    return GrayImage(np.clip(arr, 0.0, 1.0) * max_value, max_value)


def list_images(source) -> List[Path]:
    """Image files in a directory (sorted), or the paths listed in a manifest file."""
    source = Path(source)
    if source.is_dir():
        return sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    lines = source.read_text().splitlines()
    base = source.parent
    return [(base / ln.strip()) if not Path(ln.strip()).is_absolute() else Path(ln.strip())
            for ln in lines if ln.strip() and not ln.startswith("#")]


def load_images(source) -> List[Tuple[str, GrayImage]]:
    return [(p.stem, load_image(p)) for p in list_images(source)]


# -- bicubic resampling ------------------------------------------------------------


def keys_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_matrix(in_size: int, out_size: int, a: float = -0.5) -> np.ndarray:
    """``(out_size, in_size)`` resampling matrix with clamped edges.

    Pixel centres are aligned; when shrinking the kernel is widened by the
    inverse scale so it also low-pass filters.  Rows sum to one.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be positive")
    scale = out_size / in_size
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    m = np.zeros((out_size, in_size))
    for i in range(out_size):
        centre = (i + 0.5) / scale - 0.5
        lo = int(math.floor(centre - support)) + 1
        hi = int(math.ceil(centre + support))
        taps = np.arange(lo, hi)
        w = keys_kernel((centre - taps) * kscale, a)
        idx = np.clip(taps, 0, in_size - 1)
        np.add.at(m[i], idx, w)
    m /= m.sum(axis=1, keepdims=True)
    return m


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    if (out_h, out_w) == (h, w):
        # the matrices are exactly the identity here; skip the products
        return arr.copy()
    return resize_matrix(h, out_h) @ arr @ resize_matrix(w, out_w).T


def bicubic_resize(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    return GrayImage(resize_array(img.pixels, out_h, out_w), img.max_value)


# -- degradation ---------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationConfig:
    scale: int = 4
    noise_mean: float = 0.0
    noise_variance: float = 10.0
    lr_patch: int = 48
    seed: int = 0
    noise_enabled: bool = True
    batch_size: int = 16

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"unsupported scale {self.scale}")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")
        if self.lr_patch < 1 or self.batch_size < 1:
            raise ValueError("patch and batch sizes must be positive")

    @property
    def hr_patch(self) -> int:
        return self.scale * self.lr_patch

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def noise_samples(cfg: DegradationConfig, shape, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise in 8-bit intensity units."""
    return rng.normal(cfg.noise_mean, math.sqrt(cfg.noise_variance), size=shape)


def degrade_array(hr: np.ndarray, cfg: DegradationConfig, rng: Optional[np.random.Generator] = None,
                  max_value: float = 255.0) -> np.ndarray:
    """Bicubic downscale by ``cfg.scale``, add noise, normalise, clip to [0, 1]."""
    h, w = hr.shape
    down = resize_array(hr, h // cfg.scale, w // cfg.scale)
    if cfg.noise_enabled:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        # noise variance is stated for 8-bit data; rescale for deeper sources
        down = down + noise_samples(cfg, down.shape, rng) * (max_value / 255.0)
    return np.clip(down / max_value, 0.0, 1.0)


def degrade(hr_patch: np.ndarray, cfg: DegradationConfig, rng: Optional[np.random.Generator] = None,
            max_value: float = 255.0) -> np.ndarray:
    hr_patch = np.asarray(hr_patch, dtype=np.float64)
    if hr_patch.shape != (cfg.hr_patch, cfg.hr_patch):
        raise ValueError(f"expected a {cfg.hr_patch}x{cfg.hr_patch} HR patch, got {hr_patch.shape}")
    return degrade_array(hr_patch, cfg, rng, max_value)


# -- patch sampling -------------------------------------------------------------------


@dataclass(frozen=True)
class PatchRecord:
    image_id: str
    y: int
    x: int
    noise_key: Tuple[int, ...]


@dataclass
class Batch:
    lr: Tensor
    hr: Tensor
    provenance: List[PatchRecord] = field(default_factory=list)


class PatchSampler:
    """Deterministic batch source: ``batch(step)`` depends only on the seed and step."""

    def __init__(self, images: Sequence[Tuple[str, GrayImage]], cfg: DegradationConfig):
        self.cfg = cfg
        P = cfg.hr_patch
        self.images = []
        for image_id, img in images:
            if img.height < P or img.width < P:
                log.warning("skipping %s: %dx%d is smaller than the %d px HR patch",
                            image_id, img.width, img.height, P)
                continue
            self.images.append((image_id, img))
        if not self.images:
            raise ValueError("no usable images for patch sampling")
        self._by_id = dict(self.images)

    def offsets(self, step: int) -> List[Tuple[int, int, int]]:
        rng = np.random.default_rng([self.cfg.seed, _STREAM_OFFSETS, step])
        P = self.cfg.hr_patch
        out = []
        for _ in range(self.cfg.batch_size):
            k = int(rng.integers(len(self.images)))
            img = self.images[k][1]
            out.append((k, int(rng.integers(0, img.height - P + 1)), int(rng.integers(0, img.width - P + 1))))
        return out

    def lr_patch(self, hr: np.ndarray, record: PatchRecord, max_value: float) -> np.ndarray:
        return degrade(hr, self.cfg, np.random.default_rng(list(record.noise_key)), max_value)

    def hr_patch(self, record: PatchRecord) -> np.ndarray:
        img = self._by_id[record.image_id]
        P = self.cfg.hr_patch
        return img.pixels[record.y:record.y + P, record.x:record.x + P]

    def batch(self, step: int) -> Batch:
        cfg = self.cfg
        lrs, hrs, prov = [], [], []
        for i, (k, y, x) in enumerate(self.offsets(step)):
            image_id, img = self.images[k]
            rec = PatchRecord(image_id, y, x, (cfg.seed, _STREAM_PATCH_NOISE, step, i))
            hr = self.hr_patch(rec)
            lrs.append(self.lr_patch(hr, rec, img.max_value))
            hrs.append(np.clip(hr / img.max_value, 0.0, 1.0))
            prov.append(rec)
        return Batch(Tensor(np.stack(lrs)[..., None]), Tensor(np.stack(hrs)[..., None]), prov)

    __call__ = batch


def sample_patches(images, cfg: DegradationConfig, count: int, start: int = 0) -> Iterator[Batch]:
    """Yield ``count`` batches for steps ``start .. start + count - 1``."""
    sampler = images if isinstance(images, PatchSampler) else PatchSampler(images, cfg)
    for step in range(start, start + count):
        yield sampler.batch(step)


# -- evaluation pairs ------------------------------------------------------------------


@dataclass
class EvalPair:
    image_id: str
    lr: np.ndarray
    hr: np.ndarray
    max_value: float = 255.0


def crop_to_multiple(pixels: np.ndarray, r: int) -> np.ndarray:
    h, w = pixels.shape
    nh, nw = h - h % r, w - w % r
    top, left = (h - nh) // 2, (w - nw) // 2
    return pixels[top:top + nh, left:left + nw]


def eval_pairs(images: Sequence[Tuple[str, GrayImage]], cfg: DegradationConfig) -> List[EvalPair]:
    """Full-frame LR/HR pairs, both normalised to [0, 1]."""
    pairs = []
    for idx, (image_id, img) in enumerate(images):
        hr = crop_to_multiple(img.pixels, cfg.scale)
        rng = np.random.default_rng([cfg.seed, _STREAM_EVAL_NOISE, idx])
        lr = degrade_array(hr, cfg, rng, img.max_value)
        pairs.append(EvalPair(image_id, lr, np.clip(hr / img.max_value, 0.0, 1.0), img.max_value))
    return pairs
