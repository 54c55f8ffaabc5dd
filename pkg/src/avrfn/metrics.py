"""PSNR / SSIM and the per-image evaluation harness."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import EvalPair, resize_array

METRICS_HEADER = ["test_set", "scale", "parameters", "psnr", "ssim", "psnr_std", "ssim_std"]
PER_IMAGE_HEADER = ["image", "psnr", "ssim"]
INF_SENTINEL = "inf"


def _crop(a: np.ndarray, border: int) -> np.ndarray:
    return a[border:a.shape[0] - border, border:a.shape[1] - border] if border else a


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, border_crop: int = 0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    d = _crop(a, border_crop) - _crop(b, border_crop)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean single-scale SSIM over all fully covered Gaussian windows."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class ImageScore:
    image_id: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    test_set: str
    scale: int
    parameters: int
    rows: List[ImageScore] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    @staticmethod
    def _stats(values: Sequence[float]):
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return math.nan, math.nan
        finite = v[np.isfinite(v)]
        mean = float(np.mean(v)) if finite.size == v.size else math.inf
        std = float(np.std(finite)) if finite.size else 0.0
        return mean, std

    @property
    def psnr_mean(self) -> float:
        return self._stats([r.psnr for r in self.rows])[0]

    @property
    def psnr_std(self) -> float:
        return self._stats([r.psnr for r in self.rows])[1]

    @property
    def ssim_mean(self) -> float:
        return self._stats([r.ssim for r in self.rows])[0]

    @property
    def ssim_std(self) -> float:
        return self._stats([r.ssim for r in self.rows])[1]

    def summary_row(self) -> list:
        return [self.test_set, self.scale, self.parameters, _fmt(self.psnr_mean), _fmt(self.ssim_mean),
                _fmt(self.psnr_std), _fmt(self.ssim_std)]

    def write_csv(self, path, per_image_path=None, append: bool = False) -> None:
        write_metrics_csv(path, [self], append=append)
        if per_image_path is not None:
            with open(per_image_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(PER_IMAGE_HEADER)
                for r in self.rows:
                    w.writerow([r.image_id, _fmt(r.psnr), _fmt(r.ssim)])


def _fmt(v: float) -> str:
    if math.isinf(v):
        return INF_SENTINEL if v > 0 else "-inf"
    return repr(float(v))


def write_metrics_csv(path, reports: Sequence[MetricReport], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        for rep in reports:
            w.writerow(rep.summary_row())


Predictor = Callable[[np.ndarray], np.ndarray]


def bicubic_predictor(scale: int) -> Predictor:
    def predict(lr: np.ndarray) -> np.ndarray:
        h, w = lr.shape
        return np.clip(resize_array(lr, h * scale, w * scale), 0.0, 1.0)

    return predict


def model_predictor(model) -> Predictor:
    from .tensor import Tensor, no_grad

    def predict(lr: np.ndarray) -> np.ndarray:
        with no_grad():
            out = model(Tensor(lr[None, :, :, None]))
        return np.clip(out.data[0, :, :, 0], 0.0, 1.0)

    return predict


def evaluate(predict: Predictor, pairs: Sequence[EvalPair], scale: int, test_set: str = "test",
             parameters: int = 0, workers: int = 1, border_crop: int = 0) -> MetricReport:
    """Score ``predict`` on every pair; rows keep the order of ``pairs``."""
    for p in pairs:
        if p.hr.shape != (p.lr.shape[0] * scale, p.lr.shape[1] * scale):
            raise ValueError(f"{p.image_id}: HR {p.hr.shape} is not x{scale} of LR {p.lr.shape}")

    def score(p: EvalPair) -> ImageScore:
        sr = predict(p.lr)
        return ImageScore(p.image_id, psnr(sr, p.hr, border_crop=border_crop),
                          ssim(_crop(sr, border_crop), _crop(p.hr, border_crop)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, pairs))
    else:
        rows = [score(p) for p in pairs]
    return MetricReport(test_set, scale, parameters, rows)
