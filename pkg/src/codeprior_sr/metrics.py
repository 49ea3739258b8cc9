"""Y-channel PSNR / SSIM and the evaluation driver.

Images are ``(H, W, 3)`` RGB arrays in [0, 1]. Luma uses BT.601 full-range
weights ``Y = 0.299 R + 0.587 G + 0.114 B``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .degradation import upsample

PSNR_CAP = 100.0
BT601 = np.array([0.299, 0.587, 0.114])

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img @ BT601


def _check_pair(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def psnr_y(ref: np.ndarray, test: np.ndarray) -> float:
    _check_pair(ref, test)
    mse = float(np.mean((rgb_to_y(ref) - rgb_to_y(test)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = win.shape[0] // 2
    return ndimage.correlate(img, win, mode="constant")[r:-r, r:-r]


def ssim_y(ref: np.ndarray, test: np.ndarray) -> float:
    """Single-scale SSIM on luma: Gaussian window 11x11, sigma 1.5, valid region only."""
    _check_pair(ref, test)
    x, y = rgb_to_y(ref), rgb_to_y(test)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    win = _gaussian_window()
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def bicubic_baseline(lr: np.ndarray, scale: int) -> np.ndarray:
    return np.clip(upsample(np.asarray(lr, dtype=np.float64), scale), 0.0, 1.0)


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, image_id: str, ref, test) -> None:
        self.rows.append((image_id, psnr_y(ref, test), ssim_y(ref, test)))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "psnr_db", "ssim"])
            for image_id, p, s in self.rows:
                w.writerow([image_id, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["image_id"] != "mean"]
        return cls([(r["image_id"], float(r["psnr_db"]), float(r["ssim"])) for r in rows])


def report_images(ids, refs, tests) -> MetricReport:
    rep = MetricReport()
    for i, ref, test in zip(ids, refs, tests):
        rep.add(i, ref, test)
    return rep


def evaluate(checkpoint, dataset_dir, split: str = "val", out_csv=None) -> MetricReport:
    """Run the SR model of ``checkpoint`` over a dataset split and score it against HR."""
    # local import: networks/training pull in torch model code
    from .degradation import ToyDataset
    from .training import load_model, super_resolve

    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    ds = ToyDataset.load(dataset_dir)
    model = load_model(ckpt)
    hr, lr = ds.arrays(split)
    sr = super_resolve(model, lr)
    rep = report_images([r["id"] for r in ds.split(split)], hr, sr)
    if out_csv is not None:
        rep.write_csv(out_csv)
    return rep
