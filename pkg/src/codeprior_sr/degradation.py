"""Randomised, seed-deterministic LR synthesis and the procedural toy corpus.

Images are ``(H, W, C)`` float64 arrays in [0, 1]. A degradation recipe is a
plain record; ``degrade(hr, recipe)`` is a pure function of its arguments.

Stages (applied in ``recipe.order``):

* ``blur``      - isotropic / anisotropic Gaussian kernel, edge-replicate border
* ``downsample``- bicubic (Keys, a = -0.5) with antialiasing, see :func:`resize`
* ``noise``     - additive Gaussian, drawn from ``default_rng(recipe.seed)``
* ``compress``  - 8x8 block-DCT quantisation, JPEG luminance table scaled by
                  ``(100 - quality) / 50``
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import itertools
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import fft, ndimage

STAGES = ("blur", "downsample", "noise", "compress")
ALL_ORDERS = list(itertools.permutations(STAGES))

# sampling ranges
SIGMA_RANGE = (0.2, 2.0)
KERNEL_SIZES = (7, 9, 11, 13, 15)
NOISE_RANGE = (0.0, 0.1)
QUALITY_RANGE = (30, 95)
P_NO_COMPRESSION = 0.25

BICUBIC_A = -0.5

# IJG standard luminance quantisation table (quality 50), 8-bit units
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class BlurSpec:
    kind: str  # "gaussian-iso" | "gaussian-aniso"
    sigma_x: float
    sigma_y: float
    theta: float
    size: int


@dataclass(frozen=True)
class DegradationRecipe:
    blur: BlurSpec | None
    scale: int
    noise_sigma: float
    quality: int | None
    order: tuple[str, ...] = STAGES
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["order"] = list(self.order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecipe":
        blur = BlurSpec(**d["blur"]) if d.get("blur") else None
        return cls(
            blur=blur,
            scale=int(d["scale"]),
            noise_sigma=float(d["noise_sigma"]),
            quality=None if d.get("quality") is None else int(d["quality"]),
            order=tuple(d["order"]),
            seed=int(d["seed"]),
        )

    @classmethod
    def identity(cls) -> "DegradationRecipe":
        return cls(blur=None, scale=1, noise_sigma=0.0, quality=None)


def sample_recipe(seed: int, scale: int = 2) -> DegradationRecipe:
    if scale not in (2, 4):
        raise DegradationError(f"scale must be 2 or 4, got {scale}")
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        s = float(rng.uniform(*SIGMA_RANGE))
        blur = BlurSpec("gaussian-iso", s, s, 0.0, int(rng.choice(KERNEL_SIZES)))
    else:
        blur = BlurSpec(
            "gaussian-aniso",
            float(rng.uniform(*SIGMA_RANGE)),
            float(rng.uniform(*SIGMA_RANGE)),
            float(rng.uniform(0.0, np.pi)),
            int(rng.choice(KERNEL_SIZES)),
        )
    noise = float(rng.uniform(*NOISE_RANGE))
    quality = None if rng.random() < P_NO_COMPRESSION else int(rng.integers(QUALITY_RANGE[0], QUALITY_RANGE[1] + 1))
    order = ALL_ORDERS[int(rng.integers(len(ALL_ORDERS)))]
    return DegradationRecipe(blur, scale, noise, quality, tuple(order), int(rng.integers(2**31 - 1)))


# ---------------------------------------------------------------------------
# stages


def gaussian_kernel(spec: BlurSpec) -> np.ndarray:
    if spec.size % 2 == 0:
        raise DegradationError("blur kernel size must be odd")
    r = spec.size // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    c, s = np.cos(spec.theta), np.sin(spec.theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * ((u / spec.sigma_x) ** 2 + (v / spec.sigma_y) ** 2))
    return k / k.sum()


def blur(img: np.ndarray, spec: BlurSpec) -> np.ndarray:
    k = gaussian_kernel(spec)
    # edge replication: a normalised non-negative kernel then cannot raise total variation
    return np.stack([ndimage.convolve(img[..., c], k, mode="nearest") for c in range(img.shape[-1])], axis=-1)


def _cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    m1 = x < 1
    m2 = (x >= 1) & (x < 2)
    out[m1] = ((a + 2) * x[m1] - (a + 3)) * x[m1] ** 2 + 1
    out[m2] = ((a * x[m2] - 5 * a) * x[m2] + 8 * a) * x[m2] - 4 * a
    return out


@functools.lru_cache(maxsize=64)
def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """``(out_size, in_size)`` bicubic interpolation matrix.

    Pixel centres are aligned (``x_in = (x_out + 0.5) * in/out - 0.5``). When
    shrinking, the kernel is stretched by ``in/out`` (antialiasing). Taps that
    fall outside the image are dropped and the remaining weights renormalised.
    """
    scale = in_size / out_size
    fscale = max(scale, 1.0)
    support = 2.0 * fscale
    W = np.zeros((out_size, in_size))
    for xo in range(out_size):
        center = (xo + 0.5) * scale
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), in_size)
        taps = np.arange(lo, hi)
        w = _cubic((taps - center + 0.5) / fscale)
        W[xo, lo:hi] = w / w.sum()
    return W


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    Wh = resize_weights(img.shape[0], out_h)
    Ww = resize_weights(img.shape[1], out_w)
    h, w, c = img.shape
    rows = (Wh @ img.reshape(h, w * c)).reshape(out_h, w, c)
    return np.matmul(Ww, rows)


def downsample(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % scale or w % scale:
        raise DegradationError(f"image {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        return img.copy()
    return resize(img, h // scale, w // scale)


def upsample(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return resize(img, h * scale, w * scale)


def add_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return img + rng.normal(0.0, sigma, size=img.shape)


def compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantisation proxy for JPEG (per channel, edge-padded to 8).

    Quality 100 is lossless.
    """
    if not 1 <= quality <= 100:
        raise DegradationError(f"quality must lie in [1, 100], got {quality}")
    if quality == 100:
        return img.copy()
    step = JPEG_LUMA_TABLE / 255.0 * ((100 - quality) / 50.0)
    h, w, c = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = x.shape[:2]
    blocks = x.reshape(H // 8, 8, W // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / step) * step
    rec = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, c)
    return rec[:h, :w]


def degrade(hr: np.ndarray, recipe: DegradationRecipe) -> np.ndarray:
    h, w = hr.shape[:2]
    if h % recipe.scale or w % recipe.scale:
        raise DegradationError(f"HR size {h}x{w} not divisible by scale {recipe.scale}")
    x = np.asarray(hr, dtype=np.float64)
    for stage in recipe.order:
        if stage == "blur" and recipe.blur is not None:
            x = blur(x, recipe.blur)
        elif stage == "downsample":
            x = downsample(x, recipe.scale)
        elif stage == "noise" and recipe.noise_sigma > 0:
            x = np.clip(add_noise(x, recipe.noise_sigma, recipe.seed), 0.0, 1.0)
        elif stage == "compress" and recipe.quality is not None:
            x = compress(x, recipe.quality)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# procedural HR textures

GENERATORS = ("checkerboard", "grating", "blobs", "edges")


def _colors(rng, n):
    return rng.uniform(0.05, 0.95, size=(n, 3))


def checkerboard(rng, size: int) -> np.ndarray:
    cell = int(rng.choice([4, 6, 8, 12, 16]))
    c = _colors(rng, 2)
    yy, xx = np.mgrid[:size, :size]
    off = rng.integers(0, cell, size=2)
    mask = (((yy + off[0]) // cell + (xx + off[1]) // cell) % 2).astype(bool)
    return np.where(mask[..., None], c[0], c[1])


def grating(rng, size: int) -> np.ndarray:
    period = rng.uniform(6.0, 24.0)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    t = 0.5 + 0.5 * np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
    c = _colors(rng, 2)
    return c[0] * t[..., None] + c[1] * (1 - t[..., None])


def blobs(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    img = np.tile(_colors(rng, 1)[0], (size, size, 1))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 10, size / 3)
        wgt = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - wgt) + _colors(rng, 1)[0] * wgt
    return img


def edges(rng, size: int) -> np.ndarray:
    """Piecewise-constant chart cut by a few random straight edges."""
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    img = np.tile(_colors(rng, 1)[0], (size, size, 1))
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0, 2 * np.pi)
        cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
        side = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy) > 0
        img = np.where(side[..., None], _colors(rng, 1)[0], img)
    return img


_GEN_FUNCS = {"checkerboard": checkerboard, "grating": grating, "blobs": blobs, "edges": edges}


def make_texture(kind: str, seed: int, size: int) -> np.ndarray:
    if kind not in _GEN_FUNCS:
        raise DegradationError(f"unknown texture generator {kind!r}")
    return np.clip(_GEN_FUNCS[kind](np.random.default_rng(seed), size), 0.0, 1.0)


# ---------------------------------------------------------------------------
# toy dataset


@dataclass
class DatasetConfig:
    n: int = 32
    size: int = 64
    seed: int = 7
    scale: int = 2
    val_fraction: float = 0.2
    generators: tuple[str, ...] = GENERATORS

    def split_counts(self) -> tuple[int, int]:
        n_val = int(self.n * self.val_fraction)
        return self.n - n_val, n_val


def item_seed(base: int, index: int) -> int:
    """Per-item seed, independent of how items are scheduled."""
    h = hashlib.sha256(f"{base}:{index}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def make_pair(config: DatasetConfig, index: int) -> tuple[np.ndarray, np.ndarray, DegradationRecipe, str]:
    s = item_seed(config.seed, index)
    kind = config.generators[index % len(config.generators)]
    hr = make_texture(kind, s, config.size)
    recipe = sample_recipe(s + 1, config.scale)
    return hr, degrade(hr, recipe), recipe, kind


def to_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


MANIFEST = "manifest.jsonl"


def build_toy_dataset(config: DatasetConfig, out_dir, overwrite: bool = False) -> Path:
    """Write HR/LR pairs (PNG + float32 ``.npy``) and a JSON-lines manifest.

    Items are split deterministically: the first ``n - n_val`` indices train,
    the rest validate.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} exists and is not empty; pass overwrite=True")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    n_train, _ = config.split_counts()
    records = []
    for i in range(config.n):
        hr, lr, recipe, kind = make_pair(config, i)
        split = "train" if i < n_train else "val"
        stem = f"{i:05d}"
        for tag, img in (("hr", hr), ("lr", lr)):
            np.save(out / f"{stem}_{tag}.npy", img.astype(np.float32))
            to_png(img, out / f"{stem}_{tag}.png")
        records.append(
            {
                "id": stem,
                "split": split,
                "generator": kind,
                "seed": item_seed(config.seed, i),
                "hr": f"{stem}_hr.npy",
                "lr": f"{stem}_lr.npy",
                "hr_png": f"{stem}_hr.png",
                "lr_png": f"{stem}_lr.png",
                "recipe": recipe.to_dict(),
            }
        )
    with open(out / MANIFEST, "w") as fh:
        fh.write(json.dumps({"config": dataclasses.asdict(config)}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return out


@dataclass
class ToyDataset:
    root: Path
    config: dict
    records: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, root) -> "ToyDataset":
        root = Path(root)
        path = root / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        lines = path.read_text().splitlines()
        head = json.loads(lines[0])
        return cls(root, head["config"], [json.loads(l) for l in lines[1:]])

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(N, H, W, 3)`` HR and LR float32 arrays of one split."""
        recs = self.split(name)
        hr = np.stack([np.load(self.root / r["hr"]) for r in recs])
        lr = np.stack([np.load(self.root / r["lr"]) for r in recs])
        return hr, lr
