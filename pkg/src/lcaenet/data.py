"""Image/mask ingestion, normalisation, augmentation and synthetic infrared scenes.

Dataset layout on disk::

    <root>/images/<id>.png   8-bit grayscale
    <root>/masks/<id>.png    8-bit, foreground > 127
    <root>/split.txt         "<id>\\t<train|test>" per line
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionError, InputError

MASK_THRESHOLD = 127
STD_EPS = 1e-6
SUBSETS = ("train", "test")


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float64 intensities
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = (np.asarray(self.mask) > 0).astype(np.uint8)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise DimensionError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")


# file I/O ---------------------------------------------------------------------

def _read_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "L":
                arr = np.asarray(img, dtype=np.float64)
            elif mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(img, dtype=np.float64) * (255.0 / 65535.0)
            elif mode in ("1", "P", "LA", "RGB", "RGBA", "CMYK", "YCbCr"):
                arr = np.asarray(img.convert("L"), dtype=np.float64)
            else:
                raise InputError(f"{path}: image mode {mode!r} has no grayscale conversion")
    except (OSError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: cannot decode image ({exc})") from exc
    return arr


def load_sample(image_path, mask_path, sample_id: str | None = None) -> Sample:
    """Read an image (intensities 0-255) and its mask (binarised at > 127)."""
    image = _read_gray(image_path)
    mask = _read_gray(mask_path)
    if image.shape != mask.shape:
        raise DimensionError(f"image {image.shape} and mask {mask.shape} differ in size")
    return Sample(image, (mask > MASK_THRESHOLD).astype(np.uint8), sample_id or Path(image_path).stem)


def encode_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def encode_mask(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)


def write_sample(root, sample: Sample) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_image(sample.image), mode="L").save(root / "images" / f"{sample.id}.png")
    Image.fromarray(encode_mask(sample.mask), mode="L").save(root / "masks" / f"{sample.id}.png")


def write_manifest(root, entries: Iterable[tuple[str, str]]) -> None:
    entries = list(entries)
    seen: dict[str, str] = {}
    for sid, subset in entries:
        if subset not in SUBSETS:
            raise ValueError(f"unknown subset {subset!r} for {sid}")
        if sid in seen:
            raise ValueError(f"id {sid!r} listed twice")
        seen[sid] = subset
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "split.txt").write_text("".join(f"{sid}\t{subset}\n" for sid, subset in entries))


def read_manifest(root) -> list[tuple[str, str]]:
    path = Path(root) / "split.txt"
    if not path.is_file():
        raise FileNotFoundError(f"no split manifest at {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SUBSETS:
            raise InputError(f"{path}:{lineno}: expected '<id> <train|test>'")
        entries.append((parts[0], parts[1]))
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate ids")
    return entries


def load_dataset(root, subset: str | None = None) -> list[Sample]:
    """Samples listed in ``split.txt`` (optionally one subset), in manifest order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset directory at {root}")
    out = []
    for sid, sub in read_manifest(root):
        if subset is None or sub == subset:
            out.append(load_sample(root / "images" / f"{sid}.png", root / "masks" / f"{sid}.png", sid))
    return out


# normalisation and augmentation -----------------------------------------------

def standardize(image: np.ndarray, eps: float = STD_EPS) -> np.ndarray:
    """Per-image zero mean / unit standard deviation."""
    image = np.asarray(image, dtype=np.float64)
    return (image - image.mean()) / max(float(image.std()), eps)


def pad_crop(sample: Sample, rng: np.random.Generator | None, size: int = 256, train: bool = True) -> Sample:
    """Edge-replicate pad up to ``size`` per axis, then crop ``size x size``.

    Training crops at a uniform random offset; evaluation (``train=False`` or
    ``rng=None``) crops the centre.
    """
    h, w = sample.image.shape
    ph, pw = max(size - h, 0), max(size - w, 0)
    pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    image = np.pad(sample.image, pad, mode="edge") if ph or pw else sample.image
    mask = np.pad(sample.mask, pad, mode="edge") if ph or pw else sample.mask
    hh, ww = image.shape
    if train and rng is not None:
        top = int(rng.integers(0, hh - size + 1))
        left = int(rng.integers(0, ww - size + 1))
    else:
        top, left = (hh - size) // 2, (ww - size) // 2
    return replace(sample, image=image[top:top + size, left:left + size].copy(),
                   mask=mask[top:top + size, left:left + size].copy())


def pad_crop_256(sample: Sample, rng: np.random.Generator | None, train: bool = True) -> Sample:
    return pad_crop(sample, rng, 256, train)


def random_flip(sample: Sample, rng: np.random.Generator, p: float = 0.5) -> Sample:
    """Horizontal and vertical flips, each with probability ``p``, applied to image and mask alike."""
    image, mask = sample.image, sample.mask
    if rng.random() < p:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < p:
        image, mask = image[::-1, :], mask[::-1, :]
    return replace(sample, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))


# synthetic scenes -------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic infrared scene.

    ``targets`` is an inclusive ``(min, max)`` count range (or a single int);
    explicit ``centers`` override random placement and then ``targets`` is
    ignored.
    """

    size: tuple = (64, 64)
    targets: tuple = (1, 2)
    amplitude: tuple = (40.0, 120.0)
    sigma: tuple = (0.5, 2.0)
    background: float = 70.0
    gradient: float = 40.0
    smooth_noise: float = 12.0
    smooth_scale: float = 6.0
    pixel_noise: float = 3.0
    clutter_prob: float = 0.3
    clutter_amplitude: float = 35.0
    centers: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        t = self.targets
        t = (t, t) if isinstance(t, (int, np.integer)) else tuple(t)
        object.__setattr__(self, "targets", (int(t[0]), int(t[1])))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if not 0 <= self.targets[0] <= self.targets[1] <= 3:
            raise ValueError(f"target count range must lie within 0..3, got {self.targets}")
        if not 0 < self.amplitude[0] <= self.amplitude[1]:
            raise ValueError("target amplitudes must be positive")
        if not 0.5 <= self.sigma[0] <= self.sigma[1] <= 2.0:
            raise ValueError("target sigma range must lie within [0.5, 2.0]")


def target_mask(shape: tuple, center: tuple, sigma: float) -> np.ndarray:
    """Pixels where a Gaussian of spread ``sigma`` is at least ``e^-2`` of its peak (radius ``2 sigma``)."""
    rr, cc = np.indices(shape)
    r2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return r2 <= 4.0 * sigma * sigma


def _place_targets(rng, spec: SynthSpec, n: int) -> list[tuple[float, float]]:
    h, w = spec.size
    margin = 3.0 * spec.sigma[1] + 1.0
    min_sep = 4.0 * spec.sigma[1] + 4.0
    if h - 1 - 2 * margin < 0 or w - 1 - 2 * margin < 0:
        raise ValueError(f"image {spec.size} too small for targets with margin {margin:.1f}")
    centers: list[tuple[float, float]] = []
    for _ in range(n):
        for _attempt in range(200):
            c = (float(rng.uniform(margin, h - 1 - margin)), float(rng.uniform(margin, w - 1 - margin)))
            if all(np.hypot(c[0] - o[0], c[1] - o[1]) >= min_sep for o in centers):
                centers.append(c)
                break
        else:
            raise ValueError(f"cannot place {n} separated targets in a {h}x{w} image")
    return centers


def synth_generate(spec: SynthSpec, rng: np.random.Generator | None = None, sample_id: str = "") -> Sample:
    """Smooth background plus Gaussian-like point targets; deterministic under ``spec.seed``.

    The mask marks each target's ``2 sigma`` disc. Intensities are clipped to
    [0, 255].
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    h, w = spec.size
    rr, cc = np.indices((h, w), dtype=np.float64)

    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (rr / max(h - 1, 1) - 0.5) + np.sin(angle) * (cc / max(w - 1, 1) - 0.5))
    image = spec.background + spec.gradient * ramp
    if spec.smooth_noise > 0:
        field_ = ndimage.gaussian_filter(rng.standard_normal((h, w)), spec.smooth_scale, mode="reflect")
        field_ /= max(field_.std(), 1e-12)
        image = image + spec.smooth_noise * field_
    if spec.clutter_prob > 0 and rng.random() < spec.clutter_prob:
        # a bright straight ridge crossing the frame, a few pixels wide
        theta = rng.uniform(0, np.pi)
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        dist = np.abs((rr - r0) * np.cos(theta) - (cc - c0) * np.sin(theta))
        width = rng.uniform(2.0, 4.0)
        image = image + spec.clutter_amplitude * np.exp(-(dist / width) ** 2)

    if spec.centers is not None:
        centers = [tuple(map(float, c)) for c in spec.centers]
    else:
        n = int(rng.integers(spec.targets[0], spec.targets[1] + 1))
        centers = _place_targets(rng, spec, n)
    mask = np.zeros((h, w), dtype=bool)
    for center in centers:
        amp = float(rng.uniform(*spec.amplitude))
        sigma = float(rng.uniform(*spec.sigma))
        r2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
        image = image + amp * np.exp(-r2 / (2.0 * sigma * sigma))
        mask |= r2 <= 4.0 * sigma * sigma
    if spec.pixel_noise > 0:
        image = image + spec.pixel_noise * rng.standard_normal((h, w))
    return Sample(np.clip(image, 0.0, 255.0), mask.astype(np.uint8), sample_id)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample stream; independent of generation order."""
    return np.random.default_rng([int(seed), int(index)])


def synth_dataset(count: int, spec: SynthSpec = SynthSpec(), seed: int = 0, prefix: str = "synth") -> list[Sample]:
    return [synth_generate(spec, sample_rng(seed, i), f"{prefix}_{i:05d}") for i in range(count)]


def write_synth_dataset(root, count: int, spec: SynthSpec = SynthSpec(), seed: int = 0,
                        test_fraction: float = 0.2) -> list[tuple[str, str]]:
    """Generate ``count`` samples, write them and a split manifest; returns the manifest.

    The last ``round(count * test_fraction)`` samples form the test split.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"cannot write to {root}")
    samples = synth_dataset(count, spec, seed)
    n_test = int(round(count * test_fraction))
    entries = []
    for i, s in enumerate(samples):
        write_sample(root, s)
        entries.append((s.id, "test" if i >= count - n_test else "train"))
    write_manifest(root, entries)
    return entries


def stack_batch(samples: Sequence[Sample], raw: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """``(N, 1, H, W)`` images (standardized unless ``raw``) and ``(N, 1, H, W)`` masks."""
    images = np.stack([s.image if raw else standardize(s.image) for s in samples])[:, None]
    masks = np.stack([s.mask for s in samples])[:, None]
    return images, masks
