"""Image planes, colour conversion, bicubic resampling and training-pair synthesis.

All processing happens on float32 planes in byte range [0, 255].  Bicubic
resampling follows the convention of MATLAB's ``imresize``: Keys cubic kernel
with a = -0.5, half-pixel centres, symmetric border handling and, when
shrinking, a kernel widened by the inverse scale (anti-aliasing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

BYTE = "byte"
UNIT = "unit"
_PEAK = {BYTE: 255.0, UNIT: 1.0}


@dataclass
class ImagePlane:
    """A single-channel image with a value-range tag."""

    values: np.ndarray
    range: str = BYTE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"image plane must be 2-D and non-empty, got {self.values.shape}")
        if self.range not in _PEAK:
            raise ValueError(f"unknown range tag {self.range!r}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def peak(self) -> float:
        return _PEAK[self.range]

    def clamped(self) -> "ImagePlane":
        return ImagePlane(np.clip(self.values, 0.0, self.peak), self.range)


@dataclass(frozen=True)
class SamplePair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int

    def __post_init__(self):
        if self.hr.shape != (self.lr.shape[0] * self.scale, self.lr.shape[1] * self.scale):
            raise ValueError(f"hr {self.hr.shape} is not {self.scale}x lr {self.lr.shape}")


def _values(img) -> np.ndarray:
    return img.values if isinstance(img, ImagePlane) else np.asarray(img, dtype=np.float32)


# --------------------------------------------------------------------------
# colour


def rgb_to_ycbcr(r, g, b):
    """ITU-R BT.601 studio swing, byte-range input and output (unrounded)."""
    r, g, b = (np.asarray(c, dtype=np.float64) / 255.0 for c in (r, g, b))
    y = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b
    cb = 128.0 - 37.797 * r - 74.203 * g + 112.0 * b
    cr = 128.0 + 112.0 * r - 93.786 * g - 18.214 * b
    return y.astype(np.float32), cb.astype(np.float32), cr.astype(np.float32)


_YCC_TO_RGB = np.linalg.inv(
    np.array([[65.481, 128.553, 24.966], [-37.797, -74.203, 112.0], [112.0, -93.786, -18.214]])
)


def ycbcr_to_rgb(y, cb, cr):
    ycc = np.stack([np.asarray(c, dtype=np.float64) for c in (y, cb, cr)], axis=-1)
    ycc = ycc - np.array([16.0, 128.0, 128.0])
    rgb = ycc @ _YCC_TO_RGB.T * 255.0
    return tuple(rgb[..., i].astype(np.float32) for i in range(3))


def quantize(values) -> np.ndarray:
    """Round half away from zero and saturate to uint8 (``im2uint8`` behaviour)."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# bicubic


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense ``(out_len, in_len)`` resampling matrix along one axis."""
    width = 4.0
    if scale < 1 and antialias:
        kernel = lambda t: scale * cubic(scale * t)  # noqa: E731
        width = width / scale
    else:
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights /= weights.sum(axis=1, keepdims=True)
    # symmetric (mirror) extension, 1-based like the reference convention
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len - 1, -1, -1)])
    cols = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, cols.ravel()), weights.ravel())
    return mat


def _target_dims(h: int, w: int, scale, size):
    if size is not None:
        oh, ow = size
        sh, sw = oh / h, ow / w
    else:
        sh = sw = float(scale)
        oh, ow = int(math.ceil(h * sh - 1e-9)), int(math.ceil(w * sw - 1e-9))
    if oh < 1 or ow < 1:
        raise ValueError(f"target dims must be >= 1, got {(oh, ow)}")
    return oh, ow, sh, sw


def bicubic_resize(img, scale: float | None = None, size: tuple[int, int] | None = None,
                   antialias: bool = True):
    """Resize a 2-D plane (or ``ImagePlane``) by ``scale`` or to ``size=(h, w)``.

    Returns the same kind of object it was given.  No clamping is applied.
    """
    if (scale is None) == (size is None):
        raise ValueError("give exactly one of scale or size")
    values = _values(img).astype(np.float64)
    h, w = values.shape
    oh, ow, sh, sw = _target_dims(h, w, scale, size)
    rows = resize_matrix(h, oh, sh, antialias)
    cols = resize_matrix(w, ow, sw, antialias)
    out = (rows @ values @ cols.T).astype(np.float32)
    if isinstance(img, ImagePlane):
        return ImagePlane(out, img.range)
    return out


def bicubic_resize_batch(x: np.ndarray, scale: float, antialias: bool = True) -> np.ndarray:
    """Resize every plane of an ``(N, C, H, W)`` tensor."""
    n, c, h, w = x.shape
    oh, ow, sh, sw = _target_dims(h, w, scale, None)
    rows = resize_matrix(h, oh, sh, antialias).astype(x.dtype)
    cols = resize_matrix(w, ow, sw, antialias).astype(x.dtype)
    return np.ascontiguousarray(np.einsum("ih,nchw,jw->ncij", rows, x, cols, optimize=True))


def modcrop(values: np.ndarray, scale: int) -> np.ndarray:
    h, w = values.shape[:2]
    return values[: h - h % scale, : w - w % scale]


# --------------------------------------------------------------------------
# training data


def augmentations(values: np.ndarray) -> list[np.ndarray]:
    """The 8 dihedral variants: rotations by 0/90/180/270 degrees, each with
    and without a horizontal flip."""
    out = []
    for flip in (False, True):
        base = values[:, ::-1] if flip else values
        for k in range(4):
            out.append(np.ascontiguousarray(np.rot90(base, k)))
    return out


def augment_all(images: Iterable[np.ndarray]) -> list[np.ndarray]:
    return [v for img in images for v in augmentations(np.asarray(img, dtype=np.float32))]


def split_holdout(items: Sequence, n_holdout: int, seed: int):
    """Seeded random split into ``(train, holdout)``; holdout keeps ``n_holdout`` items."""
    if not 0 <= n_holdout < len(items):
        raise ValueError(f"cannot hold out {n_holdout} of {len(items)} items")
    order = np.random.default_rng(seed).permutation(len(items))
    hold = set(order[:n_holdout].tolist())
    train = [items[i] for i in range(len(items)) if i not in hold]
    holdout = [items[i] for i in sorted(hold)]
    return train, holdout


def crop_pair(hr_image: np.ndarray, scale: int, top: int, left: int, patch: int,
              antialias: bool = True) -> SamplePair:
    hr = np.ascontiguousarray(hr_image[top: top + patch, left: left + patch], dtype=np.float32)
    lr = bicubic_resize(hr, scale=1.0 / scale, antialias=antialias)
    return SamplePair(lr, hr, scale)


def make_dataset(hr_images: Sequence[np.ndarray], scale: int, patch: int = 96,
                 count: int = 1000, seed: int = 0, augment: bool = True,
                 antialias: bool = True) -> list[SamplePair]:
    """Random ``patch x patch`` HR crops with bicubic-downsampled LR partners.

    Each image is modulo-cropped to a multiple of ``scale`` and, when
    ``augment`` is set, expanded into its 8 dihedral variants before sampling.
    Crop corners are multiples of ``scale``.
    """
    if scale not in (2, 3, 4):
        raise ValueError(f"unsupported scale {scale}")
    if patch % scale:
        raise ValueError(f"patch {patch} is not divisible by scale {scale}")
    pool = []
    for img in hr_images:
        img = modcrop(np.asarray(img, dtype=np.float32), scale)
        if min(img.shape) < patch:
            raise ValueError(f"image {img.shape} smaller than patch {patch}")
        pool.extend(augmentations(img) if augment else [img])
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        img = pool[int(rng.integers(len(pool)))]
        top = scale * int(rng.integers((img.shape[0] - patch) // scale + 1))
        left = scale * int(rng.integers((img.shape[1] - patch) // scale + 1))
        pairs.append(crop_pair(img, scale, top, left, patch, antialias))
    return pairs


def stack_pairs(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    lr = np.stack([p.lr for p in pairs])[:, None]
    hr = np.stack([p.hr for p in pairs])[:, None]
    return lr.astype(np.float32), hr.astype(np.float32)


# --------------------------------------------------------------------------
# PNG I/O


class UnsupportedImage(ValueError):
    pass


def load_png(path) -> list[np.ndarray]:
    """Load an 8-bit grayscale or RGB image as a list of float32 planes."""
    try:
        im = Image.open(path)
        im.load()
    except (OSError, SyntaxError) as exc:
        raise UnsupportedImage(f"cannot read image {path}: {exc}") from exc
    if im.mode in ("I;16", "I;16B", "I;16L", "I", "F") or im.mode.endswith(";16"):
        raise UnsupportedImage(f"{path}: unsupported bit depth (mode {im.mode})")
    if im.mode == "L":
        return [np.asarray(im, dtype=np.float32)]
    if im.mode not in ("RGB", "RGBA", "P", "LA", "1"):
        raise UnsupportedImage(f"{path}: unsupported mode {im.mode}")
    if im.mode in ("LA", "1"):
        return [np.asarray(im.convert("L"), dtype=np.float32)]
    arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return [arr[..., i] for i in range(3)]


def save_png(planes: Sequence[np.ndarray], path):
    planes = [quantize(p) for p in planes]
    if len(planes) == 1:
        im = Image.fromarray(planes[0], mode="L")
    elif len(planes) == 3:
        im = Image.fromarray(np.stack(planes, axis=-1), mode="RGB")
    else:
        raise ValueError(f"expected 1 or 3 planes, got {len(planes)}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")


def load_luminance(path) -> np.ndarray:
    """Y channel of an image, quantized to byte levels like a uint8 YCbCr conversion."""
    planes = load_png(path)
    if len(planes) == 1:
        return planes[0]
    y, _, _ = rgb_to_ycbcr(*planes)
    return quantize(y).astype(np.float32)


IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
