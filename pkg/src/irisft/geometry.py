"""Mask and bounding-box primitives.

Masks are plain boolean numpy arrays of shape (H, W).  Boxes use inclusive
integer pixel coordinates.  On disk a mask is an 8-bit single-channel PNG
where a pixel is foreground iff its value is >= 128; writers emit exactly
0 and 255.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .errors import EmptyMask, IoFailure, UnreadableImage


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, inclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinate: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def contains_box(self, other: "BoundingBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def to_text(self) -> str:
        return f"{self.x_min},{self.y_min},{self.x_max},{self.y_max}"

    @classmethod
    def from_text(cls, text: str) -> "BoundingBox":
        parts = text.split(",")
        if len(parts) != 4:
            raise ValueError(f"expected 4 comma-separated ints, got {text!r}")
        return cls(*(int(p) for p in parts))


@dataclass(frozen=True)
class PerturbSpec:
    """Box-noise parameters for training-time prompt perturbation."""

    max_shift: int = 10
    max_scale: int = 10
    seed: int = 0


def full_box(height: int, width: int) -> BoundingBox:
    """The box covering an entire raster."""
    return BoundingBox(0, 0, width - 1, height - 1)


def mask_to_bbox(mask: np.ndarray) -> BoundingBox:
    """Tightest box containing all foreground pixels of a boolean mask.

    Raises:
        EmptyMask: if the mask has no foreground pixels.
    """
    mask = np.asarray(mask, dtype=bool)
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise EmptyMask("mask has no foreground pixels")
    y_min, y_max = np.where(rows)[0][[0, -1]]
    x_min, x_max = np.where(cols)[0][[0, -1]]
    return BoundingBox(int(x_min), int(y_min), int(x_max), int(y_max))


def perturb_bbox(box: BoundingBox, spec: PerturbSpec,
                 image_hw: Tuple[int, int],
                 rng: Optional[np.random.Generator] = None) -> BoundingBox:
    """Randomly scale edges and shift a box, clamped to image bounds.

    Each edge moves independently by an integer in [-max_scale, +max_scale],
    then the whole box translates by integers in [-max_shift, +max_shift]
    per axis.  Inverted edges after clamping are swap-repaired.  Passing the
    same rng state reproduces the same output; max_shift = max_scale = 0 is
    the identity.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    h, w = image_hw
    sc = spec.max_scale
    sh = spec.max_shift
    d_edges = rng.integers(-sc, sc + 1, size=4)
    d_shift = rng.integers(-sh, sh + 1, size=2)
    x_min = box.x_min + int(d_edges[0]) + int(d_shift[0])
    y_min = box.y_min + int(d_edges[1]) + int(d_shift[1])
    x_max = box.x_max + int(d_edges[2]) + int(d_shift[0])
    y_max = box.y_max + int(d_edges[3]) + int(d_shift[1])
    x_min = min(max(x_min, 0), w - 1)
    x_max = min(max(x_max, 0), w - 1)
    y_min = min(max(y_min, 0), h - 1)
    y_max = min(max(y_max, 0), h - 1)
    if x_min > x_max:
        x_min, x_max = x_max, x_min
    if y_min > y_max:
        y_min, y_max = y_max, y_min
    return BoundingBox(x_min, y_min, x_max, y_max)


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask: pixel is foreground iff sigmoid(logit) >= threshold."""
    from .losses import sigmoid
    return sigmoid(np.asarray(logits, dtype=np.float64)) >= threshold


def read_mask(path) -> np.ndarray:
    """Load a mask PNG as a boolean array (foreground iff value >= 128)."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot decode mask {path}: {exc}") from exc
    return arr >= 128


def write_mask(path, mask: np.ndarray) -> None:
    """Write a boolean mask as an 8-bit PNG with values exactly 0 and 255."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write mask {path}: {exc}") from exc
