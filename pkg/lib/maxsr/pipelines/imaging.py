"""
Image buffers and the pixel-level transforms of the evaluation protocol:
Matlab-convention bicubic resizing, BT.601 luma and the eight dihedral
transforms used by augmentation and self-ensemble.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from maxsr.errors import ConfigError, ShapeError
from maxsr.utilities.general import Files
from maxsr.utilities.parsers import Parse

logger = logging.getLogger(__name__)

CUBIC_A = -0.5
Y_OFFSET = 16.0 / 255.0
Y_WEIGHTS = np.array([65.481, 128.553, 24.966]) / 255.0
DIHEDRAL_CODES = tuple(range(8))


def quantize(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round to 8 bits, ties to even."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class ImageBuffer:
    """
    An 8-bit RGB image.

    Attributes:
        pixels: np.ndarray
            [height, width, 3] uint8 values.
        name: str
            Where the image came from, used in reports.
    """

    pixels: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3:
            raise ShapeError(f"Expected [H, W, 3] uint8, got {self.pixels.shape}")
        if self.pixels.shape[2] != 3:
            raise ShapeError(f"Expected 3 channels, got {self.pixels.shape[2]}")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return 3

    def to_float(self) -> np.ndarray:
        """The [0, 1] view, exactly pixels / 255 in 64-bit."""
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_float(cls, values: np.ndarray, name: str = "") -> "ImageBuffer":
        return cls(quantize(values), name)

    @classmethod
    def read(cls, path: Union[str, Path]) -> "ImageBuffer":
        return cls(Parse.png(path), Path(path).name)

    def write(self, path: Union[str, Path]) -> Path:
        return Files.write_png(path, self.pixels)

    def crop_to_multiple(self, factor: int) -> "ImageBuffer":
        """Drop the bottom/right remainder so both extents divide by `factor`."""
        height = self.height - self.height % factor
        width = self.width - self.width % factor
        if height == 0 or width == 0:
            raise ShapeError(f"{self.name} is smaller than the scale factor {factor}")

        return ImageBuffer(self.pixels[:height, :width].copy(), self.name)


def _cubic(x: np.ndarray) -> np.ndarray:
    a = CUBIC_A
    absx = np.abs(x)
    absx2, absx3 = absx**2, absx**3
    near = ((a + 2) * absx3 - (a + 3) * absx2 + 1) * (absx <= 1)
    far = (a * absx3 - 5 * a * absx2 + 8 * a * absx - 4 * a) * (
        (absx > 1) & (absx <= 2)
    )

    return near + far


def resize_weights(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """
    [out_len, in_len] bicubic interpolation matrix along one axis.

    Output pixel centres map back to input coordinates as in Matlab's imresize;
    when shrinking with `antialias`, the kernel is stretched by the inverse
    scale. Rows are normalized to sum to one and taps beyond the edge are
    clamped onto the border pixel.
    """
    if in_len < 1 or out_len < 1:
        raise ShapeError(f"Resize extents must be positive, got {in_len}->{out_len}")
    scale = out_len / in_len
    kernel_width = 4.0
    kernel = _cubic
    if scale < 1 and antialias:
        kernel_width = 4.0 / scale

        def kernel(x: np.ndarray) -> np.ndarray:
            return scale * _cubic(scale * x)

    centres = np.arange(1, out_len + 1) / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(centres - kernel_width / 2)
    taps = int(np.ceil(kernel_width)) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(centres[:, None] - indices)
    weights = weights / weights.sum(axis=1, keepdims=True)
    indices = np.clip(indices, 1, in_len).astype(int) - 1

    matrix = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(matrix, (rows, indices.reshape(-1)), weights.reshape(-1))

    return matrix


def bicubic_resize(
    image: np.ndarray, out_h: int, out_w: int, antialias: bool = True
) -> np.ndarray:
    """
    Resize an [h, w] or [h, w, c] float image with the bicubic kernel (a = -0.5).

    Args:
      image: np.ndarray
        Float values; channels are resized independently.
      out_h, out_w: int
        Target extents.
      antialias: bool
        Widen the kernel when downscaling (Matlab's default).

    Returns:
      A float64 array of shape [out_h, out_w] (+ channels). Values are not
      clamped; overshoot near edges is expected.
    """
    if image.ndim not in (2, 3):
        raise ShapeError(f"Expected [h, w] or [h, w, c], got {image.shape}")
    rows = resize_weights(image.shape[0], out_h, antialias)
    cols = resize_weights(image.shape[1], out_w, antialias)
    values = np.asarray(image, dtype=np.float64)
    if values.ndim == 2:
        return rows @ values @ cols.T

    return np.einsum("ih,hwc,jw->ijc", rows, values, cols, optimize=True)


def rgb_to_y(image: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of an [h, w, 3] image in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"Expected an [h, w, 3] image, got {image.shape}")
    return Y_OFFSET + np.asarray(image, dtype=np.float64) @ Y_WEIGHTS


def _check_code(code: int) -> Tuple[int, bool]:
    if code not in DIHEDRAL_CODES:
        raise ConfigError(f"Dihedral code must be in 0..7, got {code}")
    return code % 4, code >= 4


def dihedral(
    array: np.ndarray, code: int, axes: Tuple[int, int] = (0, 1)
) -> np.ndarray:
    """Rotate clockwise by 90 * (code % 4) degrees, then flip vertically if code >= 4.

    A clockwise quarter turn of an h x w array sends (i, j) to (j, h - 1 - i).
    """
    turns, flip = _check_code(code)
    out = np.rot90(array, -turns, axes=axes)
    if flip:
        out = np.flip(out, axis=axes[0])

    return np.ascontiguousarray(out)


def inverse_code(code: int) -> int:
    """The code undoing `code`; flipped transforms are their own inverse."""
    turns, flip = _check_code(code)
    return code if flip else (4 - turns) % 4
