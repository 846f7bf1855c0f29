"""Single-channel float raster used for camera frames and derived maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ImageGrid:
    """A 2D float image with an optional physical pixel pitch.

    `data` is indexed [row, col] = [y, x]; public coordinates throughout
    the package are (x, y) tuples with x along columns.
    """

    data: np.ndarray
    pixel_pitch: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"ImageGrid needs a 2D array, got shape {self.data.shape}")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def image_data(image) -> np.ndarray:
    """Accept an ImageGrid or a bare 2D array and return the array."""
    if isinstance(image, ImageGrid):
        return image.data
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected 2D image, got shape {arr.shape}")
    return arr
