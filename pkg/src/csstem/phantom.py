"""Synthetic ground truth: a lattice of Gaussian blobs, like atomic columns in a crystal image."""

from __future__ import annotations

import numpy as np

from .imaging import Image


def lattice_centres(height: int, width: int, spacing: float, lattice: str = "square",
                    origin: tuple[float, float] | None = None) -> np.ndarray:
    """Blob centres covering the image plus a one-spacing margin."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    r0, c0 = origin if origin is not None else (spacing / 2, spacing / 2)
    if lattice == "square":
        row_step, shift = spacing, 0.0
    elif lattice == "hex":
        row_step, shift = spacing * np.sqrt(3) / 2, spacing / 2
    else:
        raise ValueError(f"unknown lattice {lattice!r} (use 'square' or 'hex')")
    pts = []
    nrow = int(np.ceil((height + 2 * spacing) / row_step)) + 1
    ncol = int(np.ceil((width + 2 * spacing) / spacing)) + 1
    for i in range(-1, nrow):
        r = r0 + i * row_step
        off = shift if i % 2 else 0.0
        for j in range(-1, ncol):
            pts.append((r, c0 + off + j * spacing))
    return np.array(pts)


def lattice_phantom(height: int = 128, width: int | None = None, spacing: float = 8.0,
                    blob_width: float = 1.6, lattice: str = "hex",
                    background: float = 0.1, contrast: float = 0.8) -> Image:
    """Lattice of isotropic Gaussian blobs on a flat background.

    Parameters
    ----------
    height, width : int
        Image size; ``width`` defaults to ``height``.
    spacing : float
        Distance between neighbouring blob centres in pixels.
    blob_width : float
        Gaussian standard deviation in pixels.
    lattice : {'square', 'hex'}
    background : float
        Intensity between blobs.
    contrast : float
        Peak height above background. ``background + contrast`` should stay
        within [0, 1].

    Returns
    -------
    Image
    """
    width = height if width is None else width
    if blob_width <= 0:
        raise ValueError("blob width must be positive")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    for r, c in lattice_centres(height, width, spacing, lattice):
        if -4 * blob_width - 1 < r < height + 4 * blob_width and -4 * blob_width - 1 < c < width + 4 * blob_width:
            img += np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * blob_width ** 2))
    img = background + contrast * img / img.max()
    return Image(np.clip(img, 0.0, 1.0))
