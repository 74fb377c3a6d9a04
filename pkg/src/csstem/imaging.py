"""Image and mask containers, overlapping patches, PSNR metrics and image file I/O.

Unobserved pixels are always stored as exact zeros; the boolean mask is the
authoritative record of which pixels were measured.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._fileio import atomic_write_bytes, atomic_write_text

RAW_MAGIC = b"CSIM"


@dataclass(frozen=True)
class Image:
    """A 2-D grid of finite intensities.

    Parameters
    ----------
    data : ndarray, shape (H, W)
        Intensities, nominally normalized to [0, 1]. Noisy observations may
        stray slightly outside that range, so only finiteness is enforced.
    peak : float
        Intensity that 1.0 corresponds to in the source units (for instance
        255 for an 8-bit file). Kept for bookkeeping; metrics use their own
        ``peak`` argument.
    """

    data: np.ndarray
    peak: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"image data must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if not self.peak > 0:
            raise ValueError("peak must be positive")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    """Boolean sampling mask, True where a pixel was measured."""

    sampled: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.sampled)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        object.__setattr__(self, "sampled", arr.astype(bool))

    @classmethod
    def full(cls, height: int, width: int) -> "Mask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_positions(cls, height: int, width: int, positions) -> "Mask":
        pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
        arr = np.zeros((height, width), dtype=bool)
        arr[pos[:, 0], pos[:, 1]] = True
        return cls(arr)

    @property
    def height(self) -> int:
        return self.sampled.shape[0]

    @property
    def width(self) -> int:
        return self.sampled.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.sampled.shape

    @property
    def count(self) -> int:
        return int(self.sampled.sum())

    def positions(self) -> np.ndarray:
        """Sampled (row, col) pairs in row-major order."""
        return np.argwhere(self.sampled)


@dataclass(frozen=True)
class PatchGrid:
    """Regular lattice of B x B windows inside an H x W image."""

    height: int
    width: int
    patch_size: int
    stride: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        if self.patch_size > min(self.height, self.width):
            raise ValueError(
                f"patch size {self.patch_size} exceeds image side {min(self.height, self.width)}"
            )

    @property
    def rows(self) -> int:
        return (self.height - self.patch_size) // self.stride + 1

    @property
    def cols(self) -> int:
        return (self.width - self.patch_size) // self.stride + 1

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @property
    def origins(self) -> np.ndarray:
        """Top-left corners, shape (N_p, 2), row-major."""
        r = np.arange(self.rows) * self.stride
        c = np.arange(self.cols) * self.stride
        rr, cc = np.meshgrid(r, c, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)


class Patch(NamedTuple):
    values: np.ndarray
    observed: np.ndarray
    origin: tuple[int, int]


@dataclass(frozen=True)
class PatchSet:
    """All patches of an image stored as two (N_p, B*B) arrays.

    ``values`` is zero wherever ``observed`` is False.
    """

    grid: PatchGrid
    values: np.ndarray
    observed: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> Patch:
        r, c = self.grid.origins[i]
        return Patch(self.values[i], self.observed[i], (int(r), int(c)))


def _as_array(img) -> np.ndarray:
    if isinstance(img, Image):
        return img.data
    return np.asarray(img, dtype=np.float64)


def extract_patches(image, mask: Mask | None, patch_size: int, stride: int = 1) -> PatchSet:
    """Cut an image into every B x B window that lies fully inside it.

    Parameters
    ----------
    image : Image or ndarray
    mask : Mask or None
        Sampling mask. None means fully observed.
    patch_size : int
        Window side B.
    stride : int
        Step between neighbouring windows.

    Returns
    -------
    PatchSet
        Patch values and observation flags, flattened row-major within each
        window. Unobserved entries hold exact zeros.
    """
    data = _as_array(image)
    if mask is None:
        mask = Mask.full(*data.shape)
    if mask.shape != data.shape:
        raise ValueError(f"image shape {data.shape} and mask shape {mask.shape} differ")
    grid = PatchGrid(data.shape[0], data.shape[1], patch_size, stride)
    B = patch_size
    obs = mask.sampled
    zeroed = np.where(obs, data, 0.0)
    win = sliding_window_view(zeroed, (B, B))[::stride, ::stride]
    mwin = sliding_window_view(obs, (B, B))[::stride, ::stride]
    values = np.ascontiguousarray(win.reshape(grid.count, B * B))
    observed = np.ascontiguousarray(mwin.reshape(grid.count, B * B))
    return PatchSet(grid, values, observed)


def reassemble(values, grid: PatchGrid, weights=None) -> Image:
    """Average overlapping patch values back into an image.

    Each output pixel is the plain mean over every patch covering it.

    Parameters
    ----------
    values : ndarray, shape (N_p, B*B)
    grid : PatchGrid
    weights : ndarray, shape (N_p,), optional
        Non-negative per-patch weights for a weighted mean. Pixels whose
        covering patches all have zero weight fall back to the plain mean.

    Raises
    ------
    ValueError
        If some pixel is covered by no patch, which can happen with stride > 1.
    """
    vals = np.asarray(values, dtype=np.float64)
    B, s = grid.patch_size, grid.stride
    if vals.shape != (grid.count, B * B):
        raise ValueError(f"expected patch array of shape {(grid.count, B * B)}, got {vals.shape}")
    nh, nw = grid.rows, grid.cols
    tiles = vals.reshape(nh, nw, B, B)
    acc = np.zeros((grid.height, grid.width))
    cnt = np.zeros((grid.height, grid.width))
    for a in range(B):
        for b in range(B):
            rs = slice(a, a + s * (nh - 1) + 1, s)
            cs = slice(b, b + s * (nw - 1) + 1, s)
            acc[rs, cs] += tiles[:, :, a, b]
            cnt[rs, cs] += 1
    if np.any(cnt == 0):
        r, c = np.argwhere(cnt == 0)[0]
        raise ValueError(f"pixel ({r}, {c}) is not covered by any patch")
    if weights is None:
        return Image(acc / cnt)
    wts = np.asarray(weights, dtype=np.float64).reshape(nh, nw)
    if np.any(wts < 0):
        raise ValueError("patch weights must be non-negative")
    wacc = np.zeros_like(acc)
    wsum = np.zeros_like(acc)
    for a in range(B):
        for b in range(B):
            rs = slice(a, a + s * (nh - 1) + 1, s)
            cs = slice(b, b + s * (nw - 1) + 1, s)
            wacc[rs, cs] += wts * tiles[:, :, a, b]
            wsum[rs, cs] += wts
    plain = acc / cnt
    out = np.where(wsum > 0, wacc / np.where(wsum > 0, wsum, 1.0), plain)
    return Image(out)


def psnr(reference, test, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB.

    Returns ``math.inf`` when the images are identical.
    """
    ref, tst = _as_array(reference), _as_array(test)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {tst.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def drift_matched_psnr(reference_crop, candidate, crop_size: int | None = None,
                       peak: float = 1.0) -> tuple[float, tuple[int, int]]:
    """Best PSNR between a reference crop and any equally sized window of ``candidate``.

    Every integer offset is evaluated. Ties go to the smallest row offset,
    then the smallest column offset.

    Parameters
    ----------
    reference_crop : Image or ndarray, shape (S, S)
    candidate : Image or ndarray
    crop_size : int, optional
        Window side S. Defaults to the reference size.
    peak : float

    Returns
    -------
    psnr : float
    offset : (int, int)
        Top-left corner of the best window in ``candidate``.
    """
    ref, cand = _as_array(reference_crop), _as_array(candidate)
    S = ref.shape[0] if crop_size is None else int(crop_size)
    if ref.shape != (S, S):
        raise ValueError(f"reference crop must be {S}x{S}, got {ref.shape}")
    if S > min(cand.shape):
        raise ValueError("crop larger than candidate")
    nr, nc = cand.shape[0] - S + 1, cand.shape[1] - S + 1
    mse = np.empty((nr, nc))
    for r in range(nr):
        win = sliding_window_view(cand[r:r + S], (S, S))[0]
        mse[r] = ((win - ref) ** 2).mean(axis=(1, 2))
    best = int(np.argmin(mse))
    r, c = divmod(best, nc)
    m = float(mse[r, c])
    value = math.inf if m == 0.0 else 10.0 * math.log10(peak * peak / m)
    return value, (r, c)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_raw(image, path) -> None:
    """Write the float32 raw format: 'CSIM', u32 H, u32 W, u32 reserved, data."""
    data = _as_array(image)
    h, w = data.shape
    header = RAW_MAGIC + struct.pack("<III", h, w, 0)
    atomic_write_bytes(path, header + data.astype("<f4").tobytes())


def read_raw(path) -> Image:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: not a CSIM raw image")
    h, w, _ = struct.unpack("<III", buf[4:16])
    body = buf[16:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h * w} samples, found {len(body) // 4}")
    return Image(np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64))


def _pnm_header(buf: bytes, nfields: int):
    """Parse the whitespace-separated header of a binary PNM file."""
    fields, pos = [], 0
    while len(fields) < nfields:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        fields.append(buf[start:pos])
    return fields, pos + 1  # one whitespace byte ends the header


def write_pgm(image, path, bits: int = 8) -> None:
    """Write a binary P5 PGM. Values are clipped to [0, 1] and quantized."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    data = _as_array(image)
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(data, 0.0, 1.0) * maxval)
    body = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w = data.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n{maxval}\n".encode() + body)


def read_pgm(path) -> Image:
    """Read an 8- or 16-bit P5 PGM, normalized by its maxval."""
    buf = Path(path).read_bytes()
    fields, pos = _pnm_header(buf, 4)
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = h * w * np.dtype(dtype).itemsize
    if len(buf) - pos < n:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(buf[pos:pos + n], dtype=dtype).reshape(h, w)
    return Image(arr.astype(np.float64) / maxval, peak=float(maxval))


def write_pbm(mask: Mask, path) -> None:
    """Write a binary P4 PBM; 1 (black) marks a sampled pixel."""
    h, w = mask.shape
    body = np.packbits(mask.sampled, axis=1).tobytes()
    atomic_write_bytes(path, f"P4\n{w} {h}\n".encode() + body)


def read_pbm(path) -> Mask:
    buf = Path(path).read_bytes()
    fields, pos = _pnm_header(buf, 3)
    if fields[0] != b"P4":
        raise ValueError(f"{path}: not a binary PBM")
    w, h = int(fields[1]), int(fields[2])
    rowbytes = (w + 7) // 8
    if len(buf) - pos < rowbytes * h:
        raise ValueError(f"{path}: truncated bitmap")
    packed = np.frombuffer(buf[pos:pos + rowbytes * h], dtype=np.uint8).reshape(h, rowbytes)
    return Mask(np.unpackbits(packed, axis=1)[:, :w].astype(bool))


def write_index_list(mask: Mask, path) -> None:
    """Write sampled positions as 'row,col' lines in row-major order."""
    lines = [f"{r},{c}" for r, c in mask.positions()]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def parse_positions(lines, where="positions") -> np.ndarray:
    rows = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            r, c = line.split(",")
            rows.append((int(r), int(c)))
        except ValueError:
            raise ValueError(f"{where}:{n}: expected 'row,col', got {line!r}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def read_index_list(path, height: int, width: int) -> Mask:
    pos = parse_positions(Path(path).read_text().splitlines(), str(path))
    if len(pos) and (pos.min() < 0 or pos[:, 0].max() >= height or pos[:, 1].max() >= width):
        raise ValueError(f"{path}: position outside {height}x{width}")
    return Mask.from_positions(height, width, pos)


def load_image(path) -> Image:
    """Load a PGM or raw image, chosen by file extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".raw":
        return read_raw(path)
    raise ValueError(f"{path}: unsupported image extension {suffix!r} (use .pgm or .raw)")


def save_image(image, path, bits: int = 16) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        write_pgm(image, path, bits=bits)
    elif suffix == ".raw":
        write_raw(image, path)
    else:
        raise ValueError(f"{path}: unsupported image extension {suffix!r} (use .pgm or .raw)")


def load_mask(path, shape: tuple[int, int] | None = None) -> Mask:
    """Load a PBM mask or a 'row,col' index list (which needs ``shape``)."""
    if Path(path).suffix.lower() == ".pbm":
        return read_pbm(path)
    if shape is None:
        raise ValueError(f"{path}: index-list masks need the image shape")
    return read_index_list(path, *shape)
