"""Dense image tensors, rectangular block partitions, and selection masks.

Layout convention (fixed): an image is a float64 array of shape
``(channels, height, width)``, planar, row-major within each channel.
The flattened full-image vector is ``data.ravel()`` in C order, i.e.
channel-major, then rows, then columns. Block vectors use the same
ordering restricted to the block rectangle: all channels of the block,
each as the row-major raster of the rectangle.

All channels of a pixel belong to the same block; blocks partition the
pixel grid into contiguous rectangles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImageTensor",
    "BlockRect",
    "BlockPartition",
    "PaddedBlock",
    "PartitionError",
    "make_partition",
    "parse_scheme",
    "extract_block",
    "scatter_block",
    "extract_padded",
    "dot",
    "norm_sq",
]


class PartitionError(ValueError):
    """Invalid partition geometry (empty block, bad scheme, oversized pad)."""


def _as_planar(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.newaxis, :, :]
    if arr.ndim != 3:
        raise ValueError(f"image data must be 2-D or 3-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """Real-valued image on a pixel grid, shape ``(channels, height, width)``.

    Instances are immutable: the backing array is marked read-only at
    construction and every public operation returns a new tensor. All
    values must be finite.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(_as_planar(self.data))
        if arr.shape[0] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {arr.shape[0]}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"empty image grid {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def n(self) -> int:
        """Total number of scalar unknowns (height * width * channels)."""
        return self.data.size

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 1) -> "ImageTensor":
        return cls(np.zeros((channels, height, width)))

    @classmethod
    def full(cls, height, width, value, channels=1) -> "ImageTensor":
        return cls(np.full((channels, height, width), float(value)))

    def ravel(self) -> np.ndarray:
        """Flattened copy in the canonical (channel, row, col) order."""
        return self.data.ravel().copy()

    def same_grid(self, other: "ImageTensor") -> bool:
        return self.shape == other.shape

    # Small arithmetic surface used by the solver; results are new tensors.
    def __add__(self, other):
        return ImageTensor(self.data + other.data)

    def __sub__(self, other):
        return ImageTensor(self.data - other.data)

    def __mul__(self, scalar):
        return ImageTensor(self.data * float(scalar))

    __rmul__ = __mul__


def dot(a: ImageTensor, b: ImageTensor) -> float:
    return float(np.vdot(a.data, b.data))


def norm_sq(a: ImageTensor) -> float:
    return float(np.vdot(a.data, a.data))


@dataclass(frozen=True)
class BlockRect:
    """Half-open pixel rectangle ``[r0, r1) x [c0, c1)``."""

    r0: int
    r1: int
    c0: int
    c1: int

    @property
    def height(self) -> int:
        return self.r1 - self.r0

    @property
    def width(self) -> int:
        return self.c1 - self.c0

    @property
    def pixels(self) -> int:
        return self.height * self.width


def parse_scheme(scheme: str) -> tuple:
    """Map a scheme name to its (rows, cols) block grid.

    Supported: ``full`` (1x1), ``horizontal-halves`` (2x1), ``quadrants``
    (2x2), and ``grid:RxC``.
    """
    s = scheme.strip().lower()
    if s == "full":
        return (1, 1)
    if s == "horizontal-halves":
        return (2, 1)
    if s == "quadrants":
        return (2, 2)
    if s.startswith("grid:"):
        try:
            r, c = s[len("grid:"):].split("x")
            rows, cols = int(r), int(c)
        except ValueError as exc:
            raise PartitionError(f"malformed grid scheme {scheme!r}") from exc
        if rows < 1 or cols < 1:
            raise PartitionError(f"grid scheme must be positive, got {scheme!r}")
        return (rows, cols)
    raise PartitionError(f"unknown partition scheme {scheme!r}")


def _cuts(total: int, parts: int) -> list:
    # Remainder pixels are absorbed into the last block row/column.
    base = total // parts
    if base == 0:
        raise PartitionError(f"cannot split {total} pixels into {parts} blocks")
    bounds = [i * base for i in range(parts)] + [total]
    return bounds


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint rectangular cover of the pixel grid.

    ``rects[i]`` is the pixel rectangle of block ``i``; all channels of a
    pixel belong to the pixel's block. Blocks are ordered row-major over
    the block grid.
    """

    height: int
    width: int
    channels: int
    scheme: str
    grid: tuple
    rects: tuple

    @property
    def N(self) -> int:
        return len(self.rects)

    @property
    def total_dim(self) -> int:
        return self.height * self.width * self.channels

    def block_size(self, i: int) -> int:
        return self.rects[i].pixels * self.channels

    def flat_indices(self, i: int) -> np.ndarray:
        """Indices of block ``i`` into the raveled image, in block raster order.

        This materializes the index set behind the selection map of the
        block and is what a dense 0/1 selection matrix would encode.
        """
        r = self.rects[i]
        c_idx = np.arange(self.channels)[:, None, None]
        row_idx = np.arange(r.r0, r.r1)[None, :, None]
        col_idx = np.arange(r.c0, r.c1)[None, None, :]
        flat = (c_idx * self.height + row_idx) * self.width + col_idx
        return np.broadcast_to(flat, (self.channels, r.height, r.width)).ravel()


def make_partition(height: int, width: int, scheme: str, channels: int = 1) -> BlockPartition:
    """Build a block partition of a ``height x width`` grid.

    Scheme dimensions must not exceed the image dimensions; when they do
    not divide evenly, remainder rows/columns go to the last block.
    """
    if height < 1 or width < 1:
        raise PartitionError(f"zero-sized image {height}x{width}")
    rows, cols = parse_scheme(scheme)
    if rows > height or cols > width:
        raise PartitionError(
            f"scheme {scheme!r} produces an empty block on a {height}x{width} grid"
        )
    rb = _cuts(height, rows)
    cb = _cuts(width, cols)
    rects = tuple(
        BlockRect(rb[i], rb[i + 1], cb[j], cb[j + 1])
        for i in range(rows)
        for j in range(cols)
    )
    return BlockPartition(height, width, channels, scheme, (rows, cols), rects)


def _check_block_index(p: BlockPartition, i: int):
    if not 0 <= i < p.N:
        raise IndexError(f"block index {i} out of range for N={p.N}")


def _check_grid(p: BlockPartition, x: ImageTensor):
    if (x.channels, x.height, x.width) != (p.channels, p.height, p.width):
        raise ValueError(
            f"image grid {x.shape} does not match partition grid "
            f"({p.channels}, {p.height}, {p.width})"
        )


def extract_block(x: ImageTensor, p: BlockPartition, i: int) -> np.ndarray:
    """Return the block-i values of ``x`` as a vector in block raster order."""
    _check_block_index(p, i)
    _check_grid(p, x)
    r = p.rects[i]
    return x.data[:, r.r0:r.r1, r.c0:r.c1].ravel().copy()


def scatter_block(x: ImageTensor, p: BlockPartition, i: int, z: np.ndarray) -> ImageTensor:
    """Return a copy of ``x`` with block ``i`` replaced by the vector ``z``."""
    _check_block_index(p, i)
    _check_grid(p, x)
    r = p.rects[i]
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != p.block_size(i):
        raise ValueError(f"block vector length {z.size}, expected {p.block_size(i)}")
    out = x.data.copy()
    out[:, r.r0:r.r1, r.c0:r.c1] = z.reshape(p.channels, r.height, r.width)
    return ImageTensor(out)


@dataclass(frozen=True)
class PaddedBlock:
    """Geometry of a circularly padded read patch around one block.

    ``top``/``left`` are image coordinates of the patch origin before
    wrap-around; ``interior`` is the (row, col) offset of the block
    rectangle inside the patch.
    """

    block_index: int
    pad: int
    top: int
    left: int
    height: int
    width: int
    interior: tuple


def extract_padded(x: ImageTensor, p: BlockPartition, i: int, pad: int):
    """Extract block ``i`` plus a circular pad ring of width ``pad``.

    Border pixels wrap around the image (circular boundary, matching the
    circular convolution convention of the forward models). The padded
    patch must not exceed the image period in either dimension.

    Returns ``(PaddedBlock, patch)`` with ``patch`` of shape
    ``(channels, bh + 2 pad, bw + 2 pad)``.
    """
    _check_block_index(p, i)
    _check_grid(p, x)
    if pad < 0:
        raise ValueError("pad must be nonnegative")
    r = p.rects[i]
    ph, pw = r.height + 2 * pad, r.width + 2 * pad
    if ph > p.height or pw > p.width:
        raise PartitionError(
            f"padded patch {ph}x{pw} exceeds the image period {p.height}x{p.width}"
        )
    top, left = r.r0 - pad, r.c0 - pad
    rows = (top + np.arange(ph)) % p.height
    cols = (left + np.arange(pw)) % p.width
    patch = x.data[:, rows[:, None], cols[None, :]].copy()
    geom = PaddedBlock(i, pad, top, left, ph, pw, (pad, pad))
    return geom, patch


def block_context(p: BlockPartition, i: int, read: int):
    """Per-axis read window of half-width ``read`` around block ``i``.

    Unlike :func:`extract_padded`, each axis clamps to the full image axis
    when the window would meet or exceed the image period, so arbitrarily
    large read radii stay well defined. Used by the restricted-denoiser
    gradient machinery. Returns ``(rows, cols, (ir, ic), (bh, bw))`` where
    ``rows``/``cols`` are wrapped index arrays and ``(ir, ic)`` locates the
    block rectangle inside the window.
    """
    _check_block_index(p, i)
    r = p.rects[i]

    def axis(start, size, total):
        if size + 2 * read >= total:
            return np.arange(total), start
        idx = (start - read + np.arange(size + 2 * read)) % total
        return idx, read

    rows, ir = axis(r.r0, r.height, p.height)
    cols, ic = axis(r.c0, r.width, p.width)
    return rows, cols, (ir, ic), (r.height, r.width)
