"""Measurement operators: circular blur, s-fold downsampling, and their
composition, with adjoints and Fourier-domain diagonalization.

Convolutions use circular boundary conditions throughout, so a blur is
diagonalized by the 2-D DFT: ``H = F* diag(L) F`` with ``L`` the transfer
function of the kernel. For blur-then-downsample the frequency grid is
additionally split into the ``s x s`` paving whose blocks diagonalize the
normal equations on the coarse grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .tensor import ImageTensor

__all__ = [
    "BlurKernel",
    "Spectrum",
    "ForwardModel",
    "gaussian_kernel",
    "load_kernel",
    "diagonalize",
]

KINDS = ("identity", "blur", "downsample", "blur-downsample")


@dataclass(frozen=True)
class BlurKernel:
    """2-D convolution taps with an anchor marking the center tap."""

    taps: np.ndarray
    anchor: tuple

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2:
            raise ValueError("kernel taps must be a 2-D array")
        if not np.all(np.isfinite(taps)):
            raise ValueError("kernel contains non-finite taps")
        taps = taps.copy()
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)
        ar, ac = self.anchor
        if not (0 <= ar < taps.shape[0] and 0 <= ac < taps.shape[1]):
            raise ValueError(f"anchor {self.anchor} outside kernel {taps.shape}")

    @property
    def shape(self):
        return self.taps.shape


def gaussian_kernel(size: int, std: float) -> BlurKernel:
    """Sampled, normalized Gaussian kernel of odd ``size`` and width ``std``."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if std <= 0:
        raise ValueError(f"kernel std must be positive, got {std}")
    if size == 1:
        return BlurKernel(np.ones((1, 1)), (0, 0))
    c = size // 2
    g = np.arange(size) - c
    taps = np.exp(-(g[:, None] ** 2 + g[None, :] ** 2) / (2.0 * std * std))
    taps /= taps.sum()
    return BlurKernel(taps, (c, c))


def load_kernel(path) -> BlurKernel:
    """Read a whitespace-separated 2-D tap array; anchor at the center."""
    taps = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    return BlurKernel(taps, (taps.shape[0] // 2, taps.shape[1] // 2))


def delta_kernel() -> BlurKernel:
    return BlurKernel(np.ones((1, 1)), (0, 0))


@dataclass(frozen=True)
class Spectrum:
    """Transfer function of a circular convolution on a fixed grid.

    ``values[k1, k2]`` is the eigenvalue at frequency ``(k1, k2)`` of the
    unnormalized 2-D DFT; the same spectrum applies to every channel.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.complex128).copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return self.values.shape

    def paving(self, s: int) -> list:
        """The ``s x s`` paving: s^2 coarse-grid tiles of the frequency grid.

        Tile ``(a1, a2)`` holds the eigenvalues at the alias frequencies
        ``(k1 + a1 m_h, k2 + a2 m_w)`` of coarse frequency ``(k1, k2)``,
        which are the contiguous ``m_h x m_w`` slabs of the fine grid.
        """
        H, W = self.values.shape
        if H % s or W % s:
            raise ValueError(f"grid {H}x{W} not divisible by paving factor {s}")
        mh, mw = H // s, W // s
        return [
            self.values[a1 * mh:(a1 + 1) * mh, a2 * mw:(a2 + 1) * mw]
            for a1 in range(s)
            for a2 in range(s)
        ]


@dataclass(frozen=True)
class ForwardModel:
    """Linear acquisition operator A on a fixed image grid.

    ``kind`` is one of ``identity``, ``blur`` (H), ``downsample`` (S), or
    ``blur-downsample`` (SH). Kernels act per channel. Downsampling keeps
    pixel (0, 0) of each ``s x s`` cell; its adjoint zero-fills.
    """

    kind: str
    height: int
    width: int
    channels: int = 1
    kernel: BlurKernel = None
    scale: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind in ("blur", "blur-downsample") and self.kernel is None:
            raise ValueError(f"{self.kind} model requires a kernel")
        if self.kind in ("downsample", "blur-downsample"):
            if self.scale < 1:
                raise ValueError("scale must be >= 1")
            if self.height % self.scale or self.width % self.scale:
                raise ValueError(
                    f"grid {self.height}x{self.width} not divisible by scale {self.scale}"
                )
        if self.kernel is not None:
            kh, kw = self.kernel.shape
            if kh > self.height or kw > self.width:
                raise ValueError(
                    f"kernel {kh}x{kw} larger than grid {self.height}x{self.width}"
                )

    # ------------------------------------------------------------------
    @classmethod
    def identity(cls, height, width, channels=1):
        return cls("identity", height, width, channels)

    @classmethod
    def blur(cls, kernel, height, width, channels=1):
        return cls("blur", height, width, channels, kernel=kernel)

    @classmethod
    def downsample(cls, scale, height, width, channels=1):
        return cls("downsample", height, width, channels, scale=scale)

    @classmethod
    def blur_downsample(cls, kernel, scale, height, width, channels=1):
        return cls("blur-downsample", height, width, channels, kernel=kernel, scale=scale)

    # ------------------------------------------------------------------
    @property
    def in_shape(self):
        return (self.channels, self.height, self.width)

    @property
    def out_shape(self):
        if self.kind in ("downsample", "blur-downsample"):
            return (self.channels, self.height // self.scale, self.width // self.scale)
        return self.in_shape

    @cached_property
    def otf(self) -> np.ndarray:
        """Kernel spectrum on the model grid (1 for identity)."""
        if self.kernel is None:
            return np.ones((self.height, self.width), dtype=np.complex128)
        psf = np.zeros((self.height, self.width))
        kh, kw = self.kernel.shape
        ar, ac = self.kernel.anchor
        rows = (np.arange(kh) - ar) % self.height
        cols = (np.arange(kw) - ac) % self.width
        psf[rows[:, None], cols[None, :]] = self.kernel.taps
        return np.fft.fft2(psf)

    def _blur(self, arr: np.ndarray, conj: bool) -> np.ndarray:
        if self.kernel is None:
            return arr.copy()
        if self.kernel.shape == (1, 1):
            return arr * self.kernel.taps[0, 0]
        otf = np.conj(self.otf) if conj else self.otf
        return np.real(np.fft.ifft2(np.fft.fft2(arr, axes=(-2, -1)) * otf, axes=(-2, -1)))

    def apply(self, x: ImageTensor) -> ImageTensor:
        """A x."""
        if x.shape != self.in_shape:
            raise ValueError(f"input grid {x.shape} does not match model {self.in_shape}")
        arr = x.data
        if self.kind == "identity":
            return x
        if self.kind in ("blur", "blur-downsample"):
            arr = self._blur(arr, conj=False)
        if self.kind in ("downsample", "blur-downsample"):
            arr = arr[:, ::self.scale, ::self.scale]
        return ImageTensor(arr)

    def apply_adjoint(self, y: ImageTensor) -> ImageTensor:
        """A^T y."""
        if y.shape != self.out_shape:
            raise ValueError(f"input grid {y.shape} does not match model output {self.out_shape}")
        arr = y.data
        if self.kind == "identity":
            return y
        if self.kind in ("downsample", "blur-downsample"):
            up = np.zeros(self.in_shape)
            up[:, ::self.scale, ::self.scale] = arr
            arr = up
        if self.kind in ("blur", "blur-downsample"):
            arr = self._blur(arr, conj=True)
        return ImageTensor(arr)


def diagonalize(model: ForwardModel):
    """Fourier diagonalization of the convolution component of ``model``.

    Returns the Spectrum for blur/identity models, and for blur-downsample
    additionally the list of ``s^2`` paving tiles:
    ``(spectrum, tiles)``. Rejects pure downsampling, which has no
    convolution component.
    """
    if model.kind == "downsample":
        raise ValueError("pure downsample model has no convolution to diagonalize")
    spec = Spectrum(model.otf)
    if model.kind == "blur-downsample":
        return spec, spec.paving(model.scale)
    return spec
