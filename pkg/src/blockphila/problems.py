"""Experiment fixtures: restoration objectives, synthetic degradations,
and initial points for deblurring and super-resolution.

The composite objective is ``F(x) = 1/2 ||A x - b||^2 + (lam/2) ||x - N(x)||^2``
with A the task's forward operator and N a gradient-step denoiser base
network. Ground-truth images are generated procedurally so the test
corpus carries no external assets; the CLI also accepts image files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoisers import Regularizer
from .operators import ForwardModel, gaussian_kernel, load_kernel
from .tensor import ImageTensor, norm_sq

__all__ = [
    "ProblemSpec",
    "Objective",
    "default_params",
    "build_model",
    "degrade",
    "initial_point",
    "bicubic_upsample",
    "make_test_image",
    "assemble",
]

TASKS = ("deblur", "super-resolution")


def default_params(task: str, noise_level: float):
    """Task defaults: (denoiser noise level, regularization weight)."""
    if task == "deblur":
        return (1.8 * noise_level, 0.075)
    if task == "super-resolution":
        return (2.0 * noise_level, 0.065)
    raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class ProblemSpec:
    """Recipe for one synthetic restoration instance."""

    task: str
    height: int
    width: int
    channels: int = 1
    image: str = "blobs"          # procedural kind or image file path
    kernel_size: int = 25
    kernel_std: float = 1.6
    kernel_file: str = ""         # overrides the Gaussian when set
    scale: int = 2
    noise_level: float = 0.03
    lam: float = None
    denoiser_sigma: float = None
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.noise_level < 0:
            raise ValueError("noise level must be nonnegative")
        sigma, lam = default_params(self.task, self.noise_level)
        if self.lam is None:
            object.__setattr__(self, "lam", lam)
        if self.denoiser_sigma is None:
            object.__setattr__(self, "denoiser_sigma", sigma)
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.task == "super-resolution":
            if self.height % self.scale or self.width % self.scale:
                raise ValueError(
                    f"{self.height}x{self.width} not divisible by scale {self.scale}"
                )


@dataclass(frozen=True)
class Objective:
    """Least-squares fidelity plus a weighted GS-denoiser potential."""

    model: ForwardModel
    b: ImageTensor
    reg: Regularizer

    def fidelity(self, x: ImageTensor) -> float:
        return 0.5 * norm_sq(self.model.apply(x) - self.b)

    def fidelity_grad(self, x: ImageTensor) -> ImageTensor:
        return self.model.apply_adjoint(self.model.apply(x) - self.b)

    def total(self, x: ImageTensor) -> float:
        return self.fidelity(x) + self.reg.value(x)

    def full_grad(self, x: ImageTensor) -> ImageTensor:
        return self.fidelity_grad(x) + self.reg.grad(x)


def build_model(spec: ProblemSpec) -> ForwardModel:
    if spec.kernel_file:
        kernel = load_kernel(spec.kernel_file)
    else:
        kernel = gaussian_kernel(spec.kernel_size, spec.kernel_std)
    if spec.task == "deblur":
        return ForwardModel.blur(kernel, spec.height, spec.width, spec.channels)
    return ForwardModel.blur_downsample(kernel, spec.scale, spec.height, spec.width,
                                        spec.channels)


def degrade(spec: ProblemSpec, x_true: ImageTensor, seed: int = None) -> ImageTensor:
    """Synthesize data ``b = A x + nu xi`` with seeded Gaussian noise."""
    model = build_model(spec)
    clean = model.apply(x_true)
    if spec.noise_level == 0:
        return clean
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    xi = rng.standard_normal(clean.shape)
    return ImageTensor(clean.data + spec.noise_level * xi)


def _catmull_rom(d: float) -> float:
    # Cubic convolution kernel with a = -0.5.
    d = abs(d)
    if d <= 1.0:
        return 1.5 * d**3 - 2.5 * d**2 + 1.0
    if d < 2.0:
        return -0.5 * d**3 + 2.5 * d**2 - 4.0 * d + 2.0
    return 0.0


def _upsample_matrix(coarse: int, s: int) -> np.ndarray:
    # Fine pixel X samples the coarse grid at X/s: this is center-aligned
    # bicubic plus the (s/2 - 1/2)-pixel shift correction, so fine pixel
    # s*j lands exactly on coarse pixel j. Circular wrap at the borders.
    fine = coarse * s
    W = np.zeros((fine, coarse))
    for X in range(fine):
        u = X / s
        j0 = int(np.floor(u))
        t = u - j0
        for off in (-1, 0, 1, 2):
            W[X, (j0 + off) % coarse] += _catmull_rom(t - off)
    return W


def bicubic_upsample(img: ImageTensor, s: int) -> ImageTensor:
    """Catmull-Rom bicubic upsampling by ``s`` with circular boundary.

    Aligned to the downsampling phase that keeps pixel (0, 0) of each
    ``s x s`` cell, i.e. it interpolates the coarse grid at coordinates
    ``X/s`` (shift correction of s/2 - 1/2 fine pixels against the
    center-aligned convention).
    """
    if s < 1:
        raise ValueError("scale must be >= 1")
    if s == 1:
        return img
    Wr = _upsample_matrix(img.height, s)
    Wc = _upsample_matrix(img.width, s)
    out = np.einsum("ij,cjk,lk->cil", Wr, img.data, Wc)
    return ImageTensor(out)


def initial_point(spec: ProblemSpec, b: ImageTensor) -> ImageTensor:
    """Solver start: the data itself for deblurring, bicubic upsampling
    of the low-resolution data for super-resolution."""
    if spec.task == "deblur":
        return b
    return bicubic_upsample(b, spec.scale)


def make_test_image(kind: str, height: int, width: int, channels: int = 1,
                    seed: int = 0) -> ImageTensor:
    """Procedural ground-truth images in [0, 1].

    Kinds: ``checkerboard``, ``blobs`` (sum of Gaussian bumps), and
    ``texture`` (smoothed seeded noise).
    """
    rng = np.random.default_rng(seed)
    out = np.zeros((channels, height, width))
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    for c in range(channels):
        if kind == "checkerboard":
            tile = max(2, min(height, width) // 8)
            board = ((yy // tile + xx // tile + c) % 2).astype(np.float64)
            out[c] = 0.25 + 0.5 * board
        elif kind == "blobs":
            acc = np.zeros((height, width))
            for _ in range(5):
                cy, cx = rng.uniform(0, height), rng.uniform(0, width)
                w = rng.uniform(min(height, width) / 8, min(height, width) / 3)
                amp = rng.uniform(0.4, 1.0)
                acc += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
            lo, hi = acc.min(), acc.max()
            out[c] = 0.05 + 0.9 * (acc - lo) / (hi - lo if hi > lo else 1.0)
        elif kind == "texture":
            noise = rng.uniform(0.0, 1.0, (height, width))
            acc = np.zeros((height, width))
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    acc += np.roll(noise, (dy, dx), axis=(0, 1))
            acc /= 9.0
            lo, hi = acc.min(), acc.max()
            out[c] = 0.05 + 0.9 * (acc - lo) / (hi - lo if hi > lo else 1.0)
        else:
            raise ValueError(f"unknown test image kind {kind!r}")
    return ImageTensor(out)


def assemble(spec: ProblemSpec, denoiser, x_true: ImageTensor = None):
    """Build the full fixture: (objective, x_true, b, x0)."""
    if x_true is None:
        x_true = make_test_image(spec.image, spec.height, spec.width, spec.channels,
                                 seed=spec.seed)
    b = degrade(spec, x_true)
    obj = Objective(build_model(spec), b, Regularizer(denoiser, spec.lam))
    x0 = initial_point(spec, b)
    return obj, x_true, b, x0
