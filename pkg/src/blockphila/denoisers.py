"""Gradient-step denoisers and the patch-restricted gradient machinery.

A gradient-step denoiser is built from a smooth base network ``N`` through
the potential ``g(x) = 1/2 ||x - N(x)||^2``, whose gradient

    grad g(x) = (x - N(x)) - J_N(x)^T (x - N(x))

needs one forward pass and one vector-Jacobian product. VJPs here are
hand-derived per layer (transposed convolution plus pointwise activation
derivative); no autodiff framework is involved, so the working-set size
is explicit and the block-restricted path below can bound it by the
patch size instead of the image size.

Convolutions are circular and evaluated by exact tap-by-tap rolls, which
keeps the full-image and patch computations bit-for-bit comparable.

Block-restricted gradients: for a network of receptive radius r, the
block slice of ``grad g`` depends on residual values within r of the
block, which in turn depend on pixels within 2r of it. ``grad_block``
therefore reads a patch extending ``pad + r`` past the block (clamped per
axis to the whole axis when the window would reach the image period),
runs the same network on the patch, and returns the interior block slice.
With the checked precondition ``pad >= r`` the result equals the
corresponding slice of the full-image gradient to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import BlockPartition, ImageTensor, block_context

__all__ = [
    "GsDenoiser",
    "LinearConvDenoiser",
    "TinyConvNet",
    "Regularizer",
    "elu",
    "elu_prime",
]


def elu(z: np.ndarray) -> np.ndarray:
    """Exponential linear unit, alpha = 1 (continuously differentiable)."""
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_prime(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def _roll_conv_taps(taps: np.ndarray, anchor, arr: np.ndarray) -> np.ndarray:
    # Circular correlation of each channel with one 2-D kernel:
    # out[c, p] = sum_d taps[anchor + d] * arr[c, p + d].
    out = np.zeros_like(arr)
    ar, ac = anchor
    kh, kw = taps.shape
    for dy in range(kh):
        for dx in range(kw):
            w = taps[dy, dx]
            if w == 0.0:
                continue
            out += w * np.roll(arr, shift=(ar - dy, ac - dx), axis=(-2, -1))
    return out


def _conv_layer(weights: np.ndarray, arr: np.ndarray) -> np.ndarray:
    # Multichannel circular correlation: weights (O, I, kh, kw), arr (I, h, w),
    # centered anchor, out[o, p] = sum_{i,d} weights[o, i, c+d] * arr[i, p+d].
    O, I, kh, kw = weights.shape
    cy, cx = kh // 2, kw // 2
    out = np.zeros((O, arr.shape[1], arr.shape[2]))
    for dy in range(kh):
        for dx in range(kw):
            shifted = np.roll(arr, shift=(cy - dy, cx - dx), axis=(-2, -1))
            out += np.einsum("oi,ihw->ohw", weights[:, :, dy, dx], shifted)
    return out


def _conv_layer_adjoint(weights: np.ndarray, arr: np.ndarray) -> np.ndarray:
    # Transpose of _conv_layer: arr (O, h, w) -> (I, h, w).
    O, I, kh, kw = weights.shape
    cy, cx = kh // 2, kw // 2
    out = np.zeros((I, arr.shape[1], arr.shape[2]))
    for dy in range(kh):
        for dx in range(kw):
            shifted = np.roll(arr, shift=(dy - cy, dx - cx), axis=(-2, -1))
            out += np.einsum("oi,ohw->ihw", weights[:, :, dy, dx], shifted)
    return out


class GsDenoiser:
    """Interface for denoisers with exactly computable derivatives.

    Implementations provide the forward map, its vector-Jacobian product,
    and a sound receptive radius: perturbing the input outside the
    r-neighborhood of a pixel leaves the output at that pixel unchanged.
    """

    noise_level: float
    receptive_radius: int

    def denoise(self, x: ImageTensor) -> ImageTensor:
        return ImageTensor(self._forward(x.data))

    def vjp(self, x: ImageTensor, u: ImageTensor) -> ImageTensor:
        """J_N(x)^T u."""
        if x.shape != u.shape:
            raise ValueError(f"cotangent grid {u.shape} does not match input {x.shape}")
        return ImageTensor(self._vjp(x.data, u.data))

    # Array-level hooks; must accept any (C, h, w) grid so the same weights
    # run on padded patches.
    def _forward(self, arr: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _vjp(self, arr: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class LinearConvDenoiser(GsDenoiser):
    """Linear smoothing by one circular convolution kernel, per channel.

    Being linear, the VJP is input-independent: the adjoint (flipped)
    convolution of the cotangent.
    """

    def __init__(self, kernel_taps, anchor=None, noise_level: float = 0.0):
        taps = np.asarray(kernel_taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise ValueError("smoothing kernel must be 2-D with odd dimensions")
        self.taps = taps
        self.anchor = anchor if anchor is not None else (taps.shape[0] // 2, taps.shape[1] // 2)
        self.noise_level = float(noise_level)
        self.receptive_radius = max(taps.shape[0] // 2, taps.shape[1] // 2)

    def _forward(self, arr):
        return _roll_conv_taps(self.taps, self.anchor, arr)

    def _vjp(self, arr, u):
        flipped = self.taps[::-1, ::-1]
        ar = self.taps.shape[0] - 1 - self.anchor[0]
        ac = self.taps.shape[1] - 1 - self.anchor[1]
        return _roll_conv_taps(flipped, (ar, ac), u)


class TinyConvNet(GsDenoiser):
    """Small conv stack with eLU activations and seeded Gaussian weights.

    ``layers`` circular conv layers (no biases, so the zero image is a
    fixed point), eLU between layers, channels
    ``C -> hidden -> ... -> hidden -> C``. Weights are drawn once from a
    seeded generator, scaled by 1/sqrt(fan-in); no training happens here,
    the optimizer only needs a fixed differentiable network.
    """

    def __init__(self, channels: int = 1, hidden: int = 8, layers: int = 3,
                 kernel_size: int = 3, seed: int = 0, noise_level: float = 0.0):
        if layers < 1:
            raise ValueError("need at least one layer")
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if hidden < 1 or hidden > 8:
            raise ValueError("hidden channels must be in 1..8")
        self.channels = channels
        self.seed = seed
        self.noise_level = float(noise_level)
        widths = [channels] + [hidden] * (layers - 1) + [channels]
        rng = np.random.default_rng(seed)
        self.weights = []
        for l in range(layers):
            fan_in = widths[l] * kernel_size * kernel_size
            w = rng.standard_normal((widths[l + 1], widths[l], kernel_size, kernel_size))
            self.weights.append(w / np.sqrt(fan_in))
        self.receptive_radius = layers * (kernel_size // 2)

    def _forward(self, arr):
        a = arr
        last = len(self.weights) - 1
        for l, w in enumerate(self.weights):
            a = _conv_layer(w, a)
            if l != last:
                a = elu(a)
        return a

    def _forward_with_intermediates(self, arr):
        pre = []
        a = arr
        last = len(self.weights) - 1
        for l, w in enumerate(self.weights):
            z = _conv_layer(w, a)
            pre.append(z)
            a = elu(z) if l != last else z
        return a, pre

    def _vjp(self, arr, u):
        _, pre = self._forward_with_intermediates(arr)
        g = u
        last = len(self.weights) - 1
        for l in range(last, -1, -1):
            if l != last:
                g = g * elu_prime(pre[l])
            g = _conv_layer_adjoint(self.weights[l], g)
        return g

    # -- weight serialization ------------------------------------------
    # Text header (magic, layer count, one shape line per layer) followed
    # by raw little-endian float64 tap data in layer order.
    MAGIC = b"TINYCONV1\n"

    def save_weights(self, path):
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(b"%d\n" % len(self.weights))
            for w in self.weights:
                fh.write(("%d %d %d %d\n" % w.shape).encode())
            for w in self.weights:
                fh.write(w.astype("<f8").tobytes())

    @classmethod
    def load_weights(cls, path, noise_level: float = 0.0):
        with open(path, "rb") as fh:
            if fh.read(len(cls.MAGIC)) != cls.MAGIC:
                raise ValueError(f"not a TinyConvNet weight file: {path}")
            n_layers = int(fh.readline())
            shapes = [tuple(int(t) for t in fh.readline().split()) for _ in range(n_layers)]
            weights = []
            for shp in shapes:
                count = int(np.prod(shp))
                buf = fh.read(count * 8)
                if len(buf) != count * 8:
                    raise ValueError(f"truncated weight file: {path}")
                weights.append(np.frombuffer(buf, dtype="<f8").reshape(shp).copy())
        channels = shapes[0][1]
        ksize = shapes[0][2]
        hidden = shapes[0][0] if n_layers > 1 else 1
        net = cls(channels=channels, hidden=max(1, min(hidden, 8)), layers=n_layers,
                  kernel_size=ksize, noise_level=noise_level)
        if [w.shape for w in weights] != [w.shape for w in net.weights]:
            raise ValueError(f"inconsistent layer shapes in {path}")
        net.weights = weights
        net.receptive_radius = sum(w.shape[2] // 2 for w in weights)
        return net


@dataclass(frozen=True)
class Regularizer:
    """Weighted GS potential ``f(x) = (weight/2) ||x - N(x)||^2``.

    ``weight`` is normally positive; zero is accepted so that
    fidelity-only problems can reuse the solver unchanged.
    """

    denoiser: GsDenoiser
    weight: float

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("regularization weight must be nonnegative")

    def value(self, x: ImageTensor) -> float:
        res = x.data - self.denoiser._forward(x.data)
        return 0.5 * self.weight * float(np.vdot(res, res))

    def grad(self, x: ImageTensor) -> ImageTensor:
        """weight * [x - N(x) - J_N(x)^T (x - N(x))]."""
        res = x.data - self.denoiser._forward(x.data)
        out = res - self.denoiser._vjp(x.data, res)
        return ImageTensor(self.weight * out)

    def grad_block(self, x: ImageTensor, p: BlockPartition, i: int, pad: int) -> np.ndarray:
        """Block slice of :meth:`grad` computed from a padded patch only.

        Requires ``pad >= receptive_radius`` (the sufficiency condition for
        the restricted-network identity); the full-image Jacobian is never
        materialized and the working set is bounded by the patch size.
        """
        r = self.denoiser.receptive_radius
        if pad < r:
            raise ValueError(
                f"pad {pad} is below the denoiser receptive radius {r}; "
                "the restricted gradient would be inexact"
            )
        rows, cols, (ir, ic), (bh, bw) = block_context(p, i, pad + r)
        patch = x.data[:, rows[:, None], cols[None, :]]
        res = patch - self.denoiser._forward(patch)
        out = res - self.denoiser._vjp(patch, res)
        return self.weight * out[:, ir:ir + bh, ic:ic + bw].ravel()
