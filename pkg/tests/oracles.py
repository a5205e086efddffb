"""Independent oracles for the test suite.

Everything here is built from scalar loops and dense matrices on the
flattened image vector, deliberately bypassing the package's FFT paths,
block algebra, and solver abstractions.
"""

import numpy as np


def dense_blur_matrix(taps, anchor, H, W, correlation=False):
    """Dense circular filtering matrix from direct index arithmetic.

    ``correlation=False`` gives true convolution ``out[p] = sum_q psf[q]
    x[p - q]`` (the forward models' point-spread semantics);
    ``correlation=True`` gives ``out[p] = sum taps[a+d] x[p + d]`` (the
    denoisers' conv-layer semantics).
    """
    taps = np.asarray(taps, dtype=float)
    kh, kw = taps.shape
    ar, ac = anchor
    sign = 1 if correlation else -1
    n = H * W
    A = np.zeros((n, n))
    for r in range(H):
        for c in range(W):
            row = r * W + c
            for dy in range(kh):
                for dx in range(kw):
                    rr = (r + sign * (dy - ar)) % H
                    cc = (c + sign * (dx - ac)) % W
                    A[row, rr * W + cc] += taps[dy, dx]
    return A


def dense_down_matrix(s, H, W):
    """Dense s-fold downsampling matrix keeping pixel (0,0) of each cell."""
    m = (H // s) * (W // s)
    S = np.zeros((m, H * W))
    i = 0
    for r in range(0, H, s):
        for c in range(0, W, s):
            S[i, r * W + c] = 1.0
            i += 1
    return S


def dense_model_matrix(model):
    """Dense matrix of a single-channel forward model, via direct loops."""
    H, W = model.height, model.width
    if model.kind == "identity":
        return np.eye(H * W)
    if model.kind == "blur":
        return dense_blur_matrix(model.kernel.taps, model.kernel.anchor, H, W)
    if model.kind == "downsample":
        return dense_down_matrix(model.scale, H, W)
    B = dense_blur_matrix(model.kernel.taps, model.kernel.anchor, H, W)
    return dense_down_matrix(model.scale, H, W) @ B


def dense_selection(partition, i):
    """Materialized 0/1 selection matrix U_i (n x n_i)."""
    idx = partition.flat_indices(i)
    U = np.zeros((partition.total_dim, idx.size))
    U[idx, np.arange(idx.size)] = 1.0
    return U


def direct_circular_conv(taps, anchor, img):
    """O(n k^2) spatial circular convolution (PSF semantics) of an image."""
    H, W = img.shape
    kh, kw = np.asarray(taps).shape
    ar, ac = anchor
    out = np.zeros_like(img, dtype=float)
    for r in range(H):
        for c in range(W):
            acc = 0.0
            for dy in range(kh):
                for dx in range(kw):
                    acc += taps[dy, dx] * img[(r - (dy - ar)) % H, (c - (dx - ac)) % W]
            out[r, c] = acc
    return out


def scalar_h(c_vec, dmetric, alpha, x_blk, y, phi_y, phi_x):
    """Scalar-loop evaluation of the shifted block objective."""
    total = 0.0
    for j in range(len(y)):
        step = y[j] - x_blk[j]
        d = 1.0 if dmetric is None else dmetric[j]
        total += c_vec[j] * step + step * d * step / (2.0 * alpha)
    return total + phi_y - phi_x


def tiny_forward_scalar(net, x):
    """Scalar-loop forward pass of a TinyConvNet on a (C, h, w) array."""
    a = np.asarray(x, dtype=float)
    last = len(net.weights) - 1
    for l, wgt in enumerate(net.weights):
        O, I, kh, kw = wgt.shape
        cy, cx = kh // 2, kw // 2
        h, w = a.shape[1], a.shape[2]
        out = np.zeros((O, h, w))
        for o in range(O):
            for r in range(h):
                for c in range(w):
                    acc = 0.0
                    for ic in range(I):
                        for dy in range(kh):
                            for dx in range(kw):
                                rr = (r + dy - cy) % h
                                cc = (c + dx - cx) % w
                                acc += wgt[o, ic, dy, dx] * a[ic, rr, cc]
                    out[o, r, c] = acc
        if l != last:
            out = np.where(out > 0, out, np.expm1(np.minimum(out, 0.0)))
        a = out
    return a


class DenseBlockPhila:
    """Straight-line reimplementation of the solver on dense matrices.

    Works on flat vectors; the forward operator, denoiser, block index
    sets, dual iteration, certificate, line search, and update rule are
    all spelled out without the package abstractions.
    """

    def __init__(self, A, B, b, lam, blocks, alpha_min=1e-2, alpha_max=1e3,
                 beta_max=1.0, gamma=1e-4, sigma=1e-4, delta=0.5, tau=1e6,
                 steplength="bb", inertia=True, max_dual_iters=200):
        self.A, self.B, self.b, self.lam = A, B, b, lam
        self.blocks = blocks  # list of flat index arrays
        self.Q = (np.eye(B.shape[0]) - B).T @ (np.eye(B.shape[0]) - B)
        self.alpha_min, self.alpha_max = alpha_min, alpha_max
        self.beta_max, self.gamma = beta_max, gamma
        self.sigma, self.delta, self.tau = sigma, delta, tau
        self.steplength, self.inertia = steplength, inertia
        self.max_dual_iters = max_dual_iters

    def F(self, x):
        r = self.A @ x - self.b
        g = x - self.B @ x
        return 0.5 * r @ r + 0.5 * self.lam * g @ g

    def grad_f(self, x):
        return self.lam * (self.Q @ x)

    def run(self, x0, iters):
        N = len(self.blocks)
        window = [x0.copy() for _ in range(N + 1)]
        history = []
        for k in range(iters):
            i = k % N
            idx = self.blocks[i]
            x, w = window[0], window[N]
            g_blk = self.grad_f(x)[idx]
            if self.steplength == "bb":
                if k < N:
                    alpha = self.alpha_max
                else:
                    s = x[idx] - w[idx]
                    yv = g_blk - self.grad_f(w)[idx]
                    ny = np.linalg.norm(yv)
                    if ny < 1e-30:
                        alpha = self.alpha_max
                    else:
                        alpha = min(self.alpha_max,
                                    max(self.alpha_min, np.linalg.norm(s) / ny))
            else:
                alpha = min(self.alpha_max, max(self.alpha_min, 1.0 / self.lam))
            beta = 0.0
            if self.inertia:
                div = k // N
                beta = min(self.beta_max, max(0.0, (div - 1.0) / (div + 2.0)))

            while True:
                out = self._block_prox(x, w, idx, g_blk, alpha, beta)
                if out is not None:
                    break
                if alpha <= self.alpha_min:
                    raise RuntimeError("dense oracle: dual budget exhausted")
                alpha = max(self.alpha_min, alpha / 16.0)
            y, h, dual_iters = out

            if h > 1e-12:
                raise RuntimeError("dense oracle: positive h")
            if h >= 0.0:
                window = [x.copy()] + window[:-1]
                history.append(dict(x=window[0].copy(), alpha=alpha, beta=beta,
                                    lam_ls=1.0, m=0, h=0.0, branch="frozen"))
                continue

            d = y - x[idx]
            dsq = d @ d
            F0 = self.F(x)
            inert = 0.5 * self.gamma * np.dot(x[idx] - w[idx], x[idx] - w[idx])
            m = 0
            x_full = F_full = None
            while True:
                lam_ls = self.delta ** m
                xt = x.copy()
                xt[idx] = x[idx] + lam_ls * d
                Ft = self.F(xt)
                if m == 0:
                    x_full, F_full = xt, Ft
                if Ft + 0.5 * self.gamma * lam_ls**2 * dsq <= F0 + inert + self.sigma * lam_ls * h:
                    break
                m += 1
                if m > 60:
                    raise RuntimeError("dense oracle: line search failed")
            if F_full + 0.5 * self.gamma * dsq < Ft + 0.5 * self.gamma * lam_ls**2 * dsq:
                x_new, branch = x_full, "full"
            else:
                x_new, branch = xt, "damped"
            window = [x_new] + window[:-1]
            history.append(dict(x=x_new.copy(), alpha=alpha, beta=beta,
                                lam_ls=lam_ls, m=m, h=h, branch=branch))
        return history

    def _block_prox(self, x, w, idx, g_blk, alpha, beta):
        A, b = self.A, self.b
        x_masked = x.copy()
        x_masked[idx] = 0.0
        b_eff = b - A @ x_masked
        diff = x[idx] - w[idx]
        xbar = x[idx] + beta * diff - alpha * g_blk
        c = g_blk - (beta / alpha) * diff
        r_full = A @ x - b
        phi_x = 0.5 * r_full @ r_full
        const = -phi_x - 0.5 * alpha * (c @ c)
        Mi = A[:, idx]
        P_inv = np.linalg.inv(np.eye(A.shape[0]) + alpha * (A @ A.T))
        aux = Mi @ xbar - b_eff
        factor = 2.0 / (2.0 + self.tau)
        v = np.zeros(A.shape[0])
        for ell in range(1, self.max_dual_iters + 1):
            atv = A.T @ v
            masked = atv.copy()
            masked[idx] = 0.0
            v = P_inv @ (aux + alpha * (A @ masked))
            atv = A.T @ v
            y = xbar - alpha * atv[idx]
            step = y - x[idx]
            ri = Mi @ y - b_eff
            h = c @ step + (step @ step) / (2 * alpha) + 0.5 * ri @ ri - phi_x
            psi = (-0.5 * v @ v - v @ b_eff - (y @ y) / (2 * alpha)
                   + (xbar @ xbar) / (2 * alpha) + const)
            if h <= factor * psi + 1e-12:
                return y, h, ell
            if psi >= -1e-12:
                return x[idx].copy(), 0.0, ell
        return None
