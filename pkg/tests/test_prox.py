import numpy as np
import pytest

from blockphila.operators import BlurKernel, ForwardModel, gaussian_kernel
from blockphila.prox import (
    ProxCertificate, ProxSolveError, ProxSubproblem, dual_iterates, h_value,
    prox_ls_deblur, prox_ls_sr, solve_block_prox,
)
from blockphila.tensor import ImageTensor, make_partition, scatter_block
from oracles import dense_model_matrix, dense_selection, scalar_h


def small_instance(rng, H=8, W=8, scheme="quadrants", i=1, kernel=None,
                   alpha=None, beta=None):
    kernel = kernel or gaussian_kernel(3, 1.0)
    model = ForwardModel.blur(kernel, H, W)
    p = make_partition(H, W, scheme)
    x = ImageTensor(rng.uniform(0, 1, (H, W)))
    w = ImageTensor(rng.uniform(0, 1, (H, W)))
    b = ImageTensor(rng.uniform(0, 1, (H, W)))
    alpha = rng.uniform(0.5, 20.0) if alpha is None else alpha
    beta = rng.uniform(0.0, 0.8) if beta is None else beta
    sub = ProxSubproblem(model, b, p, i, x, w, alpha, beta)
    grad = 0.1 * rng.standard_normal(p.block_size(i))
    return sub, grad


def dense_yhat(sub, grad):
    """KKT solve of the block subproblem on materialized matrices."""
    A = dense_model_matrix(sub.model)
    Ui = dense_selection(sub.partition, sub.i)
    Mi = A @ Ui
    x_flat = sub.x.ravel()
    masked = x_flat.copy()
    masked[sub.partition.flat_indices(sub.i)] = 0.0
    b_eff = sub.b.ravel() - A @ masked
    xbar = sub.base_point(grad)
    n_i = Ui.shape[1]
    lhs = np.eye(n_i) / sub.alpha + Mi.T @ Mi
    return np.linalg.solve(lhs, xbar / sub.alpha + Mi.T @ b_eff)


# ------------------------------------------------------------- closed forms

def test_prox_deblur_alpha0_is_exact(rng):
    m = ForwardModel.blur(gaussian_kernel(3, 1.0), 8, 8)
    z = ImageTensor(rng.uniform(0, 1, (8, 8)))
    b = ImageTensor(rng.uniform(0, 1, (8, 8)))
    out = prox_ls_deblur(z, 0.0, m, b)
    assert np.array_equal(out.data, z.data)


def test_prox_deblur_identity_kernel_scalar_formula(rng):
    m = ForwardModel.blur(BlurKernel(np.ones((1, 1)), (0, 0)), 8, 8)
    z = ImageTensor(rng.uniform(0, 1, (8, 8)))
    b = ImageTensor(rng.uniform(0, 1, (8, 8)))
    alpha = 3.0
    out = prox_ls_deblur(z, alpha, m, b)
    assert np.abs(out.data - (alpha * b.data + z.data) / (1 + alpha)).max() <= 1e-12


def test_prox_deblur_matches_dense_solve(rng):
    m = ForwardModel.blur(gaussian_kernel(5, 1.3), 12, 12)
    A = dense_model_matrix(m)
    for _ in range(3):
        z = rng.standard_normal((12, 12))
        b = rng.standard_normal((12, 12))
        alpha = rng.uniform(0.1, 30.0)
        got = prox_ls_deblur(ImageTensor(z), alpha, m, ImageTensor(b)).ravel()
        want = np.linalg.solve(np.eye(144) + alpha * A.T @ A,
                               alpha * A.T @ b.ravel() + z.ravel())
        assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)


def test_prox_sr_alpha0_and_s1(rng):
    m2 = ForwardModel.blur_downsample(gaussian_kernel(3, 0.9), 2, 8, 8)
    z = ImageTensor(rng.uniform(0, 1, (8, 8)))
    b = ImageTensor(rng.uniform(0, 1, (4, 4)))
    assert np.array_equal(prox_ls_sr(z, 0.0, m2, b).data, z.data)
    k = gaussian_kernel(5, 1.3)
    m1 = ForwardModel.blur_downsample(k, 1, 12, 12)
    mb = ForwardModel.blur(k, 12, 12)
    z = ImageTensor(rng.uniform(0, 1, (12, 12)))
    b = ImageTensor(rng.uniform(0, 1, (12, 12)))
    d = prox_ls_sr(z, 4.2, m1, b).data - prox_ls_deblur(z, 4.2, mb, b).data
    assert np.abs(d).max() <= 1e-10


def test_prox_sr_matches_dense_solve(rng):
    m = ForwardModel.blur_downsample(gaussian_kernel(3, 0.8), 2, 8, 8)
    A = dense_model_matrix(m)
    for _ in range(3):
        z = rng.standard_normal((8, 8))
        b = rng.standard_normal((4, 4))
        alpha = rng.uniform(0.1, 30.0)
        got = prox_ls_sr(ImageTensor(z), alpha, m, ImageTensor(b)).ravel()
        want = np.linalg.solve(np.eye(64) + alpha * A.T @ A,
                               alpha * A.T @ b.ravel() + z.ravel())
        assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)


def test_prox_kind_validation(rng):
    z = ImageTensor.zeros(8, 8)
    b = ImageTensor.zeros(4, 4)
    down = ForwardModel.downsample(2, 8, 8)
    with pytest.raises(ValueError):
        prox_ls_deblur(z, 1.0, down, b)
    with pytest.raises(ValueError):
        prox_ls_sr(z, 1.0, ForwardModel.blur(gaussian_kernel(3, 1.0), 8, 8), z)
    with pytest.raises(ValueError):
        prox_ls_deblur(z, -1.0, ForwardModel.blur(gaussian_kernel(3, 1.0), 8, 8), z)


# ------------------------------------------------------------------ h_value

def test_h_zero_at_base(rng):
    sub, grad = small_instance(rng)
    assert h_value(sub, sub.x_blk, grad) == 0.0


def test_h_formula_collapse_no_fidelity(rng):
    p = make_partition(4, 4, "quadrants")
    x = ImageTensor(rng.uniform(0, 1, (4, 4)))
    sub = ProxSubproblem(None, None, p, 2, x, x, alpha=2.0, beta=0.0)
    grad = rng.standard_normal(4)
    y = rng.standard_normal(4)
    want = grad @ (y - sub.x_blk) + np.dot(y - sub.x_blk, y - sub.x_blk) / 4.0
    assert h_value(sub, y, grad) == pytest.approx(want, rel=1e-14)


def test_h_matches_scalar_oracle(rng):
    sub, grad = small_instance(rng, H=8, W=8, scheme="quadrants", i=0)
    y = sub.x_blk + 0.1 * rng.standard_normal(sub.x_blk.size)
    c = grad - (sub.beta / sub.alpha) * (sub.x_blk - sub.w_blk)
    want = scalar_h(c, None, sub.alpha, sub.x_blk, y,
                    sub.phi_of(y), sub.phi_base)
    assert h_value(sub, y, grad) == pytest.approx(want, abs=1e-12)


def test_h_with_diagonal_metric(rng):
    p = make_partition(4, 4, "horizontal-halves")
    x = ImageTensor(rng.uniform(0, 1, (4, 4)))
    w = ImageTensor(rng.uniform(0, 1, (4, 4)))
    dmetric = rng.uniform(0.5, 2.0, p.block_size(0))
    sub = ProxSubproblem(None, None, p, 0, x, w, alpha=1.5, beta=0.4, dmetric=dmetric)
    grad = rng.standard_normal(p.block_size(0))
    y = rng.standard_normal(p.block_size(0))
    c = grad - (0.4 / 1.5) * dmetric * (sub.x_blk - sub.w_blk)
    want = scalar_h(c, dmetric, 1.5, sub.x_blk, y, 0.0, 0.0)
    assert h_value(sub, y, grad) == pytest.approx(want, abs=1e-12)
    with pytest.raises(NotImplementedError):
        solve_block_prox(
            ProxSubproblem(ForwardModel.blur(gaussian_kernel(3, 1.0), 4, 4),
                           ImageTensor.zeros(4, 4), p, 0, x, w, 1.5, 0.4,
                           dmetric=dmetric),
            grad, 1.0)


def test_b_eff_matches_scatter_then_apply(rng):
    sub, _ = small_instance(rng)
    zeroed = scatter_block(sub.x, sub.partition, sub.i,
                           np.zeros(sub.partition.block_size(sub.i)))
    want = sub.b.data - sub.model.apply(zeroed).data
    assert np.abs(sub.b_eff - want).max() <= 1e-12


# ----------------------------------------------------------- solve_block_prox

def test_full_block_reaches_certificate_at_one(rng):
    # N=1: the dual update solves the problem exactly in one iteration
    H = W = 8
    k = gaussian_kernel(3, 1.0)
    model = ForwardModel.blur(k, H, W)
    p = make_partition(H, W, "full")
    x = ImageTensor(rng.uniform(0, 1, (H, W)))
    w = ImageTensor(rng.uniform(0, 1, (H, W)))
    b = ImageTensor(rng.uniform(0, 1, (H, W)))
    sub = ProxSubproblem(model, b, p, 0, x, w, alpha=5.0, beta=0.3)
    grad = 0.1 * rng.standard_normal(H * W)
    y, cert = solve_block_prox(sub, grad, tau=1e-6)
    assert cert.dual_iters == 1
    xbar = sub.base_point(grad)
    want = prox_ls_deblur(ImageTensor(xbar.reshape(1, H, W)), 5.0, model, b)
    assert np.abs(y - want.ravel()).max() <= 1e-8


def test_zero_fidelity_returns_base_point(rng):
    p = make_partition(8, 8, "quadrants")
    x = ImageTensor(rng.uniform(0, 1, (8, 8)))
    w = ImageTensor(rng.uniform(0, 1, (8, 8)))
    sub = ProxSubproblem(None, None, p, 1, x, w, alpha=2.0, beta=0.5)
    grad = rng.standard_normal(p.block_size(1))
    y, cert = solve_block_prox(sub, grad, tau=1e6)
    assert np.array_equal(y, sub.base_point(grad))
    assert cert.dual_iters == 0
    # the proximal point of the zero function is exact: h(ytilde) = h(yhat)
    assert cert.primal == cert.dual


def test_certificate_and_bounds_against_dense_oracle(rng):
    for trial in range(6):
        sub, grad = small_instance(rng, i=trial % 4)
        tau = [1e6, 10.0, 1e-2][trial % 3]
        y, cert = solve_block_prox(sub, grad, tau, max_dual_iters=500)
        assert cert.is_valid()
        yhat = dense_yhat(sub, grad)
        h_hat = h_value(sub, yhat, grad)
        # tau-approximation against the dense optimum, not just the dual bound
        assert cert.primal <= (2 / (2 + tau)) * h_hat + 1e-10
        # distance bounds in terms of -h (alpha_max = alpha, mu = 1 here)
        mh = -cert.primal
        am = sub.alpha
        assert np.sum((yhat - sub.x_blk) ** 2) <= 2 * am * (1 + tau / 2) * mh + 1e-10
        assert np.sum((y - yhat) ** 2) <= am * tau * mh + 1e-10
        bound3 = 2 * am * (np.sqrt(1 + tau / 2) + np.sqrt(tau / 2)) ** 2 * mh
        assert np.sum((y - sub.x_blk) ** 2) <= bound3 + 1e-10


def test_weak_duality_and_monotone_ascent(rng):
    sub, grad = small_instance(rng, i=2)
    yhat = dense_yhat(sub, grad)
    h_hat = h_value(sub, yhat, grad)
    psis = [psi for _, _, _, _, psi in dual_iterates(sub, grad, 40)]
    assert all(p <= h_hat + 1e-10 for p in psis)
    assert all(psis[j + 1] >= psis[j] - 1e-10 for j in range(len(psis) - 1))


def test_dual_converges_to_exact_prox(rng):
    sub, grad = small_instance(rng, i=3, alpha=5.0, beta=0.3)
    yhat = dense_yhat(sub, grad)
    ys = [y for _, _, y, _, _ in dual_iterates(sub, grad, 400)]
    assert np.linalg.norm(ys[-1] - yhat) <= 1e-6


def test_exhaustion_raises_with_best_gap(rng):
    sub, grad = small_instance(rng, i=0, alpha=10.0)
    with pytest.raises(ProxSolveError) as err:
        solve_block_prox(sub, grad, tau=1e-9, max_dual_iters=1)
    assert err.value.iters == 1
    assert np.isfinite(err.value.best_gap) and err.value.best_gap > 0


def test_parameter_validation(rng):
    sub, grad = small_instance(rng)
    with pytest.raises(ValueError):
        solve_block_prox(sub, grad, tau=-1.0)
    bad = ProxSubproblem(sub.model, sub.b, sub.partition, sub.i, sub.x, sub.w,
                         alpha=0.0, beta=0.0)
    with pytest.raises(ValueError):
        h_value(bad, sub.x_blk, grad)
    with pytest.raises(ValueError):
        solve_block_prox(bad, grad, tau=1.0)


def test_certificate_validity_semantics():
    good = ProxCertificate(primal=-1.0, dual=-0.5, tau=1.0, dual_iters=3)
    # factor = 2/3: -1.0 <= -1/3 holds
    assert good.is_valid()
    bad = ProxCertificate(primal=-0.2, dual=-0.5, tau=1.0, dual_iters=3)
    assert not bad.is_valid()
    positive_dual = ProxCertificate(primal=-1.0, dual=0.5, tau=1.0, dual_iters=3)
    assert not positive_dual.is_valid()


def test_certificate_sound_for_sr_blocks(rng):
    # blur-downsample subproblems drive the coarse-grid dual machinery
    model = ForwardModel.blur_downsample(gaussian_kernel(3, 0.9), 2, 8, 8)
    A = dense_model_matrix(model)
    p = make_partition(8, 8, "quadrants")
    for trial in range(4):
        i = trial % 4
        x = ImageTensor(rng.uniform(0, 1, (8, 8)))
        w = ImageTensor(rng.uniform(0, 1, (8, 8)))
        b = ImageTensor(rng.uniform(0, 1, (4, 4)))
        alpha = rng.uniform(0.5, 15.0)
        sub = ProxSubproblem(model, b, p, i, x, w, alpha, beta=0.4)
        grad = 0.1 * rng.standard_normal(p.block_size(i))
        tau = [1e6, 1.0][trial % 2]
        y, cert = solve_block_prox(sub, grad, tau, max_dual_iters=500)
        assert cert.is_valid()
        Ui = dense_selection(p, i)
        Mi = A @ Ui
        masked = x.ravel().copy()
        masked[p.flat_indices(i)] = 0.0
        b_eff = b.ravel() - A @ masked
        xbar = sub.base_point(grad)
        yhat = np.linalg.solve(np.eye(Ui.shape[1]) / alpha + Mi.T @ Mi,
                               xbar / alpha + Mi.T @ b_eff)
        assert cert.primal <= (2 / (2 + tau)) * h_value(sub, yhat, grad) + 1e-10


def test_full_block_sr_matches_closed_form(rng):
    model = ForwardModel.blur_downsample(gaussian_kernel(3, 0.9), 2, 8, 8)
    p = make_partition(8, 8, "full")
    x = ImageTensor(rng.uniform(0, 1, (8, 8)))
    w = ImageTensor(rng.uniform(0, 1, (8, 8)))
    b = ImageTensor(rng.uniform(0, 1, (4, 4)))
    sub = ProxSubproblem(model, b, p, 0, x, w, alpha=4.0, beta=0.2)
    grad = 0.1 * rng.standard_normal(64)
    y, cert = solve_block_prox(sub, grad, tau=1e-6)
    assert cert.dual_iters == 1
    xbar = sub.base_point(grad)
    want = prox_ls_sr(ImageTensor(xbar.reshape(1, 8, 8)), 4.0, model, b)
    assert np.abs(y - want.ravel()).max() <= 1e-8


def test_tau_zero_exposed_reaches_exact_prox(rng):
    # tau = 0 demands the exact point; termination then relies on the
    # absolute roundoff slack, which small instances do reach
    sub, grad = small_instance(rng, i=1, alpha=2.0, beta=0.2)
    y, cert = solve_block_prox(sub, grad, tau=0.0, max_dual_iters=5000)
    yhat = dense_yhat(sub, grad)
    assert np.linalg.norm(y - yhat) <= 1e-6
