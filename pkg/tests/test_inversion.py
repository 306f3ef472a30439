import numpy as np
import pytest

from sofpidr import autodiff as ad
from sofpidr.autodiff import DiffNode, Tensor, apply_custom, backward
from sofpidr.inversion import (
    CGConfig,
    CGDivergenceError,
    RhoParam,
    cg_solve,
    make_psi_op,
    psi_backward,
    psi_forward,
    tv_objective,
    tv_reconstruct,
    TVConfig,
)
from sofpidr.operators import (
    ForwardOperator,
    IdentityOperator,
    MaskedFourierOperator,
    NoiseModel,
    make_mask,
    simulate_measurement,
)

TIGHT = CGConfig(rel_tolerance=1e-12, max_iters=400)


def psnr(x, ref):
    mse = float(np.mean((x - ref) ** 2))
    return 10.0 * np.log10(1.0 / mse)


def blocks_phantom(h, w):
    img = np.zeros((h, w))
    img[h // 8 : h // 2, w // 8 : w // 2] = 0.7
    img[h // 2 :, w // 2 :] = 0.4
    img[5 * h // 8 : 7 * h // 8, w // 8 : 3 * w // 8] = 1.0
    return img


class TestRhoParam:
    def test_realized_value_in_range(self):
        for w in (-50.0, -1.0, 0.0, 1.0, 50.0):
            rho = RhoParam(w).value
            assert 0.0 < rho < 0.8

    def test_from_rho_round_trip(self):
        p = RhoParam.from_rho(0.26)
        assert p.value == pytest.approx(0.26, abs=1e-12)


class TestCG:
    def test_solves_spd_system(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((12, 12))
        spd = m @ m.T + 12 * np.eye(12)
        b = rng.standard_normal(12)
        x, diag = cg_solve(lambda z: spd @ z, b, CGConfig(1e-12, 200))
        assert diag.converged
        assert np.linalg.norm(spd @ x - b) / np.linalg.norm(b) < 1e-10

    def test_divergence_detection(self):
        # an indefinite operator is not SPD and must be flagged
        bad = np.diag([1.0, -1.0, 2.0])
        with pytest.raises(CGDivergenceError):
            cg_solve(lambda z: bad @ z, np.array([1.0, 1.0, 1.0]), CGConfig(1e-12, 50))


class TestPsiForward:
    def test_identity_closed_form(self):
        rng = np.random.default_rng(1)
        op = IdentityOperator((8, 8))
        v = rng.standard_normal((8, 8))
        y = rng.standard_normal((8, 8))
        rho = 0.3
        out, diag = psi_forward(v, y, rho, op, TIGHT)
        assert np.max(np.abs(out - (y + rho * v) / (1 + rho))) < 1e-8

    def test_consistent_data_returns_v(self):
        rng = np.random.default_rng(2)
        mask = make_mask("radial", 0.25, 2, 3, 16, 16)
        op = MaskedFourierOperator(mask.mask)
        v = rng.standard_normal((16, 16))
        y = op.apply(v)
        out, _ = psi_forward(v, y, 0.79, op, TIGHT, method="cg")
        assert np.max(np.abs(out - v)) < 1e-6

    def test_matches_dense_solve_oracle(self):
        rng = np.random.default_rng(3)
        h = w = 16
        mask = make_mask("random-2d", 0.3, 3, 5, h, w)
        op = MaskedFourierOperator(mask.mask)
        rho = 0.42
        basis = np.eye(h * w)
        normal = np.column_stack(
            [op.adjoint(op.apply(basis[:, i].reshape(h, w))).ravel() for i in range(h * w)]
        ) + rho * np.eye(h * w)
        v = rng.standard_normal((h, w))
        y = rng.standard_normal((2, h, w))
        rhs = (op.adjoint(y) + rho * v).ravel()
        expected = np.linalg.solve(normal, rhs).reshape(h, w)
        out_cg, _ = psi_forward(v, y, rho, op, TIGHT, method="cg")
        assert np.max(np.abs(out_cg - expected)) < 1e-6

    def test_fast_path_agrees_with_cg(self):
        rng = np.random.default_rng(4)
        mask = make_mask("random-1d-cartesian", 0.25, 4, 7, 16, 16)
        op = MaskedFourierOperator(mask.mask)
        v = rng.standard_normal((16, 16))
        y = rng.standard_normal((2, 16, 16))
        fast, diag_fast = psi_forward(v, y, 0.3, op, TIGHT, method="fast")
        slow, _ = psi_forward(v, y, 0.3, op, TIGHT, method="cg")
        assert diag_fast.method == "fast"
        assert np.max(np.abs(fast - slow)) < 1e-8

    def test_contraction_toward_v_as_rho_grows(self):
        mask = make_mask("radial", 0.25, 2, 3, 16, 16)
        op = MaskedFourierOperator(mask.mask)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            v = rng.standard_normal((16, 16))
            y = rng.standard_normal((2, 16, 16))
            d1, _ = psi_forward(v, y, 0.2, op, TIGHT)
            d2, _ = psi_forward(v, y, 0.6, op, TIGHT)
            assert np.linalg.norm(d2 - v) <= np.linalg.norm(d1 - v) + 1e-12


class TestPsiBackward:
    def test_identity_grad_v_closed_form(self):
        rng = np.random.default_rng(5)
        op = IdentityOperator((6, 6))
        v = rng.standard_normal((6, 6))
        y = rng.standard_normal((6, 6))
        rho = 0.5
        out, _ = psi_forward(v, y, rho, op, TIGHT)
        upstream = rng.standard_normal((6, 6))
        grad_v, grad_y, grad_rho, _ = psi_backward(upstream, v, y, rho, out, op, TIGHT)
        assert np.max(np.abs(grad_v - rho / (1 + rho) * upstream)) < 1e-10
        assert np.max(np.abs(grad_y - upstream / (1 + rho))) < 1e-10

    def test_fixed_point_grad_rho_vanishes(self):
        rng = np.random.default_rng(6)
        op = IdentityOperator((5, 5))
        v = rng.standard_normal((5, 5))
        y = v.copy()  # y = Av makes v the exact solution
        out, _ = psi_forward(v, y, 0.37, op, TIGHT)
        upstream = rng.standard_normal((5, 5))
        _, _, grad_rho, _ = psi_backward(upstream, v, y, 0.37, out, op, TIGHT)
        assert abs(grad_rho) < 1e-10

    def test_finite_difference_all_three_gradients(self):
        rng = np.random.default_rng(7)
        h = w = 8
        mask = make_mask("random-2d", 0.4, 2, 3, h, w)
        op = MaskedFourierOperator(mask.mask)
        v0 = rng.standard_normal((h, w))
        y0 = rng.standard_normal((2, h, w))
        rho0 = 0.31
        probe = rng.standard_normal((h, w))

        def f(v, y, rho):
            out, _ = psi_forward(v, y, rho, op, TIGHT, method="cg")
            return float(np.sum(out * probe))

        out0, _ = psi_forward(v0, y0, rho0, op, TIGHT, method="cg")
        grad_v, grad_y, grad_rho, _ = psi_backward(
            probe, v0, y0, rho0, out0, op, TIGHT, method="cg"
        )

        h_fd = 1e-5
        for arr, grad in ((v0, grad_v), (y0, grad_y)):
            fd = np.zeros_like(arr)
            flat, fdf = arr.ravel(), fd.ravel()
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h_fd
                fp = f(v0, y0, rho0)
                flat[i] = saved - h_fd
                fm = f(v0, y0, rho0)
                flat[i] = saved
                fdf[i] = (fp - fm) / (2 * h_fd)
            rel = np.max(np.abs(fd - grad)) / max(np.max(np.abs(fd)), 1e-12)
            assert rel < 1e-4
        fd_rho = (f(v0, y0, rho0 + h_fd) - f(v0, y0, rho0 - h_fd)) / (2 * h_fd)
        assert abs(fd_rho - grad_rho) / max(abs(fd_rho), 1e-12) < 1e-4

    def test_self_adjoint_swap_identity(self):
        rng = np.random.default_rng(8)
        mask = make_mask("radial", 0.3, 2, 5, 12, 12)
        op = MaskedFourierOperator(mask.mask)
        v = rng.standard_normal((12, 12))
        y = rng.standard_normal((2, 12, 12))
        out, _ = psi_forward(v, y, 0.4, op, TIGHT)
        a = rng.standard_normal((12, 12))
        b = rng.standard_normal((12, 12))
        ga, *_ = psi_backward(a, v, y, 0.4, out, op, TIGHT)
        gb, *_ = psi_backward(b, v, y, 0.4, out, op, TIGHT)
        assert abs(np.vdot(b, ga) - np.vdot(a, gb)) < 1e-8


class TestPsiCustomOp:
    def test_embedded_finite_difference(self):
        rng = np.random.default_rng(9)
        h = w = 8
        mask = make_mask("random-2d", 0.4, 2, 4, h, w)
        op = MaskedFourierOperator(mask.mask)
        psi_op = make_psi_op(op, TIGHT, method="cg")
        v0 = rng.standard_normal((h, w))
        y0 = rng.standard_normal((2, h, w))
        w0 = 0.2

        def value(v_arr, w_scalar):
            with ad.no_grad():
                rho = ad.mul(ad.sigmoid(ad.mul(Tensor(np.asarray(w_scalar)), 0.4)), 0.8)
                u = apply_custom(psi_op, Tensor(v_arr), Tensor(y0), rho)
                return ad.sqnorm(u).item()

        v = DiffNode.leaf(v0)
        w_node = DiffNode.leaf(np.asarray(w0))
        rho = ad.mul(ad.sigmoid(ad.mul(w_node, 0.4)), 0.8)
        u = apply_custom(psi_op, v, Tensor(y0), rho)
        backward(ad.sqnorm(u))

        h_fd = 1e-5
        fd_w = (value(v0, w0 + h_fd) - value(v0, w0 - h_fd)) / (2 * h_fd)
        assert abs(fd_w - float(w_node.grad.data)) / max(abs(fd_w), 1e-12) < 1e-4

        idx = (3, 4)
        saved = v0[idx]
        v0[idx] = saved + h_fd
        fp = value(v0, w0)
        v0[idx] = saved - h_fd
        fm = value(v0, w0)
        v0[idx] = saved
        fd_v = (fp - fm) / (2 * h_fd)
        assert abs(fd_v - v.grad.data[idx]) / max(abs(fd_v), 1e-12) < 1e-4

    def test_diagnostics_sink_collects_records(self):
        mask = make_mask("radial", 0.3, 2, 1, 8, 8)
        op = MaskedFourierOperator(mask.mask)
        sink = []
        psi_op = make_psi_op(op, TIGHT, method="cg", diagnostics_sink=sink)
        rng = np.random.default_rng(0)
        apply_custom(psi_op, Tensor(rng.standard_normal((8, 8))), Tensor(rng.standard_normal((2, 8, 8))), 0.4)
        assert len(sink) == 1 and sink[0].converged


class TestTV:
    def test_small_weight_full_mask_recovers_inverse_dft(self):
        rng = np.random.default_rng(10)
        op = MaskedFourierOperator(np.ones((16, 16), dtype=bool))
        u_true = np.clip(rng.random((16, 16)), 0.05, 0.95)
        y = op.apply(u_true)
        out, _ = tv_reconstruct(y, op, TVConfig(weight=1e-6, iters=100))
        assert np.max(np.abs(out - op.adjoint(y))) < 1e-3

    def test_objective_monotone_identity_noiseless(self):
        op = IdentityOperator((24, 24))
        y = blocks_phantom(24, 24)
        _, diag = tv_reconstruct(y, op, TVConfig(weight=0.05, iters=120))
        objectives = np.array(diag.objectives)
        assert np.all(np.diff(objectives) <= 1e-10 * np.maximum(objectives[:-1], 1.0))

    def test_tv_beats_zero_filled_on_phantom(self):
        h = w = 64
        phantom = blocks_phantom(h, w)
        mask = make_mask("radial", 0.25, 2, 7, h, w)
        op = MaskedFourierOperator(mask.mask)
        y = simulate_measurement(
            phantom, op, NoiseModel("complex-gaussian-image-domain", 0.05, 3)
        )
        zero_filled = op.adjoint(y)
        tv, _ = tv_reconstruct(y, op, TVConfig(weight=0.01, iters=100))
        assert psnr(tv, phantom) > psnr(np.clip(zero_filled, 0, 1), phantom) + 2.0
