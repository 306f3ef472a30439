"""The measurement-inversion block and the TV-regularised baseline.

``psi_forward`` solves (A^T A + rho I) u = A^T y + rho v by conjugate
gradient (or exactly, through the frequency diagonal, for the masked
Fourier operator). ``psi_backward`` implements the hand-derived reverse
rules

    grad_v   = rho (A^T A + rho I)^-1 g
    grad_y   = A (A^T A + rho I)^-1 g
    grad_rho = (v - u)^T (A^T A + rho I)^-1 g

with every inner inverse again computed by CG. ``make_psi_op`` wraps the
pair as a CustomGradOp so the solver stays opaque to the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import CustomGradOp, value_of
from .operators import ForwardOperator, MaskedFourierOperator


class CGDivergenceError(RuntimeError):
    """Residuals grew for several consecutive iterations; the operator
    pair is likely not an adjoint pair."""


@dataclass(frozen=True)
class RhoParam:
    """Coupling weight reparameterised as rho = cap * sigmoid(0.4 w)."""

    w: float
    cap: float = 0.8

    @property
    def value(self) -> float:
        return self.cap / (1.0 + math.exp(-0.4 * self.w))

    @staticmethod
    def from_rho(rho: float, cap: float = 0.8) -> "RhoParam":
        if not 0.0 < rho < cap:
            raise ValueError(f"rho must lie in (0, {cap}), got {rho}")
        p = rho / cap
        return RhoParam(w=math.log(p / (1.0 - p)) / 0.4, cap=cap)


@dataclass(frozen=True)
class CGConfig:
    rel_tolerance: float = 1e-6
    max_iters: int = 50

    def __post_init__(self):
        if self.rel_tolerance <= 0:
            raise ValueError("rel_tolerance must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class CGDiagnostics:
    iterations: int
    rel_residual: float
    converged: bool
    method: str = "cg"
    warning: str | None = None


def cg_solve(apply_op, b: np.ndarray, cfg: CGConfig) -> tuple[np.ndarray, CGDiagnostics]:
    """Conjugate gradient for an SPD operator given as a callable."""
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x, CGDiagnostics(0, 0.0, True)
    r = b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r))
    prev_norm = math.sqrt(rs)
    increases = 0
    for it in range(1, cfg.max_iters + 1):
        ap = apply_op(p)
        denom = float(np.vdot(p, ap))
        if denom <= 0.0:
            raise CGDivergenceError(
                f"CG curvature {denom:.3e} is not positive; operator is not SPD"
            )
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r))
        rnorm = math.sqrt(rs_new)
        if rnorm > prev_norm:
            increases += 1
            if increases >= 5:
                raise CGDivergenceError(
                    "CG residual increased for 5 consecutive iterations; "
                    "check that apply/adjoint form a matched pair"
                )
        else:
            increases = 0
        prev_norm = rnorm
        if rnorm / bnorm <= cfg.rel_tolerance:
            return x, CGDiagnostics(it, rnorm / bnorm, True)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, CGDiagnostics(
        cfg.max_iters,
        prev_norm / bnorm,
        False,
        warning=f"CG hit max_iters={cfg.max_iters} at rel residual {prev_norm / bnorm:.3e}",
    )


def _solve_normal(a_op: ForwardOperator, rhs: np.ndarray, rho: float, cfg: CGConfig, method: str):
    if method == "auto" and isinstance(a_op, MaskedFourierOperator):
        method = "fast"
    if method == "fast":
        if not isinstance(a_op, MaskedFourierOperator):
            raise ValueError("fast path is only available for the masked Fourier operator")
        x = a_op.solve_normal(rhs, rho)
        res = np.linalg.norm(a_op.adjoint(a_op.apply(x)) + rho * x - rhs)
        rel = float(res / max(np.linalg.norm(rhs), 1e-300))
        return x, CGDiagnostics(0, rel, True, method="fast")
    x, diag = cg_solve(lambda z: a_op.adjoint(a_op.apply(z)) + rho * z, rhs, cfg)
    return x, diag


def psi_forward(
    v,
    y,
    rho,
    a_op: ForwardOperator,
    cfg: CGConfig = CGConfig(),
    method: str = "auto",
) -> tuple[np.ndarray, CGDiagnostics]:
    """Solve (A^T A + rho I) u = A^T y + rho v."""
    v = value_of(v)
    y = value_of(y)
    rho_val = rho.value if isinstance(rho, RhoParam) else float(value_of(rho))
    if rho_val <= 0:
        raise ValueError(f"rho must be > 0, got {rho_val}")
    rhs = a_op.adjoint(y) + rho_val * v
    return _solve_normal(a_op, rhs, rho_val, cfg, method)


def psi_backward(
    upstream,
    v,
    y,
    rho,
    psi_out,
    a_op: ForwardOperator,
    cfg: CGConfig = CGConfig(),
    method: str = "auto",
) -> tuple[np.ndarray, np.ndarray, float, CGDiagnostics]:
    """Reverse rules for psi, all through one inner solve of the same system."""
    upstream = value_of(upstream)
    v = value_of(v)
    psi_out = value_of(psi_out)
    rho_val = rho.value if isinstance(rho, RhoParam) else float(value_of(rho))
    s, diag = _solve_normal(a_op, upstream, rho_val, cfg, method)
    grad_v = rho_val * s
    grad_y = a_op.apply(s)
    grad_rho = float(np.vdot(v - psi_out, s))
    return grad_v, grad_y, grad_rho, diag


def make_psi_op(
    a_op: ForwardOperator,
    cfg: CGConfig = CGConfig(),
    method: str = "auto",
    diagnostics_sink: list | None = None,
) -> CustomGradOp:
    """Package psi as a differentiable op with inputs (v, y, rho)."""

    def forward(v, y, rho):
        out, diag = psi_forward(v, y, float(rho), a_op, cfg, method)
        if diagnostics_sink is not None:
            diagnostics_sink.append(diag)
        return out

    def backward(inputs, output, upstream):
        v, y, rho = inputs
        grad_v, grad_y, grad_rho, diag = psi_backward(
            upstream, v, y, float(rho), output, a_op, cfg, method
        )
        if diagnostics_sink is not None:
            diagnostics_sink.append(diag)
        return grad_v, grad_y, np.asarray(grad_rho, dtype=np.float64)

    return CustomGradOp(name="psi", forward=forward, backward=backward)


# ---------------------------------------------------------------------------
# TV-regularised reconstruction (primal-dual, Chambolle-Pock form)


@dataclass(frozen=True)
class TVConfig:
    weight: float = 0.01
    iters: int = 100
    tau: float | None = None
    sigma: float | None = None
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("TV weight must be > 0")
        if self.iters < 1:
            raise ValueError("TV iters must be >= 1")


@dataclass
class TVDiagnostics:
    objectives: list[float] = field(default_factory=list)


def _forward_grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:-1, :] = u[1:, :] - u[:-1, :]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    return gx, gy


def _neg_divergence(gx, gy):
    """Adjoint of the forward-difference gradient (Neumann boundary)."""
    out = np.zeros_like(gx)
    out[0, :] += -gx[0, :]
    out[1:-1, :] += gx[:-2, :] - gx[1:-1, :]
    out[-1, :] += gx[-2, :]
    out[:, 0] += -gy[:, 0]
    out[:, 1:-1] += gy[:, :-2] - gy[:, 1:-1]
    out[:, -1] += gy[:, -2]
    return out


def tv_objective(u, y, a_op, weight):
    gx, gy = _forward_grad(u)
    return 0.5 * float(np.sum((a_op.apply(u) - y) ** 2)) + weight * float(
        np.sum(np.hypot(gx, gy))
    )


def tv_reconstruct(
    y, a_op: ForwardOperator, cfg: TVConfig = TVConfig()
) -> tuple[np.ndarray, TVDiagnostics]:
    """argmin_u 0.5 ||Au - y||^2 + weight * TV_iso(u), u clipped to [0, 1]."""
    y = value_of(y)
    h, w = a_op.domain_shape
    op_l = math.sqrt(a_op.opnorm() ** 2 + 8.0)
    tau = cfg.tau if cfg.tau is not None else 0.95 / op_l
    sigma = cfg.sigma if cfg.sigma is not None else 0.95 / op_l
    if tau * sigma * op_l**2 > 1.0 + 1e-12:
        raise ValueError(f"step sizes violate tau*sigma*L^2 <= 1 (L={op_l:.3f})")

    u = np.zeros((h, w))
    ubar = u.copy()
    p = np.zeros(a_op.range_shape)
    qx = np.zeros((h, w))
    qy = np.zeros((h, w))
    lo, hi = cfg.clip
    diag = TVDiagnostics()
    for _ in range(cfg.iters):
        p = (p + sigma * (a_op.apply(ubar) - y)) / (1.0 + sigma)
        gx, gy = _forward_grad(ubar)
        qx += sigma * gx
        qy += sigma * gy
        mag = np.maximum(1.0, np.hypot(qx, qy) / cfg.weight)
        qx /= mag
        qy /= mag
        u_new = np.clip(u - tau * (a_op.adjoint(p) + _neg_divergence(qx, qy)), lo, hi)
        ubar = 2.0 * u_new - u
        u = u_new
        diag.objectives.append(tv_objective(u, y, a_op, cfg.weight))
    return u, diag
