"""Matched forward/adjoint operator pairs, sampling masks and noise models.

The MRI operator is a masked orthonormal 2-D DFT acting on real images
(complex values carried as a 2-channel real array), the CT operator is a
parallel-beam ray transform assembled as a sparse matrix of bilinear
interpolation weights so apply/adjoint are exact transposes of each
other. Masks and measurements serialize as JRRT tensors with a
``key = value`` sidecar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import jrrt
from .autodiff import ShapeMismatchError, value_of

MASK_PATTERNS = ("radial", "random-2d", "random-1d-cartesian")


class OperatorError(ValueError):
    pass


class ForwardOperator:
    """Linear operator with an exactly matched adjoint."""

    kind: str
    domain_shape: tuple[int, ...]
    range_shape: tuple[int, ...]

    def apply(self, x) -> np.ndarray:
        x = value_of(x)
        if x.shape != self.domain_shape:
            raise ShapeMismatchError(f"{self.kind}.apply", x.shape, self.domain_shape)
        return self._apply(x)

    def adjoint(self, y) -> np.ndarray:
        y = value_of(y)
        if y.shape != self.range_shape:
            raise ShapeMismatchError(f"{self.kind}.adjoint", y.shape, self.range_shape)
        return self._adjoint(y)

    def _apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def opnorm(self) -> float:
        """Estimate of the spectral norm ||A||."""
        raise NotImplementedError

    def verify_adjoint(self, n_pairs: int = 100, seed: int = 0) -> float:
        """Max relative error of <Ax, y> - <x, A^T y> over random pairs."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_pairs):
            x = rng.standard_normal(self.domain_shape)
            y = rng.standard_normal(self.range_shape)
            lhs = float(np.vdot(self.apply(x), y))
            rhs = float(np.vdot(x, self.adjoint(y)))
            scale = max(abs(lhs), abs(rhs), 1e-30)
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst


class IdentityOperator(ForwardOperator):
    kind = "identity"

    def __init__(self, shape):
        self.domain_shape = tuple(shape)
        self.range_shape = tuple(shape)

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()

    def opnorm(self):
        return 1.0


class MaskedFourierOperator(ForwardOperator):
    """Orthonormal 2-D DFT of a real image, entries outside the mask zeroed.

    Domain: real (H, W). Range: (2, H, W) holding Re/Im of masked k-space.
    The adjoint is mask-then-inverse-DFT followed by the real part, the
    exact transpose of embedding the real image as a complex one.
    """

    kind = "masked-fourier"

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2:
            raise OperatorError(f"mask must be 2-D, got shape {mask.shape}")
        self.mask = mask
        h, w = mask.shape
        self.domain_shape = (h, w)
        self.range_shape = (2, h, w)
        # (A^T A) is diagonal in frequency space with symmetrized mask weights
        flipped = np.roll(mask[::-1, ::-1], (1, 1), axis=(0, 1))
        self.normal_freq_diag = 0.5 * (mask + flipped)

    def apply_complex(self, xc: np.ndarray) -> np.ndarray:
        """Masked orthonormal DFT of a complex image, as a (2, H, W) array."""
        spec = np.fft.fft2(xc, norm="ortho")
        spec[~self.mask] = 0.0
        return np.stack([spec.real, spec.imag]).astype(np.float64)

    def _apply(self, x):
        return self.apply_complex(x.astype(np.complex128))

    def _adjoint(self, y):
        spec = (y[0] + 1j * y[1]).astype(np.complex128)
        spec[~self.mask] = 0.0
        return np.fft.ifft2(spec, norm="ortho").real.copy()

    def opnorm(self):
        return 1.0 if self.mask.any() else 0.0

    def solve_normal(self, rhs: np.ndarray, rho: float) -> np.ndarray:
        """Exact solve of (A^T A + rho I) x = rhs via the frequency diagonal."""
        spec = np.fft.fft2(rhs, norm="ortho")
        spec /= self.normal_freq_diag + rho
        return np.fft.ifft2(spec, norm="ortho").real.copy()


def default_detector_count(h: int, w: int) -> int:
    return math.ceil(math.sqrt(2.0) * max(h, w))


class RayTransformOperator(ForwardOperator):
    """Parallel-beam ray transform with bilinear ray marching.

    Rays are marched in unit steps along their direction; each sample
    point scatters bilinear weights into the system matrix, and the
    adjoint is the exact transpose of those weights. Angles are uniform
    over 360 degrees; detector spacing is one pixel.
    """

    kind = "ray-transform"

    def __init__(self, h: int, w: int, n_views: int, n_detectors: int | None = None):
        if n_views < 1:
            raise OperatorError("need at least one view")
        n_det = n_detectors or default_detector_count(h, w)
        self.n_views = n_views
        self.n_detectors = n_det
        self.domain_shape = (h, w)
        self.range_shape = (n_views, n_det)
        self._matrix = self._build_matrix(h, w, n_views, n_det)
        self._matrix_t = self._matrix.T.tocsr()
        self._opnorm: float | None = None

    @staticmethod
    def _build_matrix(h, w, n_views, n_det):
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        t_max = math.ceil(math.hypot(h, w) / 2.0) + 1
        t = np.arange(-t_max, t_max + 1, dtype=np.float64)
        s = np.arange(n_det, dtype=np.float64) - (n_det - 1) / 2.0
        ss, tt = np.meshgrid(s, t, indexing="ij")  # (n_det, n_steps)

        rows_all, cols_all, vals_all = [], [], []
        for a in range(n_views):
            theta = 2.0 * math.pi * a / n_views
            dy, dx = math.sin(theta), math.cos(theta)
            ny, nx = dx, -dy  # detector axis, perpendicular to the ray
            py = cy + ss * ny + tt * dy
            px = cx + ss * nx + tt * dx
            i0 = np.floor(py).astype(np.int64)
            j0 = np.floor(px).astype(np.int64)
            fy = py - i0
            fx = px - j0
            ray_index = a * n_det + np.broadcast_to(
                np.arange(n_det, dtype=np.int64)[:, None], ss.shape
            )
            for di, dj, wgt in (
                (0, 0, (1 - fy) * (1 - fx)),
                (0, 1, (1 - fy) * fx),
                (1, 0, fy * (1 - fx)),
                (1, 1, fy * fx),
            ):
                ii = i0 + di
                jj = j0 + dj
                ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w) & (wgt > 0)
                rows_all.append(ray_index[ok])
                cols_all.append((ii[ok] * w + jj[ok]))
                vals_all.append(wgt[ok])
        rows = np.concatenate(rows_all)
        cols = np.concatenate(cols_all)
        vals = np.concatenate(vals_all)
        mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n_views * n_det, h * w))
        return mat.tocsr()

    def _apply(self, x):
        return (self._matrix @ x.ravel()).reshape(self.range_shape)

    def _adjoint(self, y):
        return (self._matrix_t @ y.ravel()).reshape(self.domain_shape)

    def opnorm(self):
        if self._opnorm is None:
            v = np.full(self.domain_shape[0] * self.domain_shape[1], 1.0)
            v /= np.linalg.norm(v)
            est = 0.0
            for _ in range(50):
                v = self._matrix_t @ (self._matrix @ v)
                nrm = np.linalg.norm(v)
                if nrm == 0:
                    break
                est = math.sqrt(nrm)
                v /= nrm
            self._opnorm = est
        return self._opnorm


# ---------------------------------------------------------------------------
# sampling masks


@dataclass
class SamplingMask:
    pattern: str
    rate: float
    center: int
    seed: int
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        achieved = float(self.mask.mean())
        if abs(achieved - self.rate) > 0.02:
            raise OperatorError(
                f"{self.pattern} mask reached rate {achieved:.4f}, "
                f"target {self.rate:.4f} (tolerance 0.02)"
            )

    @property
    def shape(self):
        return self.mask.shape

    def save(self, path_prefix) -> None:
        prefix = Path(path_prefix)
        jrrt.write_tensor(prefix.with_suffix(".jrrt"), self.mask.astype(np.float64))
        jrrt.write_kv(
            prefix.with_suffix(".txt"),
            {"pattern": self.pattern, "rate": self.rate, "center": self.center, "seed": self.seed},
        )

    @staticmethod
    def load(path_prefix) -> "SamplingMask":
        prefix = Path(path_prefix)
        mask = jrrt.read_tensor(prefix.with_suffix(".jrrt")) > 0.5
        meta = jrrt.read_kv(prefix.with_suffix(".txt"))
        return SamplingMask(
            pattern=meta["pattern"],
            rate=float(meta["rate"]),
            center=int(meta["center"]),
            seed=int(meta["seed"]),
            mask=mask,
        )


def _center_disc(h, w, radius):
    if radius <= 0:
        return np.zeros((h, w), dtype=bool)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return (ii - cy) ** 2 + (jj - cx) ** 2 <= radius**2


def _rasterize_spokes(h, w, n_spokes):
    mask = np.zeros((h, w), dtype=bool)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t_max = math.hypot(h, w) / 2.0
    t = np.arange(-t_max, t_max + 0.25, 0.25)
    for a in range(n_spokes):
        theta = math.pi * a / n_spokes  # spokes are full lines through DC
        dy, dx = math.sin(theta), math.cos(theta)
        ii = np.rint(cy + t * dy).astype(int)
        jj = np.rint(cx + t * dx).astype(int)
        ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        mask[ii[ok], jj[ok]] = True
    return mask


def _weighted_top_k(weights, k, rng):
    """Deterministic weighted sampling without replacement via Gumbel keys."""
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    keys = np.log(weights) + rng.gumbel(size=weights.shape)
    order = np.argsort(keys)
    return order[-k:]


def make_mask(pattern, rate, center, seed, h, w) -> SamplingMask:
    """Build a k-space sampling mask.

    radial: equiangular spokes through DC, spoke count searched so the
    achieved rate lands within tolerance. random-2d: Gaussian variable
    density, exact-count sampling, fully sampled centre disc. random-1d:
    full columns with Gaussian density, fully sampled centre band.
    """
    if pattern not in MASK_PATTERNS:
        raise OperatorError(f"unknown mask pattern {pattern!r}")
    if not 0.0 < rate <= 1.0:
        raise OperatorError(f"rate must be in (0, 1], got {rate}")
    target = int(round(rate * h * w))
    if rate >= 1.0:
        return SamplingMask(pattern, rate, center, seed, np.ones((h, w), dtype=bool))

    if pattern == "radial":
        forced = _center_disc(h, w, center)
        lo, hi = 1, 4 * max(h, w)
        best = None
        while lo <= hi:
            mid = (lo + hi) // 2
            mask = _rasterize_spokes(h, w, mid) | forced
            got = int(mask.sum())
            if best is None or abs(got - target) < abs(best[1] - target):
                best = (mask, got)
            if got < target:
                lo = mid + 1
            else:
                hi = mid - 1
        mask, got = best
        if abs(got / (h * w) - rate) > 0.02:
            raise OperatorError(
                f"radial pattern cannot reach rate {rate} on {h}x{w} "
                f"(best {got / (h * w):.4f})"
            )
        return SamplingMask(pattern, rate, center, seed, mask)

    rng = np.random.default_rng(seed)
    if pattern == "random-2d":
        forced = _center_disc(h, w, center)
        n_forced = int(forced.sum())
        if n_forced > target:
            raise OperatorError(f"centre disc ({n_forced} px) exceeds target rate {rate}")
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        r2 = (ii - cy) ** 2 + (jj - cx) ** 2
        s = 0.25 * max(h, w)
        density = np.exp(-r2 / (2 * s * s))
        free = ~forced
        weights = density[free]
        chosen = _weighted_top_k(weights, target - n_forced, rng)
        mask = forced.copy()
        free_idx = np.flatnonzero(free.ravel())
        mask.ravel()[free_idx[chosen]] = True
        return SamplingMask(pattern, rate, center, seed, mask)

    # random-1d-cartesian: full columns
    n_cols = int(round(rate * w))
    half = center // 2
    cx = (w - 1) / 2.0
    col_forced = np.abs(np.arange(w) - cx) <= half if center > 0 else np.zeros(w, dtype=bool)
    n_forced = int(col_forced.sum())
    if n_forced > n_cols:
        raise OperatorError(f"centre band ({n_forced} cols) exceeds target rate {rate}")
    density = np.exp(-((np.arange(w) - cx) ** 2) / (2 * (0.25 * w) ** 2))
    free = ~col_forced
    chosen = _weighted_top_k(density[free], n_cols - n_forced, rng)
    cols = col_forced.copy()
    cols[np.flatnonzero(free)[chosen]] = True
    mask = np.broadcast_to(cols, (h, w)).copy()
    return SamplingMask(pattern, rate, center, seed, mask)


# ---------------------------------------------------------------------------
# noise models and measurement simulation

NOISE_KINDS = ("complex-gaussian-image-domain", "gaussian-pre-projection", "none")


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    sigma: float
    seed: int

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise OperatorError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise OperatorError(f"noise sigma must be >= 0, got {self.sigma}")


def simulate_measurement(u, a_op: ForwardOperator, noise: NoiseModel) -> np.ndarray:
    """Simulate y from a ground-truth image in [0, 1].

    MRI: complex Gaussian noise added in the image domain, then the
    masked DFT. CT: real Gaussian noise added to the image, then the ray
    transform. sigma = 0 reduces to a plain application of the operator.
    """
    u = value_of(u)
    if noise.sigma == 0.0 or noise.kind == "none":
        return a_op.apply(u)
    rng = np.random.default_rng(noise.seed)
    if noise.kind == "complex-gaussian-image-domain":
        if not isinstance(a_op, MaskedFourierOperator):
            raise OperatorError("complex image-domain noise needs a masked-fourier operator")
        xi = rng.standard_normal((2,) + u.shape)
        return a_op.apply_complex(u + noise.sigma * (xi[0] + 1j * xi[1]))
    xi = rng.standard_normal(u.shape)
    return a_op.apply(u + noise.sigma * xi)
