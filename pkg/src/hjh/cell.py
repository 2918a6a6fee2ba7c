"""Cell problems on the unit torus: ergodic constants, correctors, tables.

The nonlinear cell problem couples a periodic field w with a scalar gamma:

    -tr(A(y) D^2 w) + H(Dw + p, y) = gamma,   w(node 0) = 0,

solved as one bordered Newton system (unknowns w and gamma).  Linearizing the
Hamiltonian around a converged corrector produces linear cell problems whose
solvability constants are the p-derivatives of the effective Hamiltonian; the
same bordered linear solver also powers the corrector hierarchy.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import CubicHermiteSpline, CubicSpline, RectBivariateSpline, \
    RegularGridInterpolator
from scipy.sparse.linalg import LinearOperator, lgmres

from . import spectral
from .problem import ProblemSpec

TOL_CELL_1D = 1e-10
TOL_CELL_2D = 1e-8
TOL_FD = 1e-5
TOL_CONVEX = 1e-8


class CellSolveError(RuntimeError):
    """Newton or linear-solve failure, carrying the last residual norm."""


# ---------------------------------------------------------------------------
# grid and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the unit torus: nodes j/N per axis, N even and >= 8."""

    dim: int
    N: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.N < 8 or self.N % 2 != 0:
            raise ValueError("N must be even and at least 8")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.dim

    @property
    def size(self) -> int:
        return self.N ** self.dim

    def axis(self) -> np.ndarray:
        return np.arange(self.N) / self.N

    def mesh(self) -> tuple[np.ndarray, ...]:
        if self.dim == 1:
            return (self.axis(),)
        return tuple(np.meshgrid(self.axis(), self.axis(), indexing="ij"))


@dataclass(frozen=True)
class PeriodicField:
    """Sampled periodic function; component axes lead, torus axes trail."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[-self.grid.dim:] != self.grid.shape:
            raise ValueError("trailing axes must match the torus grid")
        object.__setattr__(self, "values", vals)

    @property
    def comp_shape(self) -> tuple[int, ...]:
        return self.values.shape[:-self.grid.dim]

    def deriv(self, axis: int, order: int = 1, mode: str = "spectral") -> "PeriodicField":
        ax = axis - self.grid.dim  # torus axes are the trailing ones
        return PeriodicField(self.grid, spectral.torus_deriv(self.values, order, ax, mode))

    def eval(self, points) -> np.ndarray:
        """Trigonometric interpolation at points (last axis = dim)."""
        return spectral.trig_eval(self.values, points, self.grid.dim)

    def mean(self) -> np.ndarray:
        axes = tuple(range(-self.grid.dim, 0))
        return self.values.mean(axis=axes)


@dataclass
class CellSolution:
    """Converged cell problem: gradient parameter, ergodic constant, corrector."""

    p: np.ndarray
    gamma: float
    w: PeriodicField
    diagnostics: dict = dc_field(default_factory=dict)

    def check_bounds(self, bounds, slack: float = 1e-8) -> bool:
        p2 = float(np.sum(self.p ** 2))
        lo = bounds.alpha * p2 - bounds.alpha_prime
        hi = bounds.beta * p2 + bounds.beta_prime
        tol = slack * (1.0 + p2)
        return (lo - tol) <= self.gamma <= (hi + tol)


# ---------------------------------------------------------------------------
# shared discrete-operator plumbing
# ---------------------------------------------------------------------------

class _TorusOps:
    """Cached differentiation data for one (grid, mode) pair."""

    def __init__(self, grid: TorusGrid, mode: str):
        if mode not in spectral.TORUS_MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.grid = grid
        self.mode = mode
        self.dim = grid.dim
        if grid.dim == 1:
            base = "fd2" if mode == "fd2-upwind" else mode
            self.D1 = spectral.diff_matrix(grid.N, 1, base)
            self.D2 = spectral.diff_matrix(grid.N, 2, base)
            if mode == "fd2-upwind":
                self.Dbwd, self.Dfwd = spectral.shift_matrices(grid.N)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        """Dw with a leading component axis."""
        base = "fd2" if self.mode == "fd2-upwind" else self.mode
        return np.stack([
            spectral.torus_deriv(w, 1, axis=a - self.dim, mode=base)
            for a in range(self.dim)])

    def upwind_gradient(self, w: np.ndarray, drift: np.ndarray) -> np.ndarray:
        if self.dim != 1:
            raise NotImplementedError("upwind mode is 1D-only")
        bwd = self.Dbwd @ w
        fwd = self.Dfwd @ w
        return np.where(drift >= 0.0, bwd, fwd)[None]

    def diffusion_term(self, a_vals: np.ndarray, w: np.ndarray) -> np.ndarray:
        """tr(A(y) D^2 w) for scalar w."""
        base = "fd2" if self.mode == "fd2-upwind" else self.mode
        if self.dim == 1:
            return a_vals[0, 0] * spectral.torus_deriv(w, 2, -1, base)
        w11 = spectral.torus_deriv(w, 2, -2, base)
        w22 = spectral.torus_deriv(w, 2, -1, base)
        w12 = spectral.torus_deriv(
            spectral.torus_deriv(w, 1, -2, base), 1, -1, base)
        return a_vals[0, 0] * w11 + 2.0 * a_vals[0, 1] * w12 + a_vals[1, 1] * w22


def _fourier_inverse_multiplier(grid: TorusGrid, a_mean: np.ndarray) -> np.ndarray:
    """Spectral symbol of -tr(Abar D^2) on the grid (zero mode set to inf)."""
    k = spectral.wavenumbers(grid.N)
    if grid.dim == 1:
        sym = a_mean[0, 0] * k ** 2
    else:
        k1, k2 = np.meshgrid(k, k, indexing="ij")
        sym = a_mean[0, 0] * k1 ** 2 + 2.0 * a_mean[0, 1] * k1 * k2 + a_mean[1, 1] * k2 ** 2
    sym_safe = sym.copy()
    sym_safe.flat[0] = np.inf
    return sym_safe


# ---------------------------------------------------------------------------
# nonlinear cell solves
# ---------------------------------------------------------------------------

def _default_tol(grid: TorusGrid) -> float:
    return TOL_CELL_1D if grid.dim == 1 else TOL_CELL_2D


def _resample(w_old: np.ndarray, grid_old: TorusGrid, grid_new: TorusGrid) -> np.ndarray:
    if grid_old.N == grid_new.N:
        return w_old.copy()
    pts = np.stack(grid_new.mesh(), axis=-1)
    return spectral.trig_eval(w_old, pts, grid_old.dim)


def solve_cell(spec: ProblemSpec, grid: TorusGrid, p, init: CellSolution | None = None,
               mode: str = "spectral", tol: float | None = None, max_iter: int = 60,
               check_bounds: bool = True) -> CellSolution:
    """Solve the nonlinear cell problem; returns the ergodic constant and corrector.

    A damped bordered Newton iteration on (w, gamma) with the normalization
    w(node 0) = 0.  Initial guess w = 0, gamma = mean H(p, .) unless a warm
    start is supplied (resampled if its grid differs).
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.size != spec.dim:
        raise ValueError("p has wrong dimension")
    tol = _default_tol(grid) if tol is None else tol
    ops = _TorusOps(grid, mode)
    mesh = grid.mesh()
    a_vals = spec.diffusion.matrix_values(mesh)
    H = spec.hamiltonian
    p_bc = p.reshape((spec.dim,) + (1,) * grid.dim)

    if init is not None:
        w = _resample(init.w.values, init.w.grid, grid)
        w = w - w.flat[0]
        gamma = float(init.gamma)
    else:
        w = np.zeros(grid.shape)
        gamma = float(np.mean(H.value(np.broadcast_to(p_bc, (spec.dim,) + grid.shape), mesh)))

    def residual(wv, gv):
        if mode == "fd2-upwind":
            drift = H.grad(ops.gradient(wv) + p_bc, mesh)
            grad_up = ops.upwind_gradient(wv, drift[0])
            return -ops.diffusion_term(a_vals, wv) + H.value(grad_up + p_bc, mesh) - gv
        return -ops.diffusion_term(a_vals, wv) + H.value(ops.gradient(wv) + p_bc, mesh) - gv

    res = residual(w, gamma)
    res_norm = float(np.abs(res).max())
    best = res_norm
    stall = 0
    iters = 0
    polish_left = 3
    solve_2d = grid.dim == 2

    while iters < max_iter:
        if res_norm <= tol:
            # polish: extra undamped steps toward the quadratic-convergence
            # floor, so warm-started solves land on the same answer to
            # roundoff regardless of their starting point
            if polish_left == 0:
                break
            polish_left -= 1
            if solve_2d:
                dw, dgamma = _newton_step_2d(ops, a_vals, H, p_bc, w, res, mesh, tol)
            else:
                dw, dgamma = _newton_step_1d(ops, a_vals, H, p_bc, w, res, mesh, mode)
            r_try = residual(w + dw, gamma + dgamma)
            n_try = float(np.abs(r_try).max())
            iters += 1
            if n_try < 0.25 * res_norm:
                w, gamma, res, res_norm = w + dw, gamma + dgamma, r_try, n_try
                best = min(best, res_norm)
                continue
            break
        if solve_2d:
            dw, dgamma = _newton_step_2d(ops, a_vals, H, p_bc, w, res, mesh, tol)
        else:
            dw, dgamma = _newton_step_1d(ops, a_vals, H, p_bc, w, res, mesh, mode)
        step = 1.0
        accepted = False
        for _ in range(9):
            w_try = w + step * dw
            g_try = gamma + step * dgamma
            r_try = residual(w_try, g_try)
            n_try = float(np.abs(r_try).max())
            if n_try <= (1.0 - 1e-4 * step) * res_norm or n_try <= tol:
                accepted = True
                break
            step *= 0.5
        iters += 1
        if not accepted:
            stall += 1
            if stall >= 2:
                break
            continue
        w, gamma, res, res_norm = w_try, g_try, r_try, n_try
        if res_norm > 0.5 * best:
            stall += 1
            if stall >= 3:
                break  # stagnating at the roundoff floor
        else:
            stall = 0
        best = min(best, res_norm)

    if res_norm > tol:
        raise CellSolveError(
            f"cell Newton stalled at residual {res_norm:.3e} (tol {tol:.1e}, "
            f"p={p.tolist()}, N={grid.N}, mode={mode})")

    w = w - w.flat[0]
    w.flat[0] = 0.0
    sol = CellSolution(p, float(gamma), PeriodicField(grid, w),
                       {"iterations": iters, "residual": res_norm, "mode": mode})
    if check_bounds and not sol.check_bounds(spec.bounds):
        raise CellSolveError(
            f"ergodic constant {gamma:.6f} violates the growth bounds at p={p.tolist()}")
    return sol


def _newton_step_1d(ops, a_vals, H, p_bc, w, res, mesh, mode):
    N = w.size
    grad = ops.gradient(w)
    drift = H.grad(grad + p_bc, mesh)
    if mode == "fd2-upwind":
        adv = np.where(drift[0] >= 0.0, 1.0, 0.0)[:, None] * ops.Dbwd \
            + np.where(drift[0] >= 0.0, 0.0, 1.0)[:, None] * ops.Dfwd
        jac = -a_vals[0, 0][:, None] * ops.D2 + drift[0][:, None] * adv
    else:
        jac = -a_vals[0, 0][:, None] * ops.D2 + drift[0][:, None] * ops.D1
    bordered = np.zeros((N + 1, N + 1))
    bordered[:N, :N] = jac
    bordered[:N, N] = -1.0
    bordered[N, 0] = 1.0
    rhs = np.zeros(N + 1)
    rhs[:N] = -res
    rhs[N] = -w.flat[0]
    try:
        sol = np.linalg.solve(bordered, rhs)
    except np.linalg.LinAlgError as exc:
        raise CellSolveError("degenerate linearization in the bordered system") from exc
    return sol[:N], float(sol[N])


def _newton_step_2d(ops, a_vals, H, p_bc, w, res, mesh, tol):
    grid = ops.grid
    n2 = grid.size
    drift = H.grad(ops.gradient(w) + p_bc, mesh)
    a_mean = a_vals.mean(axis=(-2, -1))
    sym = _fourier_inverse_multiplier(grid, a_mean)

    def jac_action(vec):
        dw = vec[:n2].reshape(grid.shape)
        dgamma = vec[n2]
        jw = -ops.diffusion_term(a_vals, dw) \
            + np.einsum("a...,a...->...", drift, ops.gradient(dw))
        out = np.empty(n2 + 1)
        out[:n2] = (jw - dgamma).ravel()
        out[n2] = dw.mean()
        return out

    def precond(vec):
        r = vec[:n2].reshape(grid.shape)
        rho = vec[n2]
        dgamma = -float(r.mean())
        r_tilde = r + dgamma
        hat = np.fft.fftn(r_tilde) / sym
        hat.flat[0] = 0.0
        dw = np.real(np.fft.ifftn(hat)) + rho
        out = np.empty(n2 + 1)
        out[:n2] = dw.ravel()
        out[n2] = dgamma
        return out

    A = LinearOperator((n2 + 1, n2 + 1), matvec=jac_action)
    M = LinearOperator((n2 + 1, n2 + 1), matvec=precond)
    rhs = np.empty(n2 + 1)
    rhs[:n2] = -res.ravel()
    rhs[n2] = 0.0
    sol, info = lgmres(A, rhs, M=M, rtol=1e-8, atol=0.05 * tol, maxiter=400)
    if info != 0:
        raise CellSolveError(f"Krylov solve failed to converge (info={info})")
    return sol[:n2].reshape(grid.shape), float(sol[n2])


def solve_cell_discounted(spec: ProblemSpec, grid: TorusGrid, p, delta: float,
                          mode: str = "spectral", tol: float | None = None,
                          max_iter: int = 60):
    """Discounted approximation: -tr(A D^2 w) + H(Dw + p, y) + delta*w = 0.

    Returns (w_delta: PeriodicField, diagnostics).  As delta -> 0 the product
    -delta * w_delta converges to the ergodic constant.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    tol = _default_tol(grid) if tol is None else tol
    ops = _TorusOps(grid, mode)
    mesh = grid.mesh()
    a_vals = spec.diffusion.matrix_values(mesh)
    H = spec.hamiltonian
    p_bc = p.reshape((spec.dim,) + (1,) * grid.dim)

    w = np.full(grid.shape,
                -float(np.mean(H.value(np.broadcast_to(p_bc, (spec.dim,) + grid.shape),
                                       mesh))) / delta)

    def residual(wv):
        return -ops.diffusion_term(a_vals, wv) + H.value(ops.gradient(wv) + p_bc, mesh) \
            + delta * wv

    def eff_tol(wv):
        # the attainable floor scales with the iterate, whose size grows ~1/delta
        return tol * (1.0 + float(np.abs(wv).max()))

    res = residual(w)
    res_norm = float(np.abs(res).max())
    iters = 0
    while res_norm > eff_tol(w) and iters < max_iter:
        if grid.dim == 1:
            drift = H.grad(ops.gradient(w) + p_bc, mesh)
            jac = -a_vals[0, 0][:, None] * ops.D2 + drift[0][:, None] * ops.D1 \
                + delta * np.eye(grid.N)
            dw = np.linalg.solve(jac, -res)
        else:
            dw = _discounted_step_2d(ops, a_vals, H, p_bc, w, res, delta, mesh, tol)
        step = 1.0
        accepted = False
        for _ in range(9):
            w_try = w + step * dw
            r_try = residual(w_try)
            n_try = float(np.abs(r_try).max())
            if n_try <= (1.0 - 1e-4 * step) * res_norm or n_try <= eff_tol(w_try):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        w, res, res_norm = w_try, r_try, n_try
        iters += 1
    if res_norm > eff_tol(w):
        raise CellSolveError(
            f"discounted Newton did not reach tol: residual {res_norm:.3e}")
    return PeriodicField(grid, w), {"iterations": iters, "residual": res_norm,
                                    "delta": delta, "mode": mode}


def _discounted_step_2d(ops, a_vals, H, p_bc, w, res, delta, mesh, tol):
    grid = ops.grid
    drift = H.grad(ops.gradient(w) + p_bc, mesh)
    a_mean = a_vals.mean(axis=(-2, -1))
    sym = _fourier_inverse_multiplier(grid, a_mean)

    def action(vec):
        dw = vec.reshape(grid.shape)
        out = -ops.diffusion_term(a_vals, dw) \
            + np.einsum("a...,a...->...", drift, ops.gradient(dw)) + delta * dw
        return out.ravel()

    def precond(vec):
        r = vec.reshape(grid.shape)
        hat = np.fft.fftn(r)
        denom = sym.copy()
        denom.flat[0] = delta
        hat = hat / np.where(np.isinf(denom), delta, denom + delta)
        return np.real(np.fft.ifftn(hat)).ravel()

    A = LinearOperator((grid.size, grid.size), matvec=action)
    M = LinearOperator((grid.size, grid.size), matvec=precond)
    sol, info = lgmres(A, -res.ravel(), M=M, rtol=1e-8, atol=0.05 * tol, maxiter=400)
    if info != 0:
        raise CellSolveError(f"Krylov solve failed to converge (info={info})")
    return sol.reshape(grid.shape)


# ---------------------------------------------------------------------------
# linear cell problems
# ---------------------------------------------------------------------------

class LinearCellOperator:
    """Reusable bordered solver for -tr(A D^2 v) + B.(Dv + p) + source = gamma.

    The factorization depends only on (A, B); many right-hand sides (stacked
    p columns and sources) are solved against it.  Normalization v(node 0) = 0.
    """

    def __init__(self, grid: TorusGrid, a_vals: np.ndarray, b_vals: np.ndarray,
                 mode: str = "spectral", tol: float | None = None):
        self.grid = grid
        self.mode = mode
        self.tol = _default_tol(grid) if tol is None else tol
        self.a_vals = np.asarray(a_vals, dtype=float)
        self.b_vals = np.asarray(b_vals, dtype=float)
        if self.b_vals.shape != (grid.dim,) + grid.shape:
            raise ValueError("drift field must have shape (dim, *grid)")
        self.ops = _TorusOps(grid, mode)
        if grid.dim == 1:
            N = grid.N
            jac = -self.a_vals[0, 0][:, None] * self.ops.D2 \
                + self.b_vals[0][:, None] * self.ops.D1
            bordered = np.zeros((N + 1, N + 1))
            bordered[:N, :N] = jac
            bordered[:N, N] = -1.0
            bordered[N, 0] = 1.0
            try:
                self._lu = sla.lu_factor(bordered)
            except sla.LinAlgError as exc:
                raise CellSolveError("singular bordered linear system") from exc
        else:
            self._sym = _fourier_inverse_multiplier(
                grid, self.a_vals.mean(axis=(-2, -1)))

    def _solve_columns(self, rhs_fields: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve L v - gamma = rhs per column; returns (gamma (m,), v (m, *grid))."""
        m = rhs_fields.shape[0]
        if self.grid.dim == 1:
            N = self.grid.N
            rhs = np.zeros((N + 1, m))
            rhs[:N] = rhs_fields.reshape(m, N).T
            sol = sla.lu_solve(self._lu, rhs)
            v = sol[:N].T.reshape((m,) + self.grid.shape)
            gamma = sol[N]
            return gamma, v
        gammas = np.empty(m)
        vs = np.empty((m,) + self.grid.shape)
        n2 = self.grid.size
        drift = self.b_vals

        def action(vec):
            dv = vec[:n2].reshape(self.grid.shape)
            dg = vec[n2]
            out = np.empty(n2 + 1)
            lv = -self.ops.diffusion_term(self.a_vals, dv) \
                + np.einsum("a...,a...->...", drift, self.ops.gradient(dv))
            out[:n2] = (lv - dg).ravel()
            out[n2] = dv.mean()
            return out

        def precond(vec):
            r = vec[:n2].reshape(self.grid.shape)
            rho = vec[n2]
            dg = -float(r.mean())
            hat = np.fft.fftn(r + dg) / self._sym
            hat.flat[0] = 0.0
            dv = np.real(np.fft.ifftn(hat)) + rho
            out = np.empty(n2 + 1)
            out[:n2] = dv.ravel()
            out[n2] = dg
            return out

        A = LinearOperator((n2 + 1, n2 + 1), matvec=action)
        M = LinearOperator((n2 + 1, n2 + 1), matvec=precond)
        for j in range(m):
            rhs = np.empty(n2 + 1)
            rhs[:n2] = rhs_fields[j].ravel()
            rhs[n2] = 0.0
            sol, info = lgmres(A, rhs, M=M, rtol=1e-10, atol=0.02 * self.tol,
                               maxiter=600)
            if info != 0:
                raise CellSolveError(f"linear cell Krylov failed (info={info})")
            v = sol[:n2].reshape(self.grid.shape)
            v = v - v.flat[0]
            v.flat[0] = 0.0
            vs[j] = v
            gammas[j] = sol[n2]
        return gammas, vs

    def solve(self, p_vec=None, source=None) -> tuple[np.ndarray, np.ndarray]:
        """Solve for stacked right-hand sides.

        p_vec: (dim,) or (m, dim) constant gradient shifts (default zero);
        source: (*grid) or (m, *grid) source fields (default zero).
        Returns (gamma, v) with leading axis m when the inputs are stacked.
        """
        dim = self.grid.dim
        stacked = False
        if p_vec is None and source is None:
            raise ValueError("provide p_vec and/or source")
        if p_vec is not None:
            p_arr = np.asarray(p_vec, dtype=float)
            if p_arr.ndim == 2:
                stacked = True
            else:
                p_arr = p_arr.reshape(1, dim)
        else:
            p_arr = None
        if source is not None:
            s_arr = np.asarray(source, dtype=float)
            if s_arr.ndim == dim + 1:
                stacked = True
            else:
                s_arr = s_arr.reshape((1,) + self.grid.shape)
        else:
            s_arr = None
        m = max(p_arr.shape[0] if p_arr is not None else 1,
                s_arr.shape[0] if s_arr is not None else 1)
        rhs = np.zeros((m,) + self.grid.shape)
        if p_arr is not None:
            if p_arr.shape[0] == 1:
                p_arr = np.broadcast_to(p_arr, (m, dim))
            rhs -= np.einsum("ja,a...->j...", p_arr, self.b_vals)
        if s_arr is not None:
            rhs -= s_arr
        gamma, v = self._solve_columns(rhs)
        if self.grid.dim == 1:
            v = v - v[:, :1]
            v[:, 0] = 0.0
        # residual audit: the direct solve should sit at the roundoff floor
        res = self._residual(gamma, v, p_arr, s_arr)
        if res > max(self.tol, 1e-9):
            raise CellSolveError(f"linear cell residual {res:.3e} above tolerance")
        if not stacked:
            return float(gamma[0]), v[0]
        return gamma, v

    def _residual(self, gamma, v, p_arr, s_arr) -> float:
        worst = 0.0
        for j in range(v.shape[0]):
            grad = self.ops.gradient(v[j])
            if p_arr is not None:
                grad = grad + p_arr[j].reshape((self.grid.dim,) + (1,) * self.grid.dim)
            r = -self.ops.diffusion_term(self.a_vals, v[j]) \
                + np.einsum("a...,a...->...", self.b_vals, grad) - gamma[j]
            if s_arr is not None:
                r = r + s_arr[j]
            worst = max(worst, float(np.abs(r).max()))
        return worst


def solve_linear_cell(A_field, B_field, source=None, p_vec=None,
                      mode: str = "spectral", tol: float | None = None):
    """One-shot linear cell solve; see LinearCellOperator for the conventions."""
    if isinstance(B_field, PeriodicField):
        grid, b_vals = B_field.grid, B_field.values
    else:
        raise ValueError("B_field must be a PeriodicField with a leading component axis")
    a_vals = A_field.values if isinstance(A_field, PeriodicField) else np.asarray(A_field)
    if a_vals.shape[-grid.dim:] != grid.shape or a_vals.ndim != grid.dim + 2:
        raise ValueError("A_field must be matrix-valued on the grid")
    src = source.values if isinstance(source, PeriodicField) else source
    op = LinearCellOperator(grid, a_vals, b_vals, mode, tol)
    gamma, v = op.solve(p_vec=p_vec, source=src)
    if np.ndim(gamma) == 0:
        return gamma, PeriodicField(grid, v)
    return gamma, PeriodicField(grid, v)


# ---------------------------------------------------------------------------
# effective Hamiltonian table
# ---------------------------------------------------------------------------

class EffectiveTable:
    """Tabulated effective Hamiltonian with consistent interpolants.

    In 1D the value interpolant is a cubic Hermite spline through (hbar, bbar),
    so the drift evaluator is exactly the derivative of the value evaluator;
    second derivatives come from the same interpolant (difference-quotient
    accurate).  Independent bbar samples are kept for cross-checks.
    """

    def __init__(self, dim: int, p_axes, hbar, bbar, w_values, v_values,
                 grid: TorusGrid, mode: str = "spectral"):
        self.dim = dim
        self.p_axes = tuple(np.asarray(ax, dtype=float) for ax in p_axes)
        self.hbar = np.asarray(hbar, dtype=float)
        self.bbar = np.asarray(bbar, dtype=float)
        self.w_values = np.asarray(w_values, dtype=float)
        self.v_values = np.asarray(v_values, dtype=float)
        self.grid = grid
        self.mode = mode
        if dim == 1:
            p = self.p_axes[0]
            self._value_spline = CubicHermiteSpline(p, self.hbar, self.bbar[:, 0])
            self._drift_spline = self._value_spline.derivative(1)
            self._curv_spline = self._value_spline.derivative(2)
            self._w_interp = CubicSpline(p, self.w_values, axis=0)
            self._v_interp = CubicSpline(p, self.v_values, axis=0)
        else:
            p1, p2 = self.p_axes
            self._value_spline = RectBivariateSpline(p1, p2, self.hbar, kx=3, ky=3)
            self._d10 = self._value_spline.partial_derivative(1, 0)
            self._d01 = self._value_spline.partial_derivative(0, 1)
            self._d20 = self._value_spline.partial_derivative(2, 0)
            self._d11 = self._value_spline.partial_derivative(1, 1)
            self._d02 = self._value_spline.partial_derivative(0, 2)
            self._w_interp = RegularGridInterpolator(
                (p1, p2), self.w_values, method="cubic")
            self._v_interp = RegularGridInterpolator(
                (p1, p2), self.v_values, method="cubic")

    @property
    def p_box(self):
        return tuple((float(ax[0]), float(ax[-1])) for ax in self.p_axes)

    @property
    def dp(self):
        return tuple(float(ax[1] - ax[0]) for ax in self.p_axes)

    def _check_inside(self, p):
        box = self.p_box
        p = np.asarray(p, dtype=float)
        if self.dim == 1:
            lo, hi = box[0]
            if np.any(p < lo - 1e-12) or np.any(p > hi + 1e-12):
                raise ValueError(f"p outside tabulated range [{lo}, {hi}]")
        else:
            for a in range(2):
                lo, hi = box[a]
                comp = p[..., a]
                if np.any(comp < lo - 1e-12) or np.any(comp > hi + 1e-12):
                    raise ValueError(f"p component {a} outside [{lo}, {hi}]")

    def hbar_at(self, p):
        self._check_inside(p)
        if self.dim == 1:
            return self._value_spline(np.asarray(p, dtype=float))
        p = np.asarray(p, dtype=float)
        return self._value_spline(p[..., 0], p[..., 1], grid=False)

    def bbar_at(self, p):
        """Drift D_p hbar; scalar-shaped in 1D, (..., 2) in 2D."""
        self._check_inside(p)
        if self.dim == 1:
            return self._drift_spline(np.asarray(p, dtype=float))
        p = np.asarray(p, dtype=float)
        return np.stack([self._d10(p[..., 0], p[..., 1], grid=False),
                         self._d01(p[..., 0], p[..., 1], grid=False)], axis=-1)

    def d2hbar_at(self, p):
        """Second derivative of the value interpolant ((..., n, n) in 2D)."""
        self._check_inside(p)
        if self.dim == 1:
            return self._curv_spline(np.asarray(p, dtype=float))
        p = np.asarray(p, dtype=float)
        h11 = self._d20(p[..., 0], p[..., 1], grid=False)
        h12 = self._d11(p[..., 0], p[..., 1], grid=False)
        h22 = self._d02(p[..., 0], p[..., 1], grid=False)
        out = np.stack([np.stack([h11, h12], axis=-1),
                        np.stack([h12, h22], axis=-1)], axis=-2)
        return out

    def w_at(self, p) -> np.ndarray:
        self._check_inside(p)
        p = np.asarray(p, dtype=float)
        if self.dim == 1:
            return self._w_interp(p)
        out = self._w_interp(p)
        return out[0] if p.ndim == 1 else out

    def v_at(self, p) -> np.ndarray:
        self._check_inside(p)
        p = np.asarray(p, dtype=float)
        out = self._v_interp(p)
        if self.dim == 2 and p.ndim == 1:
            return out[0]
        return out

    # -- property checks ---------------------------------------------------

    def check_bounds(self, bounds) -> float:
        """Worst margin of the growth bounds over the table (>= 0 is good)."""
        if self.dim == 1:
            p2 = self.p_axes[0] ** 2
        else:
            p1, p2ax = np.meshgrid(*self.p_axes, indexing="ij")
            p2 = p1 ** 2 + p2ax ** 2
        lo = bounds.alpha * p2 - bounds.alpha_prime
        hi = bounds.beta * p2 + bounds.beta_prime
        return float(min((self.hbar - lo).min(), (hi - self.hbar).min()))

    def check_convexity(self) -> float:
        """Worst midpoint-convexity violation over grid pairs (<= 0 is good)."""
        worst = -np.inf
        if self.dim == 1:
            h = self.hbar
            P = h.size
            for d in range(1, (P - 1) // 2 + 1):
                viol = h[d:P - d] - 0.5 * (h[:P - 2 * d] + h[2 * d:])
                worst = max(worst, float(viol.max()))
            return worst
        h = self.hbar
        P1, P2 = h.shape
        for d1 in range(0, (P1 - 1) // 2 + 1):
            for d2 in range(0, (P2 - 1) // 2 + 1):
                if d1 == 0 and d2 == 0:
                    continue
                mid = h[d1:P1 - d1, d2:P2 - d2]
                lo = h[:P1 - 2 * d1, :P2 - 2 * d2]
                hi = h[2 * d1:, 2 * d2:]
                worst = max(worst, float((mid - 0.5 * (lo + hi)).max()))
                if d1 > 0 and d2 > 0:  # the other diagonal
                    lo2 = h[2 * d1:, :P2 - 2 * d2]
                    hi2 = h[:P1 - 2 * d1, 2 * d2:]
                    worst = max(worst, float((mid - 0.5 * (lo2 + hi2)).max()))
        return worst

    def check_gradient_consistency(self) -> float:
        """Max |bbar - central FD of hbar| / (1 + |p|) over interior nodes."""
        worst = 0.0
        if self.dim == 1:
            p = self.p_axes[0]
            dp = p[1] - p[0]
            fd = (self.hbar[2:] - self.hbar[:-2]) / (2.0 * dp)
            err = np.abs(self.bbar[1:-1, 0] - fd) / (1.0 + np.abs(p[1:-1]))
            return float(err.max())
        p1, p2 = np.meshgrid(*self.p_axes, indexing="ij")
        norm = 1.0 + np.sqrt(p1 ** 2 + p2 ** 2)
        dp1, dp2 = self.dp
        fd1 = (self.hbar[2:, :] - self.hbar[:-2, :]) / (2.0 * dp1)
        worst = float((np.abs(self.bbar[1:-1, :, 0] - fd1) / norm[1:-1, :]).max())
        fd2 = (self.hbar[:, 2:] - self.hbar[:, :-2]) / (2.0 * dp2)
        worst = max(worst, float((np.abs(self.bbar[:, 1:-1, 1] - fd2) / norm[:, 1:-1]).max()))
        return worst


def effective_table(spec: ProblemSpec, grid: TorusGrid, p_box, dp,
                    mode: str = "spectral", tol: float | None = None) -> EffectiveTable:
    """Tabulate hbar, bbar = D_p hbar, and the corrector fields over a p-box.

    Nodes are swept with continuation (each solve warm-starts from its
    neighbor).  At each node the drift linearization B(y) = D_qH(Dw + p, y)
    feeds a linear cell solve whose solvability constants are bbar.
    """
    box = np.atleast_2d(np.asarray(p_box, dtype=float))
    if box.shape != (spec.dim, 2):
        raise ValueError("p_box must give (lo, hi) per dimension")
    dp_arr = np.broadcast_to(np.asarray(dp, dtype=float), (spec.dim,))
    axes = []
    for a in range(spec.dim):
        span = box[a, 1] - box[a, 0]
        count = int(round(span / dp_arr[a])) + 1
        if count < 4:
            raise ValueError("p-box too small for cubic interpolation (need >= 4 nodes)")
        axes.append(np.linspace(box[a, 0], box[a, 1], count))
    mesh = grid.mesh()
    a_vals = spec.diffusion.matrix_values(mesh)
    H = spec.hamiltonian
    eye = np.eye(spec.dim)

    def node_solve(p, init):
        sol = solve_cell(spec, grid, p, init=init, mode=mode, tol=tol)
        grad_w = np.stack([
            spectral.torus_deriv(sol.w.values, 1, ax - spec.dim,
                                 "fd2" if mode == "fd2-upwind" else mode)
            for ax in range(spec.dim)])
        p_bc = np.asarray(p).reshape((spec.dim,) + (1,) * spec.dim)
        b_vals = H.grad(grad_w + p_bc, mesh)
        op = LinearCellOperator(grid, a_vals, b_vals, mode, tol)
        gam, v = op.solve(p_vec=eye)
        return sol, gam, v

    if spec.dim == 1:
        p_nodes = axes[0]
        P = p_nodes.size
        hbar = np.empty(P)
        bbar = np.empty((P, 1))
        w_vals = np.empty((P,) + grid.shape)
        v_vals = np.empty((P, 1) + grid.shape)
        init = None
        for i, p in enumerate(p_nodes):
            try:
                sol, gam, v = node_solve(np.array([p]), init)
            except CellSolveError as exc:
                raise CellSolveError(f"table node p={p:.4f}: {exc}") from exc
            init = sol
            hbar[i] = sol.gamma
            bbar[i] = gam
            w_vals[i] = sol.w.values
            v_vals[i] = v
        return EffectiveTable(1, (p_nodes,), hbar, bbar, w_vals, v_vals, grid, mode)

    p1, p2 = axes
    P1, P2 = p1.size, p2.size
    hbar = np.empty((P1, P2))
    bbar = np.empty((P1, P2, 2))
    w_vals = np.empty((P1, P2) + grid.shape)
    v_vals = np.empty((P1, P2, 2) + grid.shape)
    row_init = None
    for i in range(P1):
        cols = range(P2) if i % 2 == 0 else range(P2 - 1, -1, -1)
        init = row_init
        for j in cols:
            p = np.array([p1[i], p2[j]])
            try:
                sol, gam, v = node_solve(p, init)
            except CellSolveError as exc:
                raise CellSolveError(
                    f"table node p=({p[0]:.4f},{p[1]:.4f}): {exc}") from exc
            init = sol
            if j == (0 if i % 2 == 0 else P2 - 1):
                row_init = sol  # snake turn-around seed for the next row
            hbar[i, j] = sol.gamma
            bbar[i, j] = gam
            w_vals[i, j] = sol.w.values
            v_vals[i, j] = v
    return EffectiveTable(2, (p1, p2), hbar, bbar, w_vals, v_vals, grid, mode)


# ---------------------------------------------------------------------------
# independent eigenvalue oracle
# ---------------------------------------------------------------------------

def hbar_via_eigenvalue(V, p: float, N: int = 256) -> float:
    """Cross-check for A = 1, H = q^2 + V(y) in 1D via an exponential substitution.

    With phi = e^{-w} > 0 periodic, u = e^{-p y} phi satisfies the linear
    equation u'' + V u = gamma u, so in the periodic frame phi the ergodic
    constant is the eigenvalue of maximal real part (positive eigenvector) of

        phi'' - 2 p phi' + (p^2 + V(y)) phi  =  gamma phi.

    Discretized with 4th-order periodic finite differences — deliberately a
    different code path from the spectral cell solver.
    """
    h = 1.0 / N
    eye = np.eye(N)
    roll = lambda k: np.roll(eye, k, axis=1)  # row i picks f_{i+k}
    d1 = (-roll(2) + 8.0 * roll(1) - 8.0 * roll(-1) + roll(-2)) / (12.0 * h)
    d2 = (-roll(2) + 16.0 * roll(1) - 30.0 * eye + 16.0 * roll(-1) - roll(-2)) / (12.0 * h * h)
    y = np.arange(N) / N
    pot = np.asarray(V(y), dtype=float) if callable(V) else np.full(N, float(V))
    M = d2 - 2.0 * p * d1 + np.diag(p * p + pot)
    lam, vecs = sla.eig(M)
    idx = int(np.argmax(lam.real))
    vec = vecs[:, idx]
    vec = vec / vec[np.argmax(np.abs(vec))]
    if np.abs(vec.imag).max() > 1e-8 or vec.real.min() < -1e-8:
        raise RuntimeError("principal eigenvector is not positive; oracle unreliable")
    return float(lam[idx].real)
