"""Corrector hierarchy, two-scale expansion, and residual assembly.

The expansion eta(x, t) = sum_k eps^k w_k(x, t, x/eps) is built level by
level on a slow space-time grid crossed with a fast torus grid:

    w_0 = u0(x, t)                      (effective solution, exact via rays)
    w_1 = phi_1 + ubar_1,               phi_1(x, t, y) the cell corrector at
                                        p = Du0(x, t)
    w_k = phi_k + chi . D ubar_{k-1} + ubar_k        (k >= 2)

where chi solves the linearized cell problem with unit gradient columns,
phi_{k+1} absorbs the level-k source f_k, and each ubar_k rides the same
characteristics as u0 with forcing fbar_k (the solvability constant of f_k).

Bookkeeping discipline: every slow derivative of a stored field is taken with
the same fixed fourth-order difference matrices wherever it appears, and
every time derivative is routed through the equation that defines it
(du0/dt := -gamma at each node, dubar_k/dt := -bbar . D ubar_k - fbar_k).
The residual of the expansion in the original equation then telescopes
discretely: all orders below eps^m cancel to solver tolerance, and the
reported residual is the genuine leftover, not discretization noise.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import (CubicSpline, RectBivariateSpline,
                               RegularGridInterpolator)

from . import spectral
from .cell import (CellSolveError, EffectiveTable, LinearCellOperator, TorusGrid,
                   solve_cell)
from .effective import eval_u0, invert_characteristics, solve_effective
from .problem import InitialData, ProblemSpec


# ---------------------------------------------------------------------------
# slow grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlowGrid:
    """Uniform slow axes: per-dimension space nodes plus one time axis.

    The space axes extend beyond the evaluation window so that characteristic
    feet and difference stencils of window nodes never leave the grid.
    """

    x_axes: tuple[np.ndarray, ...]
    t_axis: np.ndarray
    window: np.ndarray

    @classmethod
    def from_window(cls, window, T: float, hx: float, ht: float, pad: float):
        window = np.atleast_2d(np.asarray(window, dtype=float))
        axes = []
        for a in range(window.shape[0]):
            lo, hi = window[a, 0] - pad, window[a, 1] + pad
            n = max(int(np.ceil((hi - lo) / hx)) + 1, 8)
            axes.append(np.linspace(lo, hi, n))
        nt = max(int(np.ceil(T / ht)) + 1, 6)
        return cls(tuple(axes), np.linspace(0.0, float(T), nt), window)

    @property
    def dim(self) -> int:
        return len(self.x_axes)

    @property
    def hx(self) -> tuple[float, ...]:
        return tuple(float(ax[1] - ax[0]) for ax in self.x_axes)

    @property
    def ht(self) -> float:
        return float(self.t_axis[1] - self.t_axis[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.size for ax in self.x_axes) + (self.t_axis.size,)

    def window_masks(self) -> tuple[np.ndarray, ...]:
        return tuple((ax >= self.window[a, 0] - 1e-12) & (ax <= self.window[a, 1] + 1e-12)
                     for a, ax in enumerate(self.x_axes))


def _lagrange_weights(nodes: np.ndarray, x) -> np.ndarray:
    """Cubic Lagrange weights; nodes (..., 4), x broadcastable to nodes[..., 0]."""
    x = np.asarray(x, dtype=float)[..., None]
    diff = x - nodes
    w = np.empty(np.broadcast_shapes(nodes.shape, diff.shape))
    for l in range(4):
        others = [r for r in range(4) if r != l]
        num = np.prod(diff[..., others], axis=-1)
        den = np.prod(nodes[..., l:l + 1] - nodes[..., others], axis=-1)
        w[..., l] = num / den
    return w


# ---------------------------------------------------------------------------
# hierarchy
# ---------------------------------------------------------------------------

class Hierarchy:
    """All corrector levels up to m_max on one slow grid; see build_hierarchy."""

    def __init__(self, spec: ProblemSpec, initial: InitialData, table: EffectiveTable,
                 slow: SlowGrid, ygrid: TorusGrid, fan, m_max: int, mode: str,
                 tol: float | None):
        self.spec = spec
        self.initial = initial
        self.table = table
        self.slow = slow
        self.ygrid = ygrid
        self.fan = fan
        self.m_max = m_max
        self.mode = mode
        self.tol = tol
        self.dim = spec.dim
        self.yshape = ygrid.shape
        self.diagnostics: dict = {}
        # populated by build_hierarchy:
        self.P = None           # (n, *S) exact Du0 at nodes
        self.gamma = None       # (*S) cell constants
        self.bbar_node = None   # (n, *S) linearized constants (chi solves)
        self.B = None           # (n, *S, *y) drift field D_qH(W0, y)
        self.chi = None         # (n, *S, *y)
        self.phi = {}           # k -> (*S, *y), k = 1..m_max
        self.wt = {}            # k -> (*S, *y) combined fast part of w_k
        self.dtwt = {}
        self.dxwt = {}          # k -> (n, *S, *y)
        self.dywt = {}          # k -> (n, *S, *y)
        self.dyywt = {}         # k -> (n, n, *S, *y)
        self.dxdywt = {}        # k -> (n, n, *S, *y): slow axis a, fast axis b
        self.dxxwt = {}         # k -> (n, n, *S, *y)
        self.ubar = {}          # k -> (*S), k = 0..m_max
        self.dubar = {}         # k -> (n, *S)
        self.dtubar = {}        # k -> (*S)
        self.dxxubar = {}       # k -> (n, n, *S)
        self.fbar = {}          # k -> (*S)
        self.f = {}             # k -> (*S, *y)
        self.W = {}             # k -> (n, *S, *y), untruncated, k = 0..m_max-1

    # -- slow differentiation (fixed matrices, shared by every consumer) ----

    def _dx(self, arr: np.ndarray, a: int, lead: int) -> np.ndarray:
        return spectral.slow_deriv(arr, self.slow.hx[a], 1, axis=lead + a)

    def _dxx(self, arr: np.ndarray, a: int, b: int, lead: int) -> np.ndarray:
        if a == b:
            return spectral.slow_deriv(arr, self.slow.hx[a], 2, axis=lead + a)
        return self._dx(self._dx(arr, b, lead), a, lead)

    def _dt(self, arr: np.ndarray, lead: int) -> np.ndarray:
        return spectral.slow_deriv(arr, self.slow.ht, 1, axis=lead + self.dim)

    def _dy(self, arr: np.ndarray, b: int, order: int = 1) -> np.ndarray:
        return spectral.torus_deriv(arr, order, axis=b - self.dim, mode=self._y_mode)

    @property
    def _y_mode(self) -> str:
        return "fd2" if self.mode == "fd2-upwind" else self.mode

    # -- stored-array assembly helpers -------------------------------------

    def _wt_assemble(self, k: int) -> np.ndarray:
        """w-tilde_k = phi_k (+ chi . D ubar_{k-1} for k >= 2)."""
        if k == 1:
            return self.phi[1]
        du = self.dubar[k - 1]
        yexp = (None,) * self.dim
        out = self.phi[k] + np.sum(self.chi * du[(slice(None), Ellipsis) + yexp], axis=0)
        return out

    def _derive_level(self, k: int):
        """All stored derivatives of w-tilde_k."""
        n = self.dim
        wt = self.wt[k]
        self.dtwt[k] = self._dt(wt, 0)
        self.dxwt[k] = np.stack([self._dx(wt, a, 0) for a in range(n)])
        self.dywt[k] = np.stack([self._dy(wt, b) for b in range(n)])
        self.dyywt[k] = np.stack([
            np.stack([self._dy(self.dywt[k][b1], b2) for b2 in range(n)])
            for b1 in range(n)])
        self.dxdywt[k] = np.stack([
            np.stack([self._dx(self.dywt[k][b], a, 0) for b in range(n)])
            for a in range(n)])
        dxx = np.empty((n, n) + wt.shape)
        for a in range(n):
            for b in range(a, n):
                dxx[a, b] = self._dxx(wt, a, b, 0)
                if b != a:
                    dxx[b, a] = dxx[a, b]
        self.dxxwt[k] = dxx

    def _dxx_ubar(self, k: int) -> np.ndarray:
        n = self.dim
        ub = self.ubar[k]
        out = np.empty((n, n) + ub.shape)
        for a in range(n):
            for b in range(a, n):
                out[a, b] = self._dxx(ub, a, b, 0)
                if b != a:
                    out[b, a] = out[a, b]
        return out

    def _dxx_w(self, k: int) -> np.ndarray:
        """D_x^2 w_k = D_x^2 w-tilde_k + D_x^2 ubar_k, broadcast over y."""
        yexp = (None,) * self.dim
        slow_part = self.dxxubar[k][(Ellipsis,) + yexp]
        if k == 0:
            return np.broadcast_to(slow_part, (self.dim, self.dim) + self.slow.shape
                                   + self.yshape)
        return self.dxxwt[k] + slow_part

    def _W_assemble(self, k: int) -> np.ndarray:
        """Untruncated W_k = D_y w_{k+1} + D_x w_k (needs level k+1 fast part)."""
        yexp = (None,) * self.dim
        if k == 0:
            return self.dywt[1] + self.P[(Ellipsis,) + yexp]
        return self.dywt[k + 1] + self.dxwt[k] + self.dubar[k][(Ellipsis,) + yexp]

    def _assemble_f(self, k: int, a_y: np.ndarray, B2) -> np.ndarray:
        """Level-k source f_k from the stored arrays."""
        f = self.dtwt[k].copy()
        f += np.einsum("a...,a...->...", self.B, self.dxwt[k])
        f -= 2.0 * np.einsum("ab...,ab...->...", a_y, self.dxdywt[k])
        f -= np.einsum("ab...,ab...->...", a_y, self._dxx_w(k - 1))
        for i in range(1, k):
            f += 0.5 * np.einsum("ab...,a...,b...->...", B2, self.W[i], self.W[k - i])
        return f

    # -- transport along the shared characteristics -------------------------

    def _transport(self, fbar: np.ndarray, ic: np.ndarray) -> np.ndarray:
        """ubar(ray(t), t) = ic(ray(0)) - int_0^t fbar(ray(s), s) ds (Simpson).

        The initial value ic(x) = -<fast part of this level at t=0> makes the
        expansion match the plain initial data up to purely oscillating,
        mean-free terms, which the initial layer removes; without it a
        constant offset of the corrector's cell average would persist.
        """
        ts = self.slow.t_axis
        ht = self.slow.ht
        if self.dim == 1:
            xs = self.slow.x_axes[0]
            spline = RectBivariateSpline(xs, ts, fbar, kx=3, ky=3)
            ic_spline = CubicSpline(xs, ic)
            out = np.zeros(fbar.shape)
            out[:, 0] = ic
            for j in range(1, ts.size):
                t = float(ts[j])
                x0 = invert_characteristics(self.fan, xs, t)[0]
                sp = self.fan.speed_at(x0)[0]
                nseg = 2 * max(1, int(np.ceil(t / ht)))
                s = np.linspace(0.0, t, nseg + 1)
                xi = x0[:, None] + s[None, :] * sp[:, None]
                np.clip(xi, xs[0], xs[-1], out=xi)
                vals = spline(xi.ravel(), np.broadcast_to(s, xi.shape).ravel(),
                              grid=False).reshape(xi.shape)
                wts = np.ones(nseg + 1)
                wts[1:-1:2] = 4.0
                wts[2:-1:2] = 2.0
                out[:, j] = ic_spline(np.clip(x0, xs[0], xs[-1])) \
                    - (t / (3.0 * nseg)) * (vals @ wts)
            return out
        x1, x2 = self.slow.x_axes
        interp = RegularGridInterpolator((x1, x2, ts), fbar, method="cubic")
        ic_interp = RegularGridInterpolator((x1, x2), ic, method="cubic")
        out = np.zeros(fbar.shape)
        out[:, :, 0] = ic
        mesh = np.meshgrid(x1, x2, indexing="ij")
        for j in range(1, ts.size):
            t = float(ts[j])
            x0 = invert_characteristics(self.fan, tuple(mesh), t)
            sp = self.fan.speed_at(x0)
            nseg = 2 * max(1, int(np.ceil(t / ht)))
            s = np.linspace(0.0, t, nseg + 1)
            pts = np.empty(mesh[0].shape + (nseg + 1, 3))
            feet = np.empty(mesh[0].shape + (2,))
            for a in range(2):
                lo, hi = self.slow.x_axes[a][0], self.slow.x_axes[a][-1]
                ray = x0[a][..., None] + s * sp[a][..., None]
                pts[..., a] = np.clip(ray, lo, hi)
                feet[..., a] = np.clip(x0[a], lo, hi)
            pts[..., 2] = s
            vals = interp(pts.reshape(-1, 3)).reshape(mesh[0].shape + (nseg + 1,))
            wts = np.ones(nseg + 1)
            wts[1:-1:2] = 4.0
            wts[2:-1:2] = 2.0
            out[:, :, j] = ic_interp(feet.reshape(-1, 2)).reshape(mesh[0].shape) \
                - (t / (3.0 * nseg)) * (vals @ wts)
        return out

    # -- residual assembly ---------------------------------------------------

    def _ystar_points(self, eps: float):
        """Fast coordinates x/eps at slow-space nodes, shaped to broadcast.

        Returns (coords tuple for exact evaluators, stacked points for the
        trigonometric interpolant); both broadcast against (*S) slow arrays.
        """
        coords = []
        for a, ax in enumerate(self.slow.x_axes):
            shape = [1] * (self.dim + 1)
            shape[a] = ax.size
            coords.append(np.mod(ax / eps, 1.0).reshape(shape))
        # stacked (*S_space, 1, dim) points: one fast point per slow-space node
        bshape = tuple(ax.size for ax in self.slow.x_axes) + (1,)
        pts = np.stack([np.broadcast_to(c, bshape) for c in coords], axis=-1)
        return tuple(coords), pts

    def _star(self, arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Evaluate a stored (*comp, *S, *y) array at y* per slow-space node."""
        return spectral.trig_eval(arr, pts, self.dim)

    def residual_field(self, eps: float, m: int | None = None,
                       full: bool = False):
        """Residual of eta_m in the original equation, sampled at slow nodes.

        The expansion is truncated at level m (w_{m+1} = w_{m+2} = 0); the
        Hamiltonian is evaluated exactly at the assembled gradient.  Returns
        (field restricted to window nodes, max abs), or the full-grid field
        when full=True.
        """
        m = self.m_max if m is None else int(m)
        if not 1 <= m <= self.m_max:
            raise ValueError(f"m must be in [1, {self.m_max}]")
        coords, pts = self._ystar_points(eps)
        A_star = np.asarray(self.spec.diffusion.matrix_values(coords), dtype=float)
        # time derivative of eta
        dt_eta = self.dtubar[0].copy()
        for k in range(1, m + 1):
            dt_eta += eps ** k * (self._star(self.dtwt[k], pts) + self.dtubar[k])
        # eps * Laplacian terms: sum over X_0 .. X_{m+1} with truncation
        diff = np.zeros(self.slow.shape)
        for k in range(0, m + 2):
            Xk = self._X_star(k, m, pts)
            diff += eps ** k * np.einsum("ab...,ab...->...", A_star, Xk)
        # gradient of eta and the exact Hamiltonian
        q = self._W_star(0, m, pts).copy()
        for k in range(1, m + 1):
            q += eps ** k * self._W_star(k, m, pts)
        h_val = self.spec.hamiltonian.value(q, coords)
        psi = dt_eta - diff + h_val
        if full:
            return psi
        masks = self.slow.window_masks()
        sub = psi[np.ix_(*masks)] if self.dim == 2 else psi[masks[0]]
        return sub, float(np.abs(sub).max())

    def _W_star(self, k: int, m: int, pts) -> np.ndarray:
        """W_k at y*, truncated at level m."""
        if k == 0:
            return self._star(self.dywt[1], pts) + self.P
        if k < m:
            return self._star(self.dywt[k + 1], pts) + self._star(self.dxwt[k], pts) \
                + self.dubar[k]
        return self._star(self.dxwt[m], pts) + self.dubar[m]

    def _X_star(self, k: int, m: int, pts) -> np.ndarray:
        """X_k at y*, truncated at level m."""
        S = self.slow.shape
        n = self.dim
        out = np.zeros((n, n) + S)
        if k + 1 <= m:
            out += self._star(self.dyywt[k + 1], pts)
        if 1 <= k <= m:
            out += 2.0 * self._star(self.dxdywt[k], pts)
        if k >= 1:
            j = k - 1
            if j <= m:
                if j >= 1:
                    out += self._star(self.dxxwt[j], pts)
                out += self.dxxubar[j]
        return out

    def residual_identity(self, eps: float, m: int | None = None) -> np.ndarray:
        """Residual via the order-m regrouping (quadratic families).

        psi = eps^m dw_m/dt + E_m, where E_m collects the diffusion and
        Taylor terms of weight >= eps^m.  Agreement with residual_field
        certifies that every lower order cancels discretely.
        """
        m = self.m_max if m is None else int(m)
        if not self.spec.hamiltonian.quadratic:
            raise ValueError("the regrouped residual needs a quadratic family")
        coords, pts = self._ystar_points(eps)
        A_star = np.asarray(self.spec.diffusion.matrix_values(coords), dtype=float)
        W0 = self._W_star(0, m, pts)
        B1 = self.spec.hamiltonian.grad(W0, coords)
        B2 = self.spec.hamiltonian.hess(W0, coords)
        Wm = self._W_star(m, m, pts)
        out = eps ** m * (self._star(self.dtwt[m], pts) + self.dtubar[m])
        out -= eps ** m * np.einsum("ab...,ab...->...", A_star, self._X_star(m, m, pts))
        out -= eps ** (m + 1) * np.einsum("ab...,ab...->...", A_star,
                                          self._X_star(m + 1, m, pts))
        out += eps ** m * np.einsum("a...,a...->...", B1, Wm)
        for i in range(1, m + 1):
            for j in range(max(1, m - i), m + 1):
                Wi = self._W_star(i, m, pts)
                Wj = self._W_star(j, m, pts)
                out += 0.5 * eps ** (i + j) * np.einsum("ab...,a...,b...->...",
                                                        B2, Wi, Wj)
        return out

    # -- expansion evaluation ------------------------------------------------

    def evaluate(self, x, t: float, eps: float, m: int | None = None) -> np.ndarray:
        """eta_m(x, t) at arbitrary points inside the window; level 0 exact.

        Levels >= 1 come from local cubic interpolation of the stored slow
        fields combined with trigonometric evaluation in the fast variable.
        """
        m = self.m_max if m is None else int(m)
        if not 0 <= m <= self.m_max:
            raise ValueError(f"m must be in [0, {self.m_max}]")
        if self.dim == 1:
            xin = np.asarray(x[0] if isinstance(x, tuple) else x, dtype=float)
            xq = np.atleast_1d(xin)
            st = eval_u0(self.fan, xq, float(t))
            eta = np.asarray(st.u0, dtype=float).copy()
            if m == 0:
                return eta.reshape(xin.shape)
            xs = self.slow.x_axes[0]
            ts = self.slow.t_axis
            i0 = np.clip(np.searchsorted(xs, xq) - 2, 0, xs.size - 4)
            j0 = int(np.clip(np.searchsorted(ts, t) - 2, 0, ts.size - 4))
            gx = xs[i0[:, None] + np.arange(4)]
            wx = _lagrange_weights(gx, xq)
            wtv = _lagrange_weights(ts[None, j0:j0 + 4], t)[0]
            ystar = np.mod(xq / eps, 1.0)
            pts = ystar[:, None, None, None]
            rows = i0[:, None] + np.arange(4)
            for k in range(1, m + 1):
                fast = self.wt[k][rows][:, :, j0:j0 + 4]     # (M, 4, 4, N)
                fast_star = spectral.trig_eval(fast, pts, 1)
                slow = self.ubar[k][rows][:, :, j0:j0 + 4]
                eta += eps ** k * np.einsum("mab,ma,b->m", fast_star + slow, wx, wtv)
            return eta.reshape(xin.shape)
        coords = tuple(np.asarray(c, dtype=float) for c in x)
        shape = np.broadcast_shapes(*(c.shape for c in coords))
        flat = tuple(np.broadcast_to(c, shape).ravel() for c in coords)
        st = eval_u0(self.fan, flat, float(t))
        eta = np.asarray(st.u0, dtype=float).copy()
        if m > 0:
            ts = self.slow.t_axis
            j0 = int(np.clip(np.searchsorted(ts, t) - 2, 0, ts.size - 4))
            wtv = _lagrange_weights(ts[None, j0:j0 + 4], t)[0]
            idx = []
            wgt = []
            for a in range(2):
                axn = self.slow.x_axes[a]
                ia = np.clip(np.searchsorted(axn, flat[a]) - 2, 0, axn.size - 4)
                ga = axn[ia[:, None] + np.arange(4)]
                idx.append(ia[:, None] + np.arange(4))
                wgt.append(_lagrange_weights(ga, flat[a]))
            pts = np.stack([np.mod(flat[a] / eps, 1.0) for a in range(2)], axis=-1)
            pts = pts[:, None, None, None, :]
            for k in range(1, m + 1):
                fast = self.wt[k][idx[0][:, :, None], idx[1][:, None, :], j0:j0 + 4]
                fast_star = spectral.trig_eval(fast, pts, 2)     # (M, 4, 4, 4)
                slow = self.ubar[k][idx[0][:, :, None], idx[1][:, None, :], j0:j0 + 4]
                eta += eps ** k * np.einsum("mabc,ma,mb,c->m",
                                            fast_star + slow, wgt[0], wgt[1], wtv)
        return eta.reshape(shape)


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

def build_hierarchy(spec: ProblemSpec, table: EffectiveTable, initial: InitialData,
                    window, T: float, m_max: int, ygrid: TorusGrid | None = None,
                    hx: float = 0.05, ht: float = 0.0125, mode: str = "spectral",
                    tol: float | None = None, threads: int = 1,
                    zeta_min: float = 0.1, tail_sigmas: float = 5.0,
                    stencil_pad: float = 12.0) -> Hierarchy:
    """Solve every corrector level up to m_max over a window and horizon.

    One pass of nonlinear cell solves fixes phi_1 and the drift linearization
    at each slow node; one linearized solve per node fixes chi and the node
    drift constants; each further level is a source assembly, one linear solve
    per node, and a transport integration.  Results are independent of the
    thread count.
    """
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    if m_max > 1 and not spec.hamiltonian.quadratic:
        raise ValueError("levels beyond the first need a quadratic family")
    if ygrid is None:
        ygrid = TorusGrid(spec.dim, 64 if spec.dim == 1 else 32)
    dim = spec.dim
    n = dim

    # provisional fan on the user window just to size the padding
    probe = solve_effective(table, initial, window, T, zeta_min, n_source=257)
    pad = T * probe.max_speed + tail_sigmas * initial.sigma_max + stencil_pad * hx
    slow = SlowGrid.from_window(window, T, hx, ht, pad)
    slow_extent = [(float(ax[0]), float(ax[-1])) for ax in slow.x_axes]
    fan = solve_effective(table, initial, slow_extent, T, zeta_min)

    hier = Hierarchy(spec, initial, table, slow, ygrid, fan, m_max, mode, tol)
    S = slow.shape
    yshape = ygrid.shape
    mesh_y = ygrid.mesh()
    a_vals = np.asarray(spec.diffusion.matrix_values(mesh_y), dtype=float)
    H = spec.hamiltonian

    # exact effective data at the slow nodes (value, gradient, and Hessian all
    # come from the ray formulas, so level 0 contributes no difference noise)
    P = np.empty((n,) + S)
    U0 = np.empty(S)
    D2U0 = np.empty((n, n) + S)
    ts = slow.t_axis
    if dim == 1:
        xs = slow.x_axes[0]
        for j, t in enumerate(ts):
            st = eval_u0(fan, xs, float(t))
            P[0, :, j] = st.du0[0]
            U0[:, j] = st.u0
            D2U0[0, 0, :, j] = st.d2u0[0, 0]
    else:
        mesh_x = tuple(np.meshgrid(*slow.x_axes, indexing="ij"))
        for j, t in enumerate(ts):
            st = eval_u0(fan, mesh_x, float(t))
            P[:, :, :, j] = st.du0
            U0[:, :, j] = st.u0
            D2U0[:, :, :, :, j] = st.d2u0
    hier.P = P
    hier.ubar[0] = U0
    hier.dubar[0] = P

    # one nonlinear cell solve and one chi solve per node, threaded by rows
    gamma = np.empty(S)
    phi1 = np.empty(S + yshape)
    B = np.empty((n,) + S + yshape)
    chi = np.empty((n,) + S + yshape)
    bbar_node = np.empty((n,) + S)
    eye = np.eye(n)
    ops: dict = {}

    def row_nodes(i):
        if dim == 1:
            return [(i, j) for j in range(ts.size)]
        return [(i, i2, j) for i2 in range(slow.x_axes[1].size)
                for j in range(ts.size)]

    def solve_row(i):
        init = None
        for idx in row_nodes(i):
            p_node = P[(slice(None),) + idx]
            try:
                sol = solve_cell(spec, ygrid, p_node, init=init, mode=mode, tol=tol)
            except CellSolveError as exc:
                raise CellSolveError(f"slow node {idx}: {exc}") from exc
            init = sol
            gamma[idx] = sol.gamma
            phi1[idx] = sol.w.values
            grad_w = np.stack([hier._dy(sol.w.values, b) for b in range(n)])
            p_bc = np.asarray(p_node).reshape((n,) + (1,) * dim)
            b_node = H.grad(grad_w + p_bc, mesh_y)
            op = LinearCellOperator(ygrid, a_vals, b_node, mode, tol)
            g_lin, v = op.solve(p_vec=eye)
            for a in range(n):
                B[(a,) + idx] = b_node[a]
                chi[(a,) + idx] = v[a]
                bbar_node[(a,) + idx] = g_lin[a]
            ops[idx] = op

    rows = range(slow.x_axes[0].size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(solve_row, rows))
    else:
        for i in rows:
            solve_row(i)

    hier.gamma = gamma
    hier.phi[1] = phi1
    hier.B = B
    hier.chi = chi
    hier.bbar_node = bbar_node
    hier.dtubar[0] = -gamma
    hier.dxxubar[0] = D2U0

    # constant-in-q second derivative of a quadratic family, broadcastable
    B2 = H.hess(np.zeros((n,) + (1,) * (dim + 1) + yshape), mesh_y) \
        if (m_max > 1 or H.quadratic) else None

    # level loop
    for k in range(1, m_max + 1):
        hier.wt[k] = hier._wt_assemble(k)
        hier._derive_level(k)
        hier.W[k - 1] = hier._W_assemble(k - 1)
        hier.f[k] = hier._assemble_f(k, a_vals, B2)
        fbar = np.empty(S)
        phik1 = np.empty(S + yshape) if k + 1 <= m_max else None

        def level_row(i, k=k, fbar=fbar, phik1=phik1):
            for idx in row_nodes(i):
                g_lin, v = ops[idx].solve(source=hier.f[k][idx])
                fbar[idx] = g_lin
                if phik1 is not None:
                    phik1[idx] = v

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                list(ex.map(level_row, rows))
        else:
            for i in rows:
                level_row(i)

        hier.fbar[k] = fbar
        if phik1 is not None:
            hier.phi[k + 1] = phik1
        wt0 = hier.wt[k][(slice(None),) * dim + (0,)]
        ic = -wt0.mean(axis=tuple(range(-dim, 0)))
        hier.ubar[k] = hier._transport(fbar, ic)
        hier.dubar[k] = np.stack([hier._dx(hier.ubar[k], a, 0) for a in range(n)])
        hier.dtubar[k] = -np.einsum("a...,a...->...", bbar_node, hier.dubar[k]) - fbar
        hier.dxxubar[k] = hier._dxx_ubar(k)

    edge = {}
    for k, fb in hier.fbar.items():
        worst = 0.0
        for ax in range(dim):
            for side in (0, -1):
                face = np.take(fb, side, axis=ax)
                worst = max(worst, float(np.abs(face).max()))
        edge[k] = worst
    hier.diagnostics = {
        "nodes": int(np.prod(S)),
        "slow_shape": S,
        "pad": pad,
        "fbar_edge": edge,
    }
    return hier
