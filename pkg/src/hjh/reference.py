"""Fine-grid reference solver for the oscillatory equation in one dimension.

Solves u_t = eps * a(x/eps) u_xx - H(u_x, x/eps) on a window wide enough
that the Dirichlet boundary values, taken from the exact far-field traveling
profiles p x + c - t hbar(p) + eps w(x/eps), cannot influence the comparison
region within the horizon.  The grid is tied to the oscillation (dx =
eps / n_per), so resolution per period is constant across eps.

Time stepping is either explicit Heun (stable only while the diffusion CFL
allows it) or a second-order implicit-explicit scheme that treats the
diffusion implicitly through one tridiagonal factorization reused all run.
A first-order monotone variant with Lax-Friedrichs flux is kept as a
cross-check; its error is too diffusive to enter rate fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs

from . import spectral
from .cell import TorusGrid, solve_cell
from .problem import InitialData, ProblemSpec

IMEX_GAMMA = 1.0 - 1.0 / np.sqrt(2.0)
SCHEMES = ("imex", "explicit", "lf")


@dataclass(frozen=True)
class FineGrid1D:
    """Uniform grid with spacing locked to the fast period: dx = eps / n_per."""

    eps: float
    n_per: int
    x: np.ndarray

    @classmethod
    def from_window(cls, window, eps: float, n_per: int) -> "FineGrid1D":
        lo, hi = float(window[0]), float(window[1])
        if hi <= lo:
            raise ValueError("empty window")
        dx = eps / n_per
        n = int(np.ceil((hi - lo) / dx)) + 1
        return cls(float(eps), int(n_per), lo + dx * np.arange(n))

    @property
    def dx(self) -> float:
        return self.eps / self.n_per

    @property
    def n(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class ReferenceSolution:
    """Snapshots of the fine-grid solution at the recorded output times."""

    grid: FineGrid1D
    times: np.ndarray          # actual (snapped) output times
    values: np.ndarray         # (len(times), n)
    scheme: str
    diagnostics: dict

    def at_time(self, t: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9 * (1.0 + abs(t)):
            raise ValueError(f"no snapshot near t={t}; have {self.times.tolist()}")
        return self.values[j]


def _far_field_states(spec: ProblemSpec, initial: InitialData,
                      ygrid: TorusGrid, mode: str):
    """Per-side (slope, offset, hbar, corrector) for the boundary profiles."""
    (pm, cm), (pp, cp) = initial.far_field()[0]
    out = []
    for slope, off in ((pm, cm), (pp, cp)):
        sol = solve_cell(spec, ygrid, np.array([slope]), mode=mode)
        out.append((float(slope), float(off), float(sol.gamma), sol.w.values))
    return out


def speed_bound(spec: ProblemSpec, initial: InitialData, slack: float | None = None,
                n_q: int = 65, n_y: int = 512) -> float:
    """A-priori bound on |H_q| over the gradient range the solution can visit.

    The gradient stays within the initial range widened by the corrector
    oscillation; the extra slack absorbs transients.
    """
    states = _far_field_states(spec, initial, TorusGrid(1, 64), "spectral")
    if slack is None:
        wp_max = max(float(np.abs(spectral.torus_deriv(w, 1, -1, "spectral")).max())
                     for (_, _, _, w) in states)
        slack = 2.0 + 2.0 * wp_max
    slopes = [s for (s, _, _, _) in states]
    ys = (np.arange(n_y) / n_y,)
    qs = np.linspace(min(slopes) - slack, max(slopes) + slack, n_q)
    vmax = 0.0
    for q in qs:
        dq = spec.hamiltonian.grad(np.full((1, n_y), q), ys)
        vmax = max(vmax, float(np.abs(dq).max()))
    return vmax


def reference_margin(spec: ProblemSpec, table, initial: InitialData, T: float,
                     eps: float) -> float:
    """Window padding: advective reach + diffusive spread + ramp tails."""
    pbox = table.p_box
    ps = np.linspace(pbox[0][0], pbox[0][1], 101)
    bmax = float(np.abs(table.bbar_at(ps)).max())
    _, lam_max = spec.diffusion.eig_range()
    return T * bmax + 6.0 * np.sqrt(eps * lam_max * T) + 5.0 * initial.sigma_max


def solve_reference(spec: ProblemSpec, initial: InitialData, window, T: float,
                    eps: float, n_per: int = 128, scheme: str = "imex",
                    output_times=None, c_adv: float = 0.4, c_diff: float = 0.4,
                    ygrid: TorusGrid | None = None) -> ReferenceSolution:
    """March the oscillatory equation on a fine grid; snapshot output times.

    The initial slice is the plain initial data (no corrector added), so the
    solution carries an O(eps) initial layer that relaxes on a time scale
    eps / lambda; comparisons should use output times past it.
    """
    if spec.dim != 1:
        raise ValueError("the reference solver is one-dimensional")
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if output_times is None:
        output_times = (T,)
    ygrid = TorusGrid(1, 128) if ygrid is None else ygrid

    grid = FineGrid1D.from_window(window, eps, n_per)
    x = grid.x
    dx = grid.dx
    n = grid.n
    ystar = (np.mod(x / eps, 1.0),)

    a_star = np.asarray(spec.diffusion.matrix_values(ystar), dtype=float)[0, 0]
    a_min, a_max = float(a_star.min()), float(a_star.max())
    h_eval, dh_eval = _hamiltonian_closures(spec, ystar)

    vmax = speed_bound(spec, initial)
    peclet = vmax * dx / (2.0 * eps * a_min)
    if scheme != "lf" and peclet >= 2.0:
        raise ValueError(
            f"cell Peclet number {peclet:.2f} too large for the centered "
            f"stencil; raise n_per or use the monotone scheme")

    dt_adv = c_adv * dx / max(vmax, 1e-12)
    if scheme == "imex":
        dt_target = dt_adv
    else:
        dt_target = min(dt_adv, c_diff * dx * dx / (2.0 * eps * a_max))

    # march in segments ending exactly at each requested output time
    req = np.asarray(sorted(set(float(t) for t in output_times)))
    if req.min() < -1e-12 or req.max() > T + 1e-12:
        raise ValueError("output times outside [0, T]")
    marks = np.concatenate(([0.0], req[req > 1e-12]))

    # boundary profiles
    states = _far_field_states(spec, initial, ygrid, "spectral")
    (p_lo, c_lo, g_lo, w_lo), (p_hi, c_hi, g_hi, w_hi) = states
    wl = float(spectral.trig_eval(w_lo, np.array([[ystar[0][0]]]), 1)[0])
    wh = float(spectral.trig_eval(w_hi, np.array([[ystar[0][-1]]]), 1)[0])

    def bc_lo(t):
        return p_lo * x[0] + c_lo - t * g_lo + eps * wl

    def bc_hi(t):
        return p_hi * x[-1] + c_hi - t * g_hi + eps * wh

    diff_coef = eps * a_star / (dx * dx)

    def lap(u):
        out = np.zeros_like(u)
        out[1:-1] = diff_coef[1:-1] * (u[2:] - 2.0 * u[1:-1] + u[:-2])
        return out

    def advect(u):
        """-H(u_x, y*) with centered slopes (boundary entries unused)."""
        out = np.zeros_like(u)
        q = (u[2:] - u[:-2]) / (2.0 * dx)
        out[1:-1] = -h_eval(q, slice(1, -1))
        return out

    def advect_lf(u):
        out = np.zeros_like(u)
        qm = (u[1:-1] - u[:-2]) / dx
        qp = (u[2:] - u[1:-1]) / dx
        out[1:-1] = -(h_eval(0.5 * (qm + qp), slice(1, -1))
                      - 0.5 * vmax * (qp - qm))
        return out

    u = np.asarray(initial.value(x), dtype=float)
    e_fun = advect_lf if scheme == "lf" else advect
    snaps = []
    actual = []
    if req[0] <= 1e-12:
        snaps.append(u.copy())
        actual.append(0.0)

    total_steps = 0
    dt_used = 0.0
    for seg in range(marks.size - 1):
        t_a, t_b = float(marks[seg]), float(marks[seg + 1])
        n_seg = max(int(np.ceil((t_b - t_a) / dt_target)), 1)
        dt = (t_b - t_a) / n_seg
        dt_used = max(dt_used, dt)
        if scheme == "imex":
            gtt = _tridiag_factor(1.0 + 2.0 * dt * IMEX_GAMMA * diff_coef,
                                  -dt * IMEX_GAMMA * diff_coef, n)
        for step in range(n_seg):
            tn = t_a + step * dt
            if scheme == "imex":
                rhs1 = u.copy()
                rhs1[0] = bc_lo(tn + IMEX_GAMMA * dt)
                rhs1[-1] = bc_hi(tn + IMEX_GAMMA * dt)
                u1 = gtt(rhs1)
                l1 = lap(u1)
                e1 = e_fun(u1)
                rhs2 = u + dt * e1 + dt * (1.0 - 2.0 * IMEX_GAMMA) * l1
                rhs2[0] = bc_lo(tn + (1.0 - IMEX_GAMMA) * dt)
                rhs2[-1] = bc_hi(tn + (1.0 - IMEX_GAMMA) * dt)
                u2 = gtt(rhs2)
                l2 = lap(u2)
                e2 = e_fun(u2)
                u = u + 0.5 * dt * (e1 + e2 + l1 + l2)
            else:
                f1 = lap(u) + e_fun(u)
                u1 = u + dt * f1
                u1[0] = bc_lo(tn + dt)
                u1[-1] = bc_hi(tn + dt)
                f2 = lap(u1) + e_fun(u1)
                u = u + 0.5 * dt * (f1 + f2)
            u[0] = bc_lo(tn + dt)
            u[-1] = bc_hi(tn + dt)
            total_steps += 1
            if total_steps % 128 == 0 and not np.isfinite(u[::37]).all():
                raise FloatingPointError(f"reference solution lost finiteness "
                                         f"at step {total_steps} (t={tn + dt:.4f})")
        snaps.append(u.copy())
        actual.append(t_b)

    snaps = np.asarray(snaps)
    if not np.isfinite(snaps).all():
        raise FloatingPointError("non-finite values in reference snapshots")
    return ReferenceSolution(
        grid=grid, times=np.asarray(actual), values=snaps, scheme=scheme,
        diagnostics={
            "dt": dt_used, "steps": total_steps, "peclet": peclet, "vmax": vmax,
            "eps": eps, "n_per": n_per, "n_nodes": n,
            "window": (float(x[0]), float(x[-1])),
        })


def _hamiltonian_closures(spec: ProblemSpec, ystar):
    """Pointwise H and H_q evaluators with the y-profiles precomputed."""
    H = spec.hamiltonian
    if H.family == "separable-quadratic":
        b_star = np.asarray(H.b[0](ystar), dtype=float) + np.zeros(ystar[0].size)
        v_star = np.asarray(H.V(ystar), dtype=float) + np.zeros(ystar[0].size)
        c = H.c

        def h_eval(q, sl):
            return c * q * q + b_star[sl] * q + v_star[sl]

        def dh_eval(q, sl):
            return 2.0 * c * q + b_star[sl]

        return h_eval, dh_eval

    coords_full = ystar

    def h_eval(q, sl):
        return H.value(q[None], (coords_full[0][sl],))

    def dh_eval(q, sl):
        return H.grad(q[None], (coords_full[0][sl],))[0]

    return h_eval, dh_eval


def _tridiag_factor(diag: np.ndarray, off: np.ndarray, n: int):
    """Factor I - dt*gamma*L once (Dirichlet identity rows); return a solver."""
    dl = off[1:].copy()      # sub-diagonal entries, rows 1..n-1
    d = diag.copy()
    du = off[:-1].copy()     # super-diagonal entries, rows 0..n-2
    d[0] = 1.0
    du[0] = 0.0
    d[-1] = 1.0
    dl[-1] = 0.0
    gttrf, gttrs = get_lapack_funcs(("gttrf", "gttrs"), (d,))
    dl_f, d_f, du_f, du2, ipiv, info = gttrf(dl, d, du)
    if info != 0:
        raise RuntimeError(f"tridiagonal factorization failed (info={info})")

    def solve(rhs):
        out, info = gttrs(dl_f, d_f, du_f, du2, ipiv, rhs)
        if info != 0:
            raise RuntimeError(f"tridiagonal solve failed (info={info})")
        return out

    return solve


def compare_expansion(hier, ref: ReferenceSolution, window, m: int,
                      skip_initial: bool = True) -> dict:
    """Sup-norm gap between the expansion and the reference over the window.

    Evaluates eta_m at every reference node inside the window at each
    snapshot time (t = 0 optionally skipped: the plain initial slice differs
    from the expansion by the O(eps) corrector there by construction).
    """
    xs = ref.grid.x
    lo, hi = float(window[0]), float(window[1])
    mask = (xs >= lo - 1e-12) & (xs <= hi + 1e-12)
    if not mask.any():
        raise ValueError("comparison window contains no reference nodes")
    sup = 0.0
    per_time = []
    for j, t in enumerate(ref.times):
        if skip_initial and t <= 1e-12:
            continue
        eta = hier.evaluate(xs[mask], float(t), ref.grid.eps, m)
        gap = float(np.abs(eta - ref.values[j][mask]).max())
        per_time.append((float(t), gap))
        sup = max(sup, gap)
    if not per_time:
        raise ValueError("no usable snapshot times in the comparison")
    return {"eps": ref.grid.eps, "m": m, "sup_error": sup, "per_time": per_time,
            "n_points": int(mask.sum())}
