"""Problem instances: periodic coefficients, Hamiltonians, initial data, validation.

A problem couples a uniformly elliptic periodic diffusion A(y), a Hamiltonian
H(q, y) that is convex and quadratically bounded in q, and convex smooth
initial data g.  Builtin families keep every structure condition exact:
coefficients are finite trigonometric series, Hamiltonians are quadratic
polynomials in q (so all q-derivatives beyond order two vanish identically),
and the initial ramp is affine up to an exponentially small tail.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

SCHEMA_VERSION = 1

# conventions used throughout the package:
#   * fast points y are tuples of coordinate arrays, one per dimension
#   * gradient-like quantities carry the component axis FIRST: q has shape
#     (n, *S) against values of shape (*S)


def _as_tuple_points(y, dim: int):
    if isinstance(y, (tuple, list)):
        if len(y) != dim:
            raise ValueError(f"expected {dim} coordinate arrays, got {len(y)}")
        return tuple(np.asarray(c, dtype=float) for c in y)
    if dim != 1:
        raise ValueError("multi-dimensional points must be passed as a tuple")
    return (np.asarray(y, dtype=float),)


# ---------------------------------------------------------------------------
# trigonometric series
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrigSeries:
    """Finite real trigonometric series on the unit torus.

    value(y) = const + sum_t [ cos_t * cos(2*pi*k_t . y) + sin_t * sin(2*pi*k_t . y) ]

    Terms are ((k_1, ..., k_dim), cos_coef, sin_coef) with integer wave vectors,
    which makes unit-lattice periodicity exact by construction.
    """

    dim: int
    const: float = 0.0
    terms: tuple = ()

    def __post_init__(self):
        cleaned = []
        for k, c, s in self.terms:
            k = tuple(int(ki) for ki in k)
            if len(k) != self.dim:
                raise ValueError(f"wave vector {k} has wrong length for dim {self.dim}")
            cleaned.append((k, float(c), float(s)))
        object.__setattr__(self, "terms", tuple(cleaned))
        object.__setattr__(self, "const", float(self.const))

    def __call__(self, y) -> np.ndarray:
        coords = _as_tuple_points(y, self.dim)
        out = np.full(np.broadcast_shapes(*(c.shape for c in coords)), self.const)
        for k, c, s in self.terms:
            phase = 2.0 * np.pi * sum(ki * ci for ki, ci in zip(k, coords))
            if c != 0.0:
                out = out + c * np.cos(phase)
            if s != 0.0:
                out = out + s * np.sin(phase)
        return out

    def deriv(self, axis: int) -> "TrigSeries":
        terms = []
        for k, c, s in self.terms:
            w = 2.0 * np.pi * k[axis]
            if w != 0.0:
                terms.append((k, w * s, -w * c))
        return TrigSeries(self.dim, 0.0, tuple(terms))

    def sampled_range(self, n: int = 2048) -> tuple[float, float]:
        """Min/max over a fine uniform grid (exact for the constant series)."""
        if not self.terms:
            return self.const, self.const
        if self.dim == 1:
            grid = (np.linspace(0.0, 1.0, n, endpoint=False),)
        else:
            ax = np.linspace(0.0, 1.0, 256, endpoint=False)
            grid = tuple(np.meshgrid(ax, ax, indexing="ij"))
        vals = self(grid)
        return float(vals.min()), float(vals.max())

    def max_abs(self) -> float:
        lo, hi = self.sampled_range()
        return max(abs(lo), abs(hi))

    def lipschitz(self) -> float:
        """Sampled Lipschitz constant (sup of the gradient norm)."""
        if not self.terms:
            return 0.0
        grads = [self.deriv(a) for a in range(self.dim)]
        if self.dim == 1:
            grid = (np.linspace(0.0, 1.0, 2048, endpoint=False),)
        else:
            ax = np.linspace(0.0, 1.0, 256, endpoint=False)
            grid = tuple(np.meshgrid(ax, ax, indexing="ij"))
        norm2 = sum(g(grid) ** 2 for g in grads)
        return float(np.sqrt(norm2.max()))

    @property
    def is_constant(self) -> bool:
        return not self.terms

    def to_dict(self) -> dict:
        return {
            "const": self.const,
            "terms": [{"k": list(k), "cos": c, "sin": s} for k, c, s in self.terms],
        }

    @classmethod
    def from_dict(cls, dim: int, data) -> "TrigSeries":
        if isinstance(data, (int, float)):
            return cls(dim, float(data))
        terms = tuple(
            (tuple(t["k"]), t.get("cos", 0.0), t.get("sin", 0.0))
            for t in data.get("terms", [])
        )
        return cls(dim, data.get("const", 0.0), terms)

    @classmethod
    def constant(cls, dim: int, value: float) -> "TrigSeries":
        return cls(dim, value)


# ---------------------------------------------------------------------------
# diffusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Diffusion:
    """Symmetric periodic diffusion matrix A(y) with TrigSeries entries."""

    dim: int
    entries: tuple  # ((a11,),) in 1D; ((a11, a12), (a12, a22)) in 2D

    @classmethod
    def isotropic(cls, dim: int, series: TrigSeries) -> "Diffusion":
        zero = TrigSeries.constant(dim, 0.0)
        if dim == 1:
            return cls(1, ((series,),))
        return cls(2, ((series, zero), (zero, series)))

    @classmethod
    def identity(cls, dim: int) -> "Diffusion":
        return cls.isotropic(dim, TrigSeries.constant(dim, 1.0))

    def matrix_values(self, y) -> np.ndarray:
        coords = _as_tuple_points(y, self.dim)
        shape = np.broadcast_shapes(*(c.shape for c in coords))
        out = np.empty((self.dim, self.dim) + shape)
        for a in range(self.dim):
            for b in range(self.dim):
                out[a, b] = np.broadcast_to(self.entries[a][b](coords), shape)
        return out

    def scalar_values(self, y) -> np.ndarray:
        if self.dim != 1:
            raise ValueError("scalar_values is a 1D convenience")
        return self.entries[0][0](y)

    def eig_range(self) -> tuple[float, float]:
        """Sampled eigenvalue range of A(y) over the torus."""
        if self.dim == 1:
            return self.entries[0][0].sampled_range()
        ax = np.linspace(0.0, 1.0, 256, endpoint=False)
        grid = tuple(np.meshgrid(ax, ax, indexing="ij"))
        a11 = self.entries[0][0](grid)
        a12 = self.entries[0][1](grid)
        a22 = self.entries[1][1](grid)
        tr_half = 0.5 * (a11 + a22)
        disc = np.sqrt(np.maximum(0.25 * (a11 - a22) ** 2 + a12 ** 2, 0.0))
        return float((tr_half - disc).min()), float((tr_half + disc).max())

    def lipschitz(self) -> float:
        return max(e.lipschitz() for row in self.entries for e in row)

    def to_dict(self) -> dict:
        if self.dim == 1:
            return {"a": self.entries[0][0].to_dict()}
        return {
            "a11": self.entries[0][0].to_dict(),
            "a12": self.entries[0][1].to_dict(),
            "a22": self.entries[1][1].to_dict(),
        }

    @classmethod
    def from_dict(cls, dim: int, data) -> "Diffusion":
        if dim == 1:
            return cls(1, ((TrigSeries.from_dict(1, data["a"]),),))
        a11 = TrigSeries.from_dict(2, data["a11"])
        a12 = TrigSeries.from_dict(2, data.get("a12", 0.0))
        a22 = TrigSeries.from_dict(2, data["a22"])
        return cls(2, ((a11, a12), (a12, a22)))


# ---------------------------------------------------------------------------
# Hamiltonian families
# ---------------------------------------------------------------------------

class SeparableQuadratic:
    """H(q, y) = c |q|^2 + b(y) . q + V(y); convex for c > 0, quadratic in q."""

    family = "separable-quadratic"
    quadratic = True

    def __init__(self, dim: int, c: float, b: Sequence[TrigSeries], V: TrigSeries):
        if c <= 0:
            raise ValueError("quadratic coefficient must be positive")
        self.dim = dim
        self.c = float(c)
        self.b = tuple(b)
        if len(self.b) != dim:
            raise ValueError("drift series count must match dim")
        self.V = V

    def value(self, q, y) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        out = self.c * np.sum(q * q, axis=0) + self.V(y)
        for a in range(self.dim):
            ba = self.b[a]
            if not (ba.is_constant and ba.const == 0.0):
                out = out + ba(y) * q[a]
            elif ba.const != 0.0:
                out = out + ba.const * q[a]
        return out

    def grad(self, q, y) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        out = 2.0 * self.c * q.copy()
        shape = out.shape[1:]
        for a in range(self.dim):
            out[a] = out[a] + np.broadcast_to(self.b[a](y), shape)
        return out

    def hess(self, q, y) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        shape = q.shape[1:]
        out = np.zeros((self.dim, self.dim) + shape)
        for a in range(self.dim):
            out[a, a] = 2.0 * self.c
        return out

    def y_lipschitz(self) -> float:
        """Max Lipschitz-in-y constant across H, D_qH, D_q^2H normalizations."""
        return max([self.V.lipschitz()] + [ba.lipschitz() for ba in self.b])

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "c": self.c,
            "b": [ba.to_dict() for ba in self.b],
            "V": self.V.to_dict(),
        }

    @classmethod
    def from_dict(cls, dim: int, data) -> "SeparableQuadratic":
        b_data = data.get("b")
        if b_data is None:
            b = tuple(TrigSeries.constant(dim, 0.0) for _ in range(dim))
        else:
            b = tuple(TrigSeries.from_dict(dim, bd) for bd in b_data)
        return cls(dim, data.get("c", 1.0), b, TrigSeries.from_dict(dim, data.get("V", 0.0)))


class AnisotropicQuadratic:
    """H(q, y) = q . M(y) q + V(y) with M(y) symmetric positive definite."""

    family = "anisotropic-quadratic"
    quadratic = True

    def __init__(self, dim: int, M: Sequence[Sequence[TrigSeries]], V: TrigSeries):
        self.dim = dim
        self.M = tuple(tuple(row) for row in M)
        self.V = V

    def _mvals(self, y, shape) -> np.ndarray:
        out = np.empty((self.dim, self.dim) + shape)
        for a in range(self.dim):
            for b in range(self.dim):
                out[a, b] = np.broadcast_to(self.M[a][b](y), shape)
        return out

    def value(self, q, y) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        m = self._mvals(y, q.shape[1:])
        return np.einsum("a...,ab...,b...->...", q, m, q) + self.V(y)

    def grad(self, q, y) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        m = self._mvals(y, q.shape[1:])
        return 2.0 * np.einsum("ab...,b...->a...", m, q)

    def hess(self, q, y) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return 2.0 * self._mvals(y, q.shape[1:])

    def y_lipschitz(self) -> float:
        lips = [self.V.lipschitz()]
        lips += [self.M[a][b].lipschitz() for a in range(self.dim) for b in range(self.dim)]
        return max(lips)

    def m_eig_range(self) -> tuple[float, float]:
        if self.dim == 1:
            return self.M[0][0].sampled_range()
        ax = np.linspace(0.0, 1.0, 256, endpoint=False)
        grid = tuple(np.meshgrid(ax, ax, indexing="ij"))
        m11, m12, m22 = self.M[0][0](grid), self.M[0][1](grid), self.M[1][1](grid)
        tr_half = 0.5 * (m11 + m22)
        disc = np.sqrt(np.maximum(0.25 * (m11 - m22) ** 2 + m12 ** 2, 0.0))
        return float((tr_half - disc).min()), float((tr_half + disc).max())

    def to_dict(self) -> dict:
        if self.dim == 1:
            m = {"m11": self.M[0][0].to_dict()}
        else:
            m = {
                "m11": self.M[0][0].to_dict(),
                "m12": self.M[0][1].to_dict(),
                "m22": self.M[1][1].to_dict(),
            }
        return {"family": self.family, "V": self.V.to_dict(), **m}

    @classmethod
    def from_dict(cls, dim: int, data) -> "AnisotropicQuadratic":
        if dim == 1:
            M = ((TrigSeries.from_dict(1, data["m11"]),),)
        else:
            m11 = TrigSeries.from_dict(2, data["m11"])
            m12 = TrigSeries.from_dict(2, data.get("m12", 0.0))
            m22 = TrigSeries.from_dict(2, data["m22"])
            M = ((m11, m12), (m12, m22))
        return cls(dim, M, TrigSeries.from_dict(dim, data.get("V", 0.0)))


class CustomHamiltonian:
    """User-supplied H(q, y); q-derivatives fall back to nested central differences.

    The finite-difference step is 1e-3 * (1 + |q|) per differentiation level;
    accuracy degrades with derivative order, which is acceptable for validation
    but not for high-order corrector studies.
    """

    family = "custom"
    quadratic = False

    def __init__(self, dim: int, fun: Callable, grad_fun: Callable | None = None,
                 hess_fun: Callable | None = None):
        self.dim = dim
        self._fun = fun
        self._grad = grad_fun
        self._hess = hess_fun

    def value(self, q, y) -> np.ndarray:
        return np.asarray(self._fun(np.asarray(q, dtype=float), y), dtype=float)

    def _fd_grad(self, fun, q, y) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        h = 1e-3 * (1.0 + np.sqrt(np.sum(q * q, axis=0)))
        out = np.empty_like(np.broadcast_to(q, q.shape).astype(float))
        for a in range(self.dim):
            qp = q.copy()
            qm = q.copy()
            qp[a] = qp[a] + h
            qm[a] = qm[a] - h
            out[a] = (fun(qp, y) - fun(qm, y)) / (2.0 * h)
        return out

    def grad(self, q, y) -> np.ndarray:
        if self._grad is not None:
            return np.asarray(self._grad(np.asarray(q, dtype=float), y), dtype=float)
        return self._fd_grad(self.value, q, y)

    def hess(self, q, y) -> np.ndarray:
        if self._hess is not None:
            return np.asarray(self._hess(np.asarray(q, dtype=float), y), dtype=float)
        q = np.asarray(q, dtype=float)
        rows = [self._fd_grad(lambda qq, yy, a=a: self.grad(qq, yy)[a], q, y)
                for a in range(self.dim)]
        out = np.stack(rows, axis=0)
        return 0.5 * (out + np.swapaxes(out, 0, 1))

    def y_lipschitz(self) -> float:
        raise NotImplementedError("custom Hamiltonians need explicit bounds")


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemBounds:
    """Structure-condition constants: ellipticity, quadratic growth, regularity."""

    lam: float
    Lam: float
    alpha: float
    alpha_prime: float
    beta: float
    beta_prime: float
    K: float
    L: float

    def __post_init__(self):
        if not (0.0 < self.lam <= self.Lam):
            raise ValueError("need 0 < lam <= Lam")
        if not (0.0 < self.alpha <= self.beta):
            raise ValueError("need 0 < alpha <= beta")
        if self.alpha_prime < 0.0 or self.beta_prime < 0.0:
            raise ValueError("growth offsets must be nonnegative")
        if self.K <= 0.0 or self.L <= 0.0:
            raise ValueError("regularity constants must be positive")

    def to_dict(self) -> dict:
        return {
            "lam": self.lam, "Lam": self.Lam,
            "alpha": self.alpha, "alpha_prime": self.alpha_prime,
            "beta": self.beta, "beta_prime": self.beta_prime,
            "K": self.K, "L": self.L,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemBounds":
        return cls(**{k: float(v) for k, v in data.items()})


def default_bounds(diffusion: Diffusion, hamiltonian, initial=None,
                   k_max: int = 10) -> ProblemBounds:
    """Conservative valid constants computed from the builtin descriptors."""
    lam, Lam = diffusion.eig_range()
    lam = max(lam * (1.0 - 1e-9) - 1e-12, 1e-12)
    Lam = Lam * (1.0 + 1e-9) + 1e-12
    margin = 1e-9
    if isinstance(hamiltonian, SeparableQuadratic):
        c = hamiltonian.c
        vmin, vmax = hamiltonian.V.sampled_range()
        bmax2 = sum(ba.max_abs() ** 2 for ba in hamiltonian.b)
        # c|q|^2 - |b||q| >= (c/2)|q|^2 - |b|^2/(2c)
        alpha, beta = 0.5 * c, 1.5 * c
        alpha_p = bmax2 / (2.0 * c) + max(0.0, -vmin) + margin
        beta_p = bmax2 / (2.0 * c) + max(0.0, vmax) + margin
        K_h = hamiltonian.y_lipschitz()
    elif isinstance(hamiltonian, AnisotropicQuadratic):
        m_lo, m_hi = hamiltonian.m_eig_range()
        if m_lo <= 0:
            raise ValueError("anisotropic family needs positive definite M(y)")
        vmin, vmax = hamiltonian.V.sampled_range()
        alpha, beta = m_lo * (1 - 1e-9), m_hi * (1 + 1e-9)
        alpha_p = max(0.0, -vmin) + margin
        beta_p = max(0.0, vmax) + margin
        K_h = hamiltonian.y_lipschitz()
    else:
        raise ValueError("default_bounds supports builtin families only")
    K = max(diffusion.lipschitz(), K_h, 1e-6) * (1.0 + 1e-6) + 1e-9
    L = 1.0
    if initial is not None:
        L = max(initial.max_derivative_bound(r) for r in range(1, k_max + 1))
        L = max(L, 1e-6) * (1.0 + 1e-9) + 1e-12
    return ProblemBounds(lam, Lam, alpha, alpha_p, beta, beta_p, K, L)


# ---------------------------------------------------------------------------
# problem spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Full description of the oscillatory problem's coefficients."""

    dim: int
    diffusion: Diffusion
    hamiltonian: object
    bounds: ProblemBounds
    k_max: int = 10

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.diffusion.dim != self.dim or self.hamiltonian.dim != self.dim:
            raise ValueError("component dimensions disagree")

    @property
    def family(self) -> str:
        return self.hamiltonian.family

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dim": self.dim,
            "diffusion": self.diffusion.to_dict(),
            "hamiltonian": self.hamiltonian.to_dict(),
            "bounds": self.bounds.to_dict(),
            "k_max": self.k_max,
        }


def hamiltonian_from_dict(dim: int, data: dict):
    family = data.get("family", "separable-quadratic")
    if family == "separable-quadratic":
        return SeparableQuadratic.from_dict(dim, data)
    if family == "anisotropic-quadratic":
        return AnisotropicQuadratic.from_dict(dim, data)
    raise ValueError(f"unknown Hamiltonian family {family!r} in JSON input")


def problem_from_dict(data: dict) -> "ProblemSpec":
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version}")
    dim = int(data["dim"])
    diffusion = Diffusion.from_dict(dim, data["diffusion"])
    hamiltonian = hamiltonian_from_dict(dim, data["hamiltonian"])
    bounds_data = data.get("bounds", "auto")
    k_max = int(data.get("k_max", 10))
    initial = initial_from_dict(dim, data["initial"]) if "initial" in data else None
    if bounds_data == "auto" or bounds_data is None:
        bounds = default_bounds(diffusion, hamiltonian, initial, k_max)
    else:
        bounds = ProblemBounds.from_dict(bounds_data)
    return ProblemSpec(dim, diffusion, hamiltonian, bounds, k_max)


def load_problem(path: str):
    """Read a problem JSON file; returns (ProblemSpec, InitialData or None)."""
    with open(path) as fh:
        data = json.load(fh)
    spec = problem_from_dict(data)
    initial = initial_from_dict(spec.dim, data["initial"]) if "initial" in data else None
    return spec, initial


def save_problem(path: str, spec: ProblemSpec, initial=None) -> None:
    data = spec.to_dict()
    if initial is not None:
        data["initial"] = initial.to_dict()
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

def _logcosh(z: np.ndarray) -> np.ndarray:
    az = np.abs(z)
    return az + np.log1p(np.exp(-2.0 * az)) - np.log(2.0)


class _TanhDerivs:
    """Polynomials Q_j with d^j/dx^j tanh(x) = Q_j(tanh x); Q_1 = 1 - u^2."""

    def __init__(self):
        self._polys = [None, np.array([1.0, 0.0, -1.0])]  # coefficients, low-first

    def poly(self, j: int) -> np.ndarray:
        while len(self._polys) <= j:
            prev = self._polys[-1]
            self._polys.append(npoly.polymul(npoly.polyder(prev), [1.0, 0.0, -1.0]))
        return self._polys[j]

    def eval(self, j: int, u: np.ndarray) -> np.ndarray:
        return npoly.polyval(u, self.poly(j))

    def max_abs(self, j: int) -> float:
        u = np.linspace(-1.0, 1.0, 2001)
        return float(np.abs(self.eval(j, u)).max())


_TANH = _TanhDerivs()


@dataclass(frozen=True)
class Ramp1D:
    """g(x) = mid*x + half*sigma*logcosh(x/sigma); convex when p_plus >= p_minus."""

    p_minus: float
    p_plus: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.p_plus < self.p_minus:
            raise ValueError("ramp needs p_plus >= p_minus for convexity")

    @property
    def mid(self) -> float:
        return 0.5 * (self.p_plus + self.p_minus)

    @property
    def half(self) -> float:
        return 0.5 * (self.p_plus - self.p_minus)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.mid * x + self.half * self.sigma * _logcosh(x / self.sigma)

    def derivative(self, x: np.ndarray, order: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if order == 0:
            return self.value(x)
        u = np.tanh(x / self.sigma)
        if order == 1:
            return self.mid + self.half * u
        return self.half * self.sigma ** (1 - order) * _TANH.eval(order - 1, u)

    def derivative_bound(self, order: int) -> float:
        if order == 0:
            return np.inf
        if order == 1:
            return max(abs(self.p_minus), abs(self.p_plus))
        return abs(self.half) * self.sigma ** (1 - order) * _TANH.max_abs(order - 1)

    def far_field(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """((slope, offset) at -inf, (slope, offset) at +inf); tails O(e^{-2|x|/sigma})."""
        off = -self.half * self.sigma * np.log(2.0)
        return (self.p_minus, off), (self.p_plus, off)


class InitialData:
    """Convex smooth initial data with evaluators for all needed derivatives."""

    def __init__(self, dim: int, family: str, ramps: tuple[Ramp1D, ...] = (),
                 slope: np.ndarray | None = None, custom: dict | None = None):
        self.dim = dim
        self.family = family
        self.ramps = ramps
        self.slope = None if slope is None else np.asarray(slope, dtype=float)
        self.custom = custom or {}
        if family == "affine" and self.slope is None:
            raise ValueError("affine data needs a slope")
        if family == "logcosh-ramp" and len(ramps) != dim:
            raise ValueError("one ramp per coordinate required")

    # -- constructors ------------------------------------------------------

    @classmethod
    def affine(cls, slope) -> "InitialData":
        slope = np.atleast_1d(np.asarray(slope, dtype=float))
        return cls(slope.size, "affine", slope=slope)

    @classmethod
    def ramp(cls, p_minus, p_plus, sigma) -> "InitialData":
        p_minus = np.atleast_1d(np.asarray(p_minus, dtype=float))
        p_plus = np.atleast_1d(np.asarray(p_plus, dtype=float))
        dim = p_minus.size
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,))
        ramps = tuple(Ramp1D(p_minus[a], p_plus[a], sig[a]) for a in range(dim))
        return cls(dim, "logcosh-ramp", ramps=ramps)

    # -- evaluation --------------------------------------------------------

    def value(self, x) -> np.ndarray:
        coords = _as_tuple_points(x, self.dim)
        if self.family == "affine":
            return sum(self.slope[a] * coords[a] for a in range(self.dim))
        if self.family == "logcosh-ramp":
            return sum(r.value(c) for r, c in zip(self.ramps, coords))
        return self.custom["value"](*coords)

    def gradient(self, x) -> np.ndarray:
        coords = _as_tuple_points(x, self.dim)
        shape = np.broadcast_shapes(*(c.shape for c in coords))
        out = np.empty((self.dim,) + shape)
        for a in range(self.dim):
            out[a] = self.partial(x, a, 1)
        return out

    def hessian(self, x) -> np.ndarray:
        coords = _as_tuple_points(x, self.dim)
        shape = np.broadcast_shapes(*(c.shape for c in coords))
        out = np.zeros((self.dim, self.dim) + shape)
        for a in range(self.dim):
            orders = tuple(2 if b == a else 0 for b in range(self.dim))
            out[a, a] = self.derivative(x, orders)
        if self.family == "custom" and "hessian" in self.custom:
            return self.custom["hessian"](*coords)
        return out

    def partial(self, x, axis: int, order: int) -> np.ndarray:
        orders = tuple(order if b == axis else 0 for b in range(self.dim))
        return self.derivative(x, orders)

    def derivative(self, x, orders: tuple[int, ...]) -> np.ndarray:
        """Mixed partial derivative D^orders g (exact for builtin families)."""
        coords = _as_tuple_points(x, self.dim)
        shape = np.broadcast_shapes(*(c.shape for c in coords))
        total = sum(orders)
        if self.family == "affine":
            if total == 0:
                return np.broadcast_to(self.value(x), shape).copy()
            if total == 1:
                a = orders.index(1)
                return np.full(shape, self.slope[a])
            return np.zeros(shape)
        if self.family == "logcosh-ramp":
            if total == 0:
                return np.broadcast_to(self.value(x), shape).copy()
            active = [a for a, o in enumerate(orders) if o > 0]
            if len(active) > 1:
                return np.zeros(shape)  # additive across axes
            a = active[0]
            return np.broadcast_to(
                self.ramps[a].derivative(coords[a], orders[a]), shape).copy()
        fn = self.custom.get("derivative")
        if fn is None:
            raise ValueError("custom initial data lacks a derivative evaluator")
        return fn(coords, orders)

    def max_derivative_bound(self, order: int) -> float:
        if self.family == "affine":
            return float(np.abs(self.slope).max()) if order == 1 else 0.0
        if self.family == "logcosh-ramp":
            return max(r.derivative_bound(order) for r in self.ramps)
        raise ValueError("custom initial data lacks derivative bounds")

    def far_field(self):
        """Per-axis ((slope-, offset-), (slope+, offset+)) tuples."""
        if self.family == "affine":
            return tuple(((self.slope[a], 0.0), (self.slope[a], 0.0))
                         for a in range(self.dim))
        if self.family == "logcosh-ramp":
            return tuple(r.far_field() for r in self.ramps)
        ff = self.custom.get("far_field")
        if ff is None:
            raise ValueError("custom initial data lacks far-field description")
        return ff

    @property
    def sigma_max(self) -> float:
        if self.family == "logcosh-ramp":
            return max(r.sigma for r in self.ramps)
        return 0.0

    def to_dict(self) -> dict:
        if self.family == "affine":
            return {"family": "affine", "slope": self.slope.tolist()}
        if self.family == "logcosh-ramp":
            return {
                "family": "logcosh-ramp",
                "p_minus": [r.p_minus for r in self.ramps],
                "p_plus": [r.p_plus for r in self.ramps],
                "sigma": [r.sigma for r in self.ramps],
            }
        raise ValueError("custom initial data is not serializable")


def initial_from_dict(dim: int, data: dict) -> InitialData:
    family = data.get("family", "logcosh-ramp")
    if family == "affine":
        return InitialData.affine(data["slope"])
    if family == "logcosh-ramp":
        return InitialData.ramp(data["p_minus"], data["p_plus"], data["sigma"])
    raise ValueError(f"unknown initial-data family {family!r} in JSON input")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    samples: int
    margin: float
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    seed: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, samples: int, margin: float, tol: float = 0.0,
            detail: str = "") -> CheckResult:
        res = CheckResult(name, samples, float(margin), bool(margin >= -tol), detail)
        self.checks.append(res)
        return res

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            tag = "pass" if c.passed else "FAIL"
            extra = f"  {c.detail}" if c.detail else ""
            lines.append(f"[{tag}] {c.name}: margin {c.margin:+.3e} "
                         f"({c.samples} samples){extra}")
        return "\n".join(lines)


def _sample_y(rng: np.random.Generator, dim: int, count: int):
    pts = rng.random((count, dim))
    return tuple(pts[:, a] for a in range(dim))


def _sample_q(rng: np.random.Generator, dim: int, count: int, radius: float):
    q = rng.normal(size=(dim, count))
    norm = np.sqrt(np.sum(q * q, axis=0))
    scale = radius * rng.random(count) ** (1.0 / dim) / np.maximum(norm, 1e-300)
    return q * scale


def validate_problem(spec: ProblemSpec, samples: int = 300, seed: int = 0) -> ValidationReport:
    """Numerically audit the structure conditions; sampled, not proven."""
    rng = np.random.default_rng(seed)
    rep = ValidationReport(seed=seed)
    n, B = spec.dim, spec.bounds
    A, H = spec.diffusion, spec.hamiltonian

    # periodicity under unit lattice shifts
    y = _sample_y(rng, n, samples)
    q = _sample_q(rng, n, samples, 3.0)
    worst = 0.0
    for a in range(n):
        shift = tuple(y[b] + (1.0 if b == a else 0.0) for b in range(n))
        worst = max(worst,
                    float(np.abs(A.matrix_values(shift) - A.matrix_values(y)).max()),
                    float(np.abs(H.value(q, shift) - H.value(q, y)).max()))
    rep.add("periodicity", samples, 1e-12 - worst, 0.0,
            detail=f"max lattice-shift defect {worst:.2e}")

    # ellipticity at sampled points
    av = A.matrix_values(y)
    if n == 1:
        emin, emax = av[0, 0], av[0, 0]
    else:
        tr_half = 0.5 * (av[0, 0] + av[1, 1])
        disc = np.sqrt(np.maximum(0.25 * (av[0, 0] - av[1, 1]) ** 2 + av[0, 1] ** 2, 0.0))
        emin, emax = tr_half - disc, tr_half + disc
    margin = min(float((emin - B.lam).min()), float((B.Lam - emax).min()))
    rep.add("ellipticity", samples, margin, 1e-10)

    # Lipschitz-in-y of A
    y2 = tuple(c + rng.normal(scale=0.05, size=c.shape) for c in y)
    dist = np.sqrt(sum((c2 - c1) ** 2 for c1, c2 in zip(y, y2)))
    dist = np.maximum(dist, 1e-12)
    quot = np.abs(A.matrix_values(y2) - A.matrix_values(y)).max(axis=(0, 1)) / dist
    rep.add("diffusion-lipschitz", samples, B.K - float(quot.max()), 1e-9)

    # quadratic growth on |q| <= 10
    qg = _sample_q(rng, n, samples, 10.0)
    yg = _sample_y(rng, n, samples)
    hv = H.value(qg, yg)
    q2 = np.sum(qg * qg, axis=0)
    lower = hv - (B.alpha * q2 - B.alpha_prime)
    upper = (B.beta * q2 + B.beta_prime) - hv
    rep.add("quadratic-growth", samples,
            min(float(lower.min()), float(upper.min())), 1e-9)

    # midpoint convexity in q
    qa = _sample_q(rng, n, samples, 6.0)
    qb = _sample_q(rng, n, samples, 6.0)
    lam = rng.random(samples)
    ym = _sample_y(rng, n, samples)
    mix = lam * H.value(qa, ym) + (1.0 - lam) * H.value(qb, ym)
    mid = H.value(lam * qa + (1.0 - lam) * qb, ym)
    rep.add("convexity-in-q", samples, float((mix - mid).min()), 1e-10)

    # Lipschitz-in-y of H and its q-derivatives, normalized per the growth order
    qn = np.sqrt(np.sum(qg * qg, axis=0))
    worst = -np.inf
    for order, norm in ((0, 1.0 + qn ** 2), (1, 1.0 + qn), (2, np.ones_like(qn))):
        yg2 = tuple(c + rng.normal(scale=0.05, size=c.shape) for c in yg)
        d = np.sqrt(sum((c2 - c1) ** 2 for c1, c2 in zip(yg, yg2)))
        d = np.maximum(d, 1e-12)
        if order == 0:
            diff = np.abs(H.value(qg, yg2) - H.value(qg, yg))
        elif order == 1:
            diff = np.abs(H.grad(qg, yg2) - H.grad(qg, yg)).max(axis=0)
        else:
            diff = np.abs(H.hess(qg, yg2) - H.hess(qg, yg)).max(axis=(0, 1))
        quot = diff / (d * norm)
        worst = max(worst, float(quot.max() - B.K))
    rep.add("hamiltonian-y-regularity", samples, -worst, 1e-9)

    # analytic q-derivatives against central differences
    h = 1e-4 * (1.0 + np.sqrt(np.sum(q * q, axis=0)))
    worst = 0.0
    for a in range(n):
        qp, qm = q.copy(), q.copy()
        qp[a] += h
        qm[a] -= h
        fd = (H.value(qp, y) - H.value(qm, y)) / (2.0 * h)
        an = H.grad(q, y)[a]
        worst = max(worst, float((np.abs(fd - an) / (1.0 + np.abs(an))).max()))
    rep.add("gradient-consistency", samples, 1e-7 - worst, 0.0,
            detail=f"max relative defect {worst:.2e}")
    return rep


def validate_initial_data(initial: InitialData, table, window, samples: int = 300,
                          zeta_min: float = 0.1, seed: int = 0,
                          bounds: ProblemBounds | None = None,
                          k_max: int = 6) -> ValidationReport:
    """Check admissibility of g against a tabulated effective Hamiltonian.

    ``window`` is (lo, hi) in 1D or ((lo1, hi1), (lo2, hi2)) in 2D.  The drift
    check asserts min |D_p hbar(Dg(x))| >= zeta_min over the sampled window.
    """
    rng = np.random.default_rng(seed)
    rep = ValidationReport(seed=seed)
    n = initial.dim
    win = np.atleast_2d(np.asarray(window, dtype=float))
    if win.shape != (n, 2):
        raise ValueError("window must give (lo, hi) per dimension")

    pts = tuple(win[a, 0] + (win[a, 1] - win[a, 0]) * np.concatenate([
        rng.random(samples), np.linspace(0.0, 1.0, 33)]) for a in range(n))
    count = pts[0].size

    # normalization g(0) = 0
    zero = tuple(np.zeros(1) for _ in range(n))
    g0 = float(np.abs(initial.value(zero)).max())
    rep.add("g-normalization", 1, 1e-14 - g0, 0.0, detail=f"|g(0)| = {g0:.2e}")

    # convexity of g
    hess = initial.hessian(pts)
    if n == 1:
        eigmin = hess[0, 0]
    else:
        tr_half = 0.5 * (hess[0, 0] + hess[1, 1])
        disc = np.sqrt(np.maximum(0.25 * (hess[0, 0] - hess[1, 1]) ** 2 + hess[0, 1] ** 2, 0.0))
        eigmin = tr_half - disc
    rep.add("g-convexity", count, float(eigmin.min()), 1e-12)

    # derivative bounds
    if bounds is not None:
        worst = -np.inf
        for r in range(1, k_max + 1):
            for a in range(n):
                orders = tuple(r if b == a else 0 for b in range(n))
                worst = max(worst, float(np.abs(initial.derivative(pts, orders)).max()))
        rep.add("g-derivative-bounds", count, bounds.L - worst, 1e-9)

    # gradient range within the tabulated box
    grad = initial.gradient(pts)
    box = table.p_box
    cover = min(min(float((grad[a] - box[a][0]).min()),
                    float((box[a][1] - grad[a]).min())) for a in range(n))
    rep.add("gradient-range-coverage", count, cover, 0.0,
            detail="Dg range must stay inside the tabulated p-box")

    # drift nondegeneracy
    if rep.checks[-1].passed:
        bb = table.bbar_at(np.stack(grad, axis=-1) if n == 2 else grad[0])
        speed = np.sqrt(np.sum(bb * bb, axis=-1)) if n == 2 else np.abs(bb)
        rep.add("drift-nondegeneracy", count, float(speed.min()) - zeta_min, 0.0,
                detail=f"min |drift| = {float(speed.min()):.3e}, floor {zeta_min}")
    else:
        rep.add("drift-nondegeneracy", 0, -1.0, 0.0,
                detail="skipped: gradient range leaves the table")

    # exponential tail of the ramp's slope
    if initial.family == "logcosh-ramp":
        worst = -np.inf
        for a, ramp in enumerate(initial.ramps):
            x = np.linspace(win[a, 0], win[a, 1], 101)
            gp = ramp.derivative(x, 1)
            gap = ramp.p_plus - ramp.p_minus
            bound = gap * np.exp(-2.0 * np.abs(x) / ramp.sigma)
            target = np.where(x > 0, ramp.p_plus, np.where(x < 0, ramp.p_minus, gp))
            worst = max(worst, float((np.abs(gp - target) - bound).max()))
        rep.add("ramp-tail-decay", 101 * n, -worst, 1e-12)
    return rep
