"""Polynomial membrane models of generalized FitzHugh-Nagumo type.

    I(v, w) = I1(v) + (c3 + c4 v) w,   H(v, w) = h(v) + cH1 w

with ``I1`` at most cubic and ``h`` at most quadratic.  The classical
FitzHugh-Nagumo model is ``I = v (v - a)(v - 1) + w``, ``H = eps (k v - w)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

FHN_DEFAULTS = {"a": 0.1, "k": 0.5, "epsilon": 0.01}


class MembraneStructureWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MembraneModel:
    """Coefficients are in increasing powers of ``v``."""

    i1: tuple = (0.0, 0.0, 0.0, 0.0)
    i2: tuple = (0.0, 0.0)
    h: tuple = (0.0, 0.0, 0.0)
    c_h1: float = 0.0
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "i1", _padded(self.i1, 4, "i1"))
        object.__setattr__(self, "i2", _padded(self.i2, 2, "i2"))
        object.__setattr__(self, "h", _padded(self.h, 3, "h"))
        object.__setattr__(self, "c_h1", float(self.c_h1))

    @classmethod
    def fitzhugh_nagumo(cls, a=FHN_DEFAULTS["a"], k=FHN_DEFAULTS["k"], epsilon=FHN_DEFAULTS["epsilon"]):
        if not 0.0 < a < 1.0:
            raise ValueError("FitzHugh-Nagumo needs 0 < a < 1")
        if k <= 0 or epsilon <= 0:
            raise ValueError("FitzHugh-Nagumo needs k > 0 and epsilon > 0")
        return cls(i1=(0.0, a, -(1.0 + a), 1.0), i2=(1.0, 0.0), h=(0.0, epsilon * k, 0.0),
                   c_h1=-epsilon, name="fhn")

    @classmethod
    def linear(cls, rate=1.0, gating_rate=0.0):
        """``I = rate * v`` and ``H = gating_rate * w``."""
        return cls(i1=(0.0, rate, 0.0, 0.0), c_h1=gating_rate, name="linear")

    @classmethod
    def passive(cls):
        """``I = H = 0``."""
        return cls(name="passive")

    def current(self, v, w):
        v = np.asarray(v, dtype=float)
        return P.polyval(v, self.i1) + (self.i2[0] + self.i2[1] * v) * w

    def gating(self, v, w):
        v = np.asarray(v, dtype=float)
        return P.polyval(v, self.h) + self.c_h1 * np.asarray(w, dtype=float)

    def jacobian(self, v, w):
        """``[[dI/dv, dI/dw], [dH/dv, dH/dw]]`` stacked along the last two axes."""
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        di_dv = P.polyval(v, P.polyder(self.i1)) + self.i2[1] * w
        di_dw = self.i2[0] + self.i2[1] * v
        dh_dv = P.polyval(v, P.polyder(self.h))
        dh_dw = np.full(np.broadcast(v, w).shape, self.c_h1)
        return np.stack([np.stack(np.broadcast_arrays(di_dv, di_dw), -1),
                         np.stack(np.broadcast_arrays(dh_dv, dh_dw), -1)], -2)

    @property
    def coercivity(self):
        """Leading coefficient ``c_I`` of ``I1(v) v`` (must be positive)."""
        return self.i1[3]

    def growth_constant(self):
        """``C_I`` with ``|I|^(4/3) <= C_I (1 + |v|^4 + |w|^2)``, from the coefficients.

        Uses ``|I| <= A (1 + |v|^3) + B (1 + |v|) |w|`` with ``A = sum |i1|``,
        ``B = |c3| + |c4|``, the power-mean inequality for four terms and
        Young's inequality on ``|v|^(4/3) |w|^(4/3)``.
        """
        A = float(np.sum(np.abs(self.i1)))
        B = abs(self.i2[0]) + abs(self.i2[1])
        return 4.0 ** (1.0 / 3.0) * (A ** (4.0 / 3.0) + 2.0 * B ** (4.0 / 3.0))

    def stability_ceiling(self, v_range=(-0.5, 1.5), w=0.0, samples=401):
        """Documented explicit-step ceiling ``0.1 / max |dI/dv|`` over ``v_range``."""
        v = np.linspace(*v_range, samples)
        slope = np.abs(self.jacobian(v, np.full_like(v, w))[..., 0, 0]).max()
        return np.inf if slope == 0 else 0.1 / slope

    def as_dict(self):
        return {"name": self.name, "i1": list(self.i1), "i2": list(self.i2),
                "h": list(self.h), "c_h1": self.c_h1}


def _padded(coeffs, length, name):
    c = [float(x) for x in np.atleast_1d(coeffs)]
    if len(c) > length:
        if any(x != 0.0 for x in c[length:]):
            raise ValueError(f"{name} allows at most degree {length - 1}")
        c = c[:length]
    return tuple(c + [0.0] * (length - len(c)))


def ionic_current(model, v, w):
    return model.current(v, w)


def gating_rate(model, v, w):
    return model.gating(v, w)


@dataclass(frozen=True)
class StructureReport:
    gamma: float
    beta: float
    dissipative: bool
    mu_grid: np.ndarray
    lambda_by_mu: np.ndarray
    best_mu: float
    best_lambda: float
    growth_constant: float

    def as_dict(self):
        return {
            "gamma": self.gamma, "beta": self.beta, "dissipative": self.dissipative,
            "best_mu": self.best_mu, "best_lambda": self.best_lambda,
            "growth_constant": self.growth_constant,
            "lambda_by_mu": dict(zip(map(float, self.mu_grid), map(float, self.lambda_by_mu))),
        }


def min_sym_eigenvalue(model, mu, v, w):
    """Smallest eigenvalue of the symmetric part of the Jacobian of ``(mu I, -H)``."""
    J = model.jacobian(v, w)
    a = mu * J[..., 0, 0]
    d = -J[..., 1, 1]
    off = 0.5 * (mu * J[..., 0, 1] - J[..., 1, 0])
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + off ** 2)


def check_membrane_structure(model, v_range=(-2.0, 2.0), w_range=(-2.0, 2.0), samples=201, mu_grid=None):
    """Estimate the structural constants of a membrane model on a sample box.

    (i) dissipativity ``v I - w H >= gamma v^4 - beta (v^2 + w^2)``: ``gamma``
    is half the leading coefficient ``c_I`` and ``beta`` the smallest value
    satisfying the inequality on the grid.  A non-positive ``c_I`` admits no
    ``gamma > 0`` and triggers a :class:`MembraneStructureWarning`.

    (ii) for each ``mu`` the minimum over the grid of the smallest eigenvalue
    of the symmetric part of the Jacobian of ``(mu I, -H)``; the pair with the
    largest minimum is reported.  A negative value ``lambda`` means the
    monotonicity bound holds with ``-lambda |dz|^2`` on the right.
    """
    v, w = np.meshgrid(np.linspace(*v_range, samples), np.linspace(*w_range, samples), indexing="ij")
    v, w = v.ravel(), w.ravel()
    c_i = model.coercivity
    dissipative = c_i > 0
    if dissipative:
        gamma = 0.5 * c_i
        form = v * model.current(v, w) - w * model.gating(v, w)
        denom = v ** 2 + w ** 2
        nz = denom > 0
        beta = max(0.0, float(np.max((gamma * v[nz] ** 4 - form[nz]) / denom[nz])))
    else:
        gamma, beta = 0.0, np.inf
        warnings.warn("membrane model has no positive quartic coercivity: no admissible (gamma, beta)",
                      MembraneStructureWarning, stacklevel=2)
    if mu_grid is None:
        mu_grid = np.geomspace(1e-4, 1e1, 51)
        extra = _natural_mu(model)
        if extra is not None:
            mu_grid = np.unique(np.append(mu_grid, extra))
    mu_grid = np.asarray(mu_grid, dtype=float)
    lam = np.array([min_sym_eigenvalue(model, mu, v, w).min() for mu in mu_grid])
    best = int(np.argmax(lam))
    return StructureReport(gamma, beta, dissipative, mu_grid, lam, float(mu_grid[best]), float(lam[best]),
                           model.growth_constant())


def _natural_mu(model):
    # mu = (dH/dv) / (dI/dw) makes the Jacobian's symmetric part diagonal (eps k for FHN)
    if model.i2[1] == 0.0 and model.h[2] == 0.0 and model.i2[0] != 0.0 and model.h[1] != 0.0:
        mu = model.h[1] / model.i2[0]
        if mu > 0:
            return mu
    return None
