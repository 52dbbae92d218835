"""One-hidden-layer sigmoid network used as the (auto-)regression function.

The network is

    f(y, theta) = nu_0 + sum_i nu_i * psi(<a_i, y> + b_i)

with the logistic activation ``psi``.  Parameters are stored as a flat vector
in the fixed coordinate order

    (nu_0, nu_1, ..., nu_h, a_11, ..., a_1k, a_21, ..., a_hk, b_1, ..., b_h)

where ``k = p + d`` is the regressor dimension.  Every score vector, gradient
and covariance matrix in the package uses this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from nnchange.errors import DimensionMismatch, ZeroOutputWeight

#: Units whose output weight is below this in absolute value are pruned.
PRUNE_TOL = 1e-10


@dataclass(frozen=True)
class NetworkShape:
    """Lag order ``p``, exogenous dimension ``d`` and hidden units ``h``."""

    p: int
    d: int = 0
    h: int = 1

    def __post_init__(self):
        for name in ("p", "d", "h"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.h >= 1 and self.p + self.d < 1:
            raise ValueError("a network with hidden units needs p + d >= 1 regressors")

    @property
    def k(self) -> int:
        """Regressor dimension ``p + d``."""
        return self.p + self.d

    @property
    def q(self) -> int:
        return param_dim(self)

    def with_h(self, h: int) -> "NetworkShape":
        return NetworkShape(self.p, self.d, h)

    # index helpers into the flat parameter vector
    @property
    def nu0_index(self) -> int:
        return 0

    @property
    def nu_slice(self) -> slice:
        return slice(1, 1 + self.h)

    @property
    def a_slice(self) -> slice:
        return slice(1 + self.h, 1 + self.h + self.h * self.k)

    @property
    def b_slice(self) -> slice:
        return slice(1 + self.h + self.h * self.k, self.q)


def param_dim(shape: NetworkShape) -> int:
    """Number of scalar parameters, ``(p + d + 2) h + 1``."""
    return (shape.p + shape.d + 2) * shape.h + 1


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Parameter vector ``theta`` of a network with a given shape.

    The flat vector is copied and made read-only on construction.
    """

    shape: NetworkShape
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        vec = np.array(self.vector, dtype=float).ravel()
        if vec.size != self.shape.q:
            raise DimensionMismatch(
                f"parameter vector has {vec.size} entries, shape {self.shape} needs {self.shape.q}"
            )
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @classmethod
    def from_parts(cls, nu0, nu=(), a=(), b=(), *, p: int | None = None, d: int = 0) -> "NetworkParams":
        """Build parameters from ``nu0``, output weights, input weights and biases.

        ``a`` has one row per hidden unit and ``p + d`` columns.  For ``h = 0``
        pass ``p`` explicitly if the network is to be evaluated on lagged data.
        """
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        h = nu.size
        if h:
            a = np.asarray(a, dtype=float).reshape(h, -1)
            if p is None:
                p = a.shape[1] - d
            if p + d != a.shape[1]:
                raise DimensionMismatch("input weights do not have p + d columns")
        else:
            a = np.zeros((0,))
            p = 0 if p is None else p
        if b.size != h:
            raise DimensionMismatch("need one bias per hidden unit")
        return cls(NetworkShape(p, d, h), np.concatenate([[float(nu0)], nu, a.ravel(), b]))

    @property
    def q(self) -> int:
        return self.shape.q

    @property
    def nu0(self) -> float:
        return float(self.vector[0])

    @property
    def nu(self) -> np.ndarray:
        return self.vector[self.shape.nu_slice]

    @property
    def a(self) -> np.ndarray:
        return self.vector[self.shape.a_slice].reshape(self.shape.h, self.shape.k)

    @property
    def b(self) -> np.ndarray:
        return self.vector[self.shape.b_slice]

    def units(self) -> list[tuple[float, np.ndarray, float]]:
        return [(float(self.nu[i]), self.a[i].copy(), float(self.b[i])) for i in range(self.shape.h)]

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.vector, other.vector)

    def __hash__(self):
        return hash((self.shape, self.vector.tobytes()))

    def to_dict(self) -> dict:
        return {
            "p": self.shape.p,
            "d": self.shape.d,
            "h": self.shape.h,
            "nu0": self.nu0,
            "nu": self.nu.tolist(),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkParams":
        shape = NetworkShape(data["p"], data.get("d", 0), data["h"])
        vec = np.concatenate(
            [[data["nu0"]], np.asarray(data["nu"], float), np.asarray(data["a"], float).ravel(), np.asarray(data["b"], float)]
        )
        return cls(shape, vec)


@dataclass(frozen=True, eq=False)
class ParameterBox:
    """Compact rectangle of admissible parameter vectors."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise DimensionMismatch("box bounds differ in length")
        if not np.all(lo < hi):
            raise ValueError("box needs lower < upper in every coordinate")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, q: int, bound: float = 10.0) -> "ParameterBox":
        return cls(np.full(q, -bound), np.full(q, bound))

    @property
    def q(self) -> int:
        return self.lower.size

    def contains(self, vector, tol: float = 0.0) -> bool:
        v = np.asarray(vector)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def project(self, vector) -> np.ndarray:
        return np.clip(vector, self.lower, self.upper)


def activation(y):
    """Logistic sigmoid ``1 / (1 + exp(-y))``."""
    return expit(y)


def activation_d1(y):
    s = expit(y)
    return s * (1.0 - s)


def activation_d2(y):
    s = expit(y)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _regressors(theta: NetworkParams, y) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=float)
    single = y.ndim <= 1
    y2 = y.reshape(1, -1) if single else y
    if y.ndim == 0:
        y2 = y.reshape(1, 1)
    if y2.shape[1] != theta.shape.k:
        raise DimensionMismatch(f"regressor has dimension {y2.shape[1]}, network expects {theta.shape.k}")
    return y2, single


def eval_network(theta: NetworkParams, y):
    """Evaluate the network at one regressor vector or at each row of a matrix."""
    y2, single = _regressors(theta, y)
    if theta.shape.h == 0:
        out = np.full(y2.shape[0], theta.nu0)
    else:
        out = theta.nu0 + activation(y2 @ theta.a.T + theta.b) @ theta.nu
    return float(out[0]) if single else out


def grad_network(theta: NetworkParams, y) -> np.ndarray:
    """Gradient of ``f`` with respect to the parameter vector.

    Returns shape ``(q,)`` for a single regressor, ``(n, q)`` for a matrix.
    """
    y2, single = _regressors(theta, y)
    n = y2.shape[0]
    sh = theta.shape
    g = np.empty((n, sh.q))
    g[:, 0] = 1.0
    if sh.h:
        s = activation(y2 @ theta.a.T + theta.b)
        dz = theta.nu * s * (1.0 - s)
        g[:, sh.nu_slice] = s
        g[:, sh.a_slice] = (dz[:, :, None] * y2[:, None, :]).reshape(n, sh.h * sh.k)
        g[:, sh.b_slice] = dz
    return g[0] if single else g


def prune(theta: NetworkParams, tol: float = PRUNE_TOL) -> NetworkParams:
    """Drop hidden units whose output weight is negligible.

    The dropped unit's contribution ``nu_i * psi(.)`` is below ``tol`` in
    absolute value everywhere, so the function changes by at most ``tol`` per unit.
    """
    keep = np.abs(theta.nu) >= tol
    if keep.all():
        return theta
    sh = theta.shape
    vec = np.concatenate([[theta.nu0], theta.nu[keep], theta.a[keep].ravel(), theta.b[keep]])
    return NetworkParams(sh.with_h(int(keep.sum())), vec)


def canonicalize(theta: NetworkParams) -> NetworkParams:
    """Map ``theta`` to the fundamental domain ``nu_1 >= ... >= nu_h > 0``.

    Each unit with a negative output weight is sign-flipped
    (``nu_0 += nu_k`` and ``nu_k, a_k, b_k`` negated), which leaves the network
    function unchanged because ``psi(-z) = 1 - psi(z)``.  Units are then
    sorted by output weight, descending; ties keep their original order.
    """
    sh = theta.shape
    if sh.h == 0:
        return theta
    nu = theta.nu.copy()
    if np.any(nu == 0.0):
        raise ZeroOutputWeight("a hidden unit has zero output weight; prune it before canonicalizing")
    a = theta.a.copy()
    b = theta.b.copy()
    nu0 = theta.nu0
    neg = nu < 0
    # flipped units in index order so nu0 accumulates deterministically
    for i in np.flatnonzero(neg):
        nu0 += nu[i]
    nu[neg] = -nu[neg]
    a[neg] = -a[neg]
    b[neg] = -b[neg]
    order = np.argsort(-nu, kind="stable")
    vec = np.concatenate([[nu0], nu[order], a[order].ravel(), b[order]])
    return NetworkParams(sh, vec)


def is_canonical(theta: NetworkParams) -> bool:
    nu = theta.nu
    return bool(np.all(nu > 0) and np.all(np.diff(nu) <= 0))
