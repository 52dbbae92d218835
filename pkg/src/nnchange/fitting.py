"""Lag embedding and least-squares estimation of the network parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from nnchange.errors import DimensionMismatch, TooShort
from nnchange.nn_model import (
    PRUNE_TOL,
    NetworkParams,
    NetworkShape,
    ParameterBox,
    canonicalize,
    eval_network,
    grad_network,
    prune,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    """Responses ``x[t] = X_t`` and regressors ``y[t] = Y_t`` for ``t = 1..n``.

    Row ``t`` of ``y`` holds ``(X_{t-1}, ..., X_{t-p}, V_t)`` where ``V_t`` is
    the exogenous regressor vector aligned with response ``t``.
    """

    x: np.ndarray
    y: np.ndarray
    shape: NetworkShape

    def __post_init__(self):
        x = np.array(self.x, dtype=float).ravel()
        y = np.array(self.y, dtype=float).reshape(x.size, -1) if np.size(self.y) else np.zeros((x.size, 0))
        if y.shape != (x.size, self.shape.k):
            raise DimensionMismatch(f"regressor matrix has shape {y.shape}, expected ({x.size}, {self.shape.k})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.size

    def segment(self, start: int, stop: int) -> "RegressionDataset":
        """Observations ``start+1 .. stop`` (1-based), i.e. rows ``start:stop``."""
        return RegressionDataset(self.x[start:stop], self.y[start:stop], self.shape)

    def with_h(self, h: int) -> "RegressionDataset":
        return RegressionDataset(self.x, self.y, self.shape.with_h(h))


def embed_series(raw, exogenous=None, shape: NetworkShape | None = None) -> RegressionDataset:
    """Turn a raw series ``X_{-p+1}, ..., X_n`` into a regression dataset.

    Parameters
    ----------
    raw : array_like
        Series of length ``n + p``; the first ``p`` values only serve as lags.
    exogenous : array_like, optional
        Matrix with ``n`` rows and ``d`` columns, row ``t`` aligned with the
        response ``X_t``.
    shape : NetworkShape
        Supplies ``p``, ``d`` and ``h``.
    """
    if shape is None:
        raise TypeError("shape is required")
    raw = np.asarray(raw, dtype=float).ravel()
    p, d = shape.p, shape.d
    if raw.size < p + 2:
        raise TooShort(f"need at least p + 2 = {p + 2} observations, got {raw.size}")
    n = raw.size - p
    cols = [raw[p - j : p - j + n] for j in range(1, p + 1)]
    if d:
        if exogenous is None:
            raise DimensionMismatch("shape has d > 0 but no exogenous regressors were given")
        v = np.asarray(exogenous, dtype=float).reshape(-1, d) if np.ndim(exogenous) < 2 else np.asarray(exogenous, float)
        if v.shape != (n, d):
            raise DimensionMismatch(f"exogenous matrix has shape {v.shape}, expected ({n}, {d})")
        cols.extend(v.T)
    elif exogenous is not None and np.size(exogenous):
        raise DimensionMismatch("exogenous regressors given but shape has d = 0")
    y = np.column_stack(cols) if cols else np.zeros((n, 0))
    return RegressionDataset(raw[p:], y, shape)


def _check(theta: NetworkParams, data: RegressionDataset):
    if theta.shape.k != data.shape.k:
        raise DimensionMismatch(f"network expects {theta.shape.k} regressors, data has {data.shape.k}")


def residuals(theta: NetworkParams, data: RegressionDataset) -> np.ndarray:
    _check(theta, data)
    return data.x - eval_network(theta, data.y)


def sse_loss(theta: NetworkParams, data: RegressionDataset) -> float:
    """Least-squares criterion ``Q_n(theta) = sum_t (X_t - f(Y_t, theta))^2``."""
    r = residuals(theta, data)
    return float(r @ r)


def grad_loss(theta: NetworkParams, data: RegressionDataset) -> np.ndarray:
    """Gradient of ``Q_n``; equals ``-2`` times the full-sample score sum."""
    r = residuals(theta, data)
    return -2.0 * (grad_network(theta, data.y).T @ r)


# raw-vector versions used inside the optimizer (no dataclass overhead)
def _loss_and_grad(vec, x, y, h, k):
    nu0 = vec[0]
    if h == 0:
        r = x - nu0
        return float(r @ r), np.array([-2.0 * r.sum()])
    nu = vec[1 : 1 + h]
    a = vec[1 + h : 1 + h + h * k].reshape(h, k)
    b = vec[1 + h + h * k :]
    s = expit(y @ a.T + b)
    r = x - nu0 - s @ nu
    dz = s * (1.0 - s) * nu
    dzr = dz * r[:, None]
    g = np.empty(vec.size)
    g[0] = r.sum()
    g[1 : 1 + h] = r @ s
    g[1 + h : 1 + h + h * k] = (dzr.T @ y).ravel()
    g[1 + h + h * k :] = dzr.sum(axis=0)
    return float(r @ r), -2.0 * g


def _projected_grad_norm(vec, g, box: ParameterBox) -> float:
    pg = g.copy()
    at_lo = (vec <= box.lower) & (g > 0)
    at_hi = (vec >= box.upper) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return float(np.linalg.norm(pg))


def _polish(vec, x, y, shape: NetworkShape, box: ParameterBox, grad_tol: float, iters: int):
    """Levenberg-Marquardt refinement of a local minimizer, projected to the box."""
    theta = NetworkParams(shape, vec)
    f, g = _loss_and_grad(vec, x, y, shape.h, shape.k)
    mu = 1e-3
    for _ in range(iters):
        if _projected_grad_norm(vec, g, box) <= grad_tol:
            break
        jac = grad_network(theta, y)
        hess = 2.0 * jac.T @ jac
        diag = np.diag(hess).copy()
        improved = False
        for _ in range(12):
            try:
                step = np.linalg.solve(hess + mu * (diag + 1e-12 * diag.max() + 1e-300) * np.eye(vec.size), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = box.project(vec + step)
            fc, gc = _loss_and_grad(cand, x, y, shape.h, shape.k)
            # near the optimum SSE changes drown in rounding; then accept gradient decrease
            flat = fc <= f + 1e-13 * abs(f) and np.linalg.norm(gc) < np.linalg.norm(g)
            if fc < f or flat:
                improved = True
                vec, f, g = cand, fc, gc
                theta = NetworkParams(shape, vec)
                mu = max(mu / 10.0, 1e-12)
                break
            mu *= 10.0
        if not improved:
            break
    return vec, f, g


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``box=None`` means the symmetric box ``[-10, 10]^q`` for whatever ``q``
    the data shape implies.
    """

    box: ParameterBox | None = None
    restarts: int = 20
    max_iters: int = 500
    grad_tol: float = 1e-6
    seed: int = 0
    polish_iters: int = 50

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")

    def box_for(self, q: int) -> ParameterBox:
        if self.box is None:
            return ParameterBox.symmetric(q, 10.0)
        if self.box.q != q:
            raise DimensionMismatch(f"parameter box has dimension {self.box.q}, model has {q}")
        return self.box

    def to_dict(self) -> dict:
        return {
            "box": None if self.box is None else [self.box.lower.tolist(), self.box.upper.tolist()],
            "restarts": self.restarts,
            "max_iters": self.max_iters,
            "grad_tol": self.grad_tol,
            "seed": self.seed,
            "polish_iters": self.polish_iters,
        }


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: NetworkParams
    sse: float
    converged: bool
    restarts_used: int
    grad_norm: float
    best_restart: int = 0
    raw_theta: NetworkParams | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "sse": self.sse,
            "converged": self.converged,
            "restarts_used": self.restarts_used,
            "grad_norm": self.grad_norm,
            "best_restart": self.best_restart,
        }

    def __eq__(self, other):
        if not isinstance(other, FitResult):
            return NotImplemented
        return (
            self.theta_hat == other.theta_hat
            and self.sse == other.sse
            and self.converged == other.converged
            and self.restarts_used == other.restarts_used
            and self.grad_norm == other.grad_norm
        )


def _constant_fit(data: RegressionDataset) -> FitResult:
    shape = data.shape.with_h(0)
    theta = NetworkParams(shape, [float(np.mean(data.x))])
    sub = data.with_h(0)
    g = grad_loss(theta, sub)
    return FitResult(theta, sse_loss(theta, sub), True, 0, float(np.linalg.norm(g)), 0, theta)


def _start_points(shape: NetworkShape, box: ParameterBox, cfg: FitConfig, x, warm_start, local=False):
    """Warm starts first, then a start at the constant fit, then uniform draws."""
    starts = []
    for w in warm_start or ():
        vec = w.vector if isinstance(w, NetworkParams) else np.asarray(w, float)
        if vec.size == shape.q:
            starts.append(box.project(vec))
    if local:
        if not starts:
            raise ValueError("a local fit needs a warm start of matching dimension")
        return starts
    # nu0 + eps * psi(0) equals the sample mean, so this start has the constant-fit SSE
    eps = 1e-2
    const = np.zeros(shape.q)
    const[0] = np.mean(x) - 0.5 * eps * shape.h
    const[shape.nu_slice] = eps
    starts.append(box.project(const))
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        starts.append(rng.uniform(box.lower, box.upper))
    return starts


def fit_network(data: RegressionDataset, cfg: FitConfig | None = None, warm_start=None, local: bool = False) -> FitResult:
    """Least-squares fit of the network over the parameter box.

    Runs L-BFGS-B from every start point (optional warm starts, the constant
    fit, and ``cfg.restarts`` uniform draws from the box; draw ``k`` uses
    substream ``k`` of ``cfg.seed``), keeps the lowest SSE with the earliest
    start winning ties, refines it with projected Levenberg-Marquardt steps,
    prunes negligible units and maps the result to the fundamental domain.

    With ``local=True`` only the warm starts are used, which refines a known
    solution without searching for other basins.
    """
    cfg = cfg or FitConfig()
    shape = data.shape
    if data.n <= shape.q:
        raise TooShort(f"need n > q = {shape.q} observations, got {data.n}")
    if shape.h == 0 or np.ptp(data.x) == 0.0:
        return _constant_fit(data)

    box = cfg.box_for(shape.q)
    x, y = data.x, data.y
    h, k = shape.h, shape.k
    bounds = list(zip(box.lower, box.upper))
    best_vec, best_f, best_idx = None, np.inf, -1
    starts = _start_points(shape, box, cfg, x, warm_start, local)
    for idx, start in enumerate(starts):
        res = minimize(
            _loss_and_grad,
            start,
            args=(x, y, h, k),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": cfg.max_iters, "ftol": 1e-15, "gtol": cfg.grad_tol * 1e-2},
        )
        if res.fun < best_f:
            best_vec, best_f, best_idx = res.x, float(res.fun), idx
    vec, f, g = _polish(best_vec, x, y, shape, box, cfg.grad_tol, cfg.polish_iters)
    converged = _projected_grad_norm(vec, g, box) <= cfg.grad_tol
    raw = NetworkParams(shape, vec)
    theta = canonicalize(prune(raw))
    sub = data.with_h(theta.shape.h)
    const_sse = float(np.sum((x - x.mean()) ** 2))
    sse = sse_loss(theta, sub)
    if sse > const_sse:
        return _constant_fit(data)
    grad_norm = float(np.linalg.norm(grad_loss(theta, sub)))
    if not converged:
        logger.debug("fit did not reach grad_tol=%g (projected gradient %g)", cfg.grad_tol, grad_norm)
    return FitResult(theta, sse, bool(converged), len(starts), grad_norm, best_idx, raw)
