"""Multinomial logit likelihood, analytic derivatives and a Newton solver."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .impedance import ImpedanceKind
from .sampling import FEATURES, ChoiceData

RIDGE = 1e-8


class SingularHessianError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    impedance_kind: ImpedanceKind
    variables: tuple = FEATURES

    def __post_init__(self):
        object.__setattr__(self, "impedance_kind", ImpedanceKind(self.impedance_kind))

    @property
    def K(self):
        return len(self.variables)


@dataclass
class EstimationResult:
    beta: np.ndarray
    ll: float
    ll0: float
    rho2: float
    adj_rho2: float
    n_obs: int
    converged: bool
    iterations: int
    impedance_kind: str = "mean"
    variables: tuple = FEATURES
    gradient_max: float = float("nan")
    cov: np.ndarray | None = field(default=None, repr=False)

    @property
    def std_errors(self):
        if self.cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def to_dict(self):
        d = {
            "impedance_kind": str(ImpedanceKind(self.impedance_kind).value),
            "variables": list(self.variables),
            "beta": [float(b) for b in self.beta],
            "ll": float(self.ll),
            "ll0": float(self.ll0),
            "rho2": float(self.rho2),
            "adj_rho2": float(self.adj_rho2),
            "n_obs": int(self.n_obs),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_max": float(self.gradient_max),
        }
        se = self.std_errors
        d["asymptotic_se"] = None if se is None else [float(s) for s in se]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def utility(beta, feature_row) -> float:
    beta = np.asarray(beta, dtype=float)
    row = np.asarray(feature_row, dtype=float)
    if beta.shape != row.shape:
        raise ValueError(f"dimension mismatch: beta {beta.shape} vs features {row.shape}")
    return float(beta @ row)


def choice_probabilities(utilities):
    v = np.asarray(utilities, dtype=float)
    if v.size == 0:
        raise ValueError("empty utility vector")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _as_data(choice_sets):
    if isinstance(choice_sets, ChoiceData):
        return choice_sets
    return ChoiceData.stack(choice_sets)


def log_likelihood(beta, choice_sets, with_derivatives=False):
    """Log-likelihood of the chosen alternatives (position 0 of every set).

    Returns ``ll`` or, with ``with_derivatives``, ``(ll, gradient, hessian)``.
    Correction offsets carried by the data enter every utility unscaled.
    """
    data = _as_data(choice_sets)
    if len(data) == 0:
        raise ValueError("empty data")
    beta = np.asarray(beta, dtype=float)
    X = data.X
    V = X @ beta + data.offsets
    lse = logsumexp(V, axis=1)
    ll = float(np.sum(V[:, 0] - lse))
    if not with_derivatives:
        return ll
    P = np.exp(V - lse[:, None])
    xbar = np.einsum("nj,njk->nk", P, X)
    grad = np.sum(X[:, 0, :] - xbar, axis=0)
    D = X - xbar[:, None, :]
    hess = -np.einsum("nj,njk,njl->kl", P, D, D)
    return ll, grad, hess


def fit_statistics(ll, ll0, K, n_obs=None):
    """Return ``(rho2, adj_rho2)``."""
    if not ll0 < 0:
        raise ValueError(f"null log-likelihood must be negative, got {ll0}")
    rho2 = 1.0 - ll / ll0
    adj = 1.0 - (ll - K) / ll0
    return rho2, adj


def _newton_step(grad, hess):
    A = -hess
    try:
        if np.linalg.cond(A) < 1e14:
            return np.linalg.solve(A, grad)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.solve(A + RIDGE * np.eye(len(grad)), grad)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError("Hessian singular even after ridge") from exc


def estimate(choice_sets, spec: ModelSpec, init=None, tol=1e-8, max_iter=100) -> EstimationResult:
    """Maximum likelihood by Newton-Raphson with step halving.

    Stops when the gradient max-norm drops below ``tol``. When that never
    happens within ``max_iter`` iterations the best iterate is returned with
    ``converged=False``.
    """
    data = _as_data(choice_sets)
    K = data.X.shape[2]
    if K != spec.K:
        raise ValueError(f"data has {K} features, spec expects {spec.K}")
    beta = np.zeros(K) if init is None else np.array(init, dtype=float)
    ll0 = log_likelihood(np.zeros(K), data)
    ll, grad, hess = log_likelihood(beta, data, True)
    it = 0
    while it < max_iter and np.max(np.abs(grad)) >= tol:
        step = _newton_step(grad, hess)
        t = 1.0
        while t > 1e-12:
            cand = beta + t * step
            ll_c = log_likelihood(cand, data)
            # slack absorbs rounding once the optimum is reached
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            break  # no ascent direction left at machine precision
        beta = cand
        ll, grad, hess = log_likelihood(beta, data, True)
        it += 1
    converged = bool(np.max(np.abs(grad)) < tol)
    rho2, adj = fit_statistics(ll, ll0, K, len(data))
    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        cov = None
    return EstimationResult(beta, ll, ll0, rho2, adj, len(data), converged, it,
                            spec.impedance_kind.value, tuple(spec.variables),
                            float(np.max(np.abs(grad))), cov)


def predict_probabilities(beta, data: ChoiceData):
    """Behavioural probabilities within each sampled set, without correction offsets."""
    return choice_probabilities(data.X @ np.asarray(beta, dtype=float))
