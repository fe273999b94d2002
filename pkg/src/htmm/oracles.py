"""Brute-force reference computations for validating the closed forms.

The exact likelihood is a literal sum over all (r+1)^(T+1) hidden paths;
the exact moment enumeration conditions on those paths and recombines the
per-transition photon means and second moments.  Both are deliberately
simple and slow: they exist to check the fast implementations, not to
replace them.
"""

import math
from dataclasses import dataclass

import numpy as np

from .alexa import CameraModel, ThetaParams
from .errors import BudgetExceeded, InsufficientData
from .markov import OuterModelSpec, build_matrices
from .moments import MomentSet

__all__ = [
    "EnumerationBudget",
    "PhotonLaw",
    "MonteCarloMoments",
    "exact_likelihood",
    "enumerate_marginals",
    "monte_carlo_moments",
]


@dataclass(frozen=True)
class EnumerationBudget:
    """Cap on the number of hidden paths an exact computation may visit."""

    max_paths: int = 10_000_000

    def check(self, n_states, T):
        paths = n_states ** (T + 1)
        if paths > self.max_paths:
            raise BudgetExceeded(
                f"{paths} hidden paths exceed the budget of "
                f"{self.max_paths}"
            )
        return paths


@dataclass(frozen=True)
class PhotonLaw:
    """Plug-in photon statistics: pmfs for staying bright and for exiting.

    ``p00(y)`` is the probability of y photons when the fluorophore starts
    and ends the exposure bright, ``p10(y)`` when it starts bright and
    exits.  All other transitions emit zero photons with probability one.
    """

    p00: object
    p10: object

    @staticmethod
    def deterministic(k, k_exit=0):
        """Exactly k photons while staying bright, k_exit on exit."""
        return PhotonLaw(
            p00=lambda y, k=k: 1.0 if y == k else 0.0,
            p10=lambda y, k=k_exit: 1.0 if y == k else 0.0,
        )

    @staticmethod
    def poisson(lam, lam_exit=None):
        lam_exit = lam if lam_exit is None else lam_exit

        def pmf(y, rate):
            return math.exp(-rate + y * math.log(rate) -
                            math.lgamma(y + 1)) if rate > 0 else float(y == 0)

        return PhotonLaw(p00=lambda y: pmf(y, lam),
                         p10=lambda y: pmf(y, lam_exit))

    @staticmethod
    def geometric(g, g_exit=None):
        """Geometric on {0, 1, ...} with failure probability g."""
        g_exit = g if g_exit is None else g_exit
        return PhotonLaw(
            p00=lambda y: (1.0 - g) * g**y,
            p10=lambda y: (1.0 - g_exit) * g_exit**y,
        )


@dataclass(frozen=True)
class MonteCarloMoments:
    """Empirical mean/covariance plus jackknife standard errors."""

    mu_hat: np.ndarray
    Sigma_hat: np.ndarray
    se_mu: np.ndarray
    se_Sigma: np.ndarray
    n_traces: int
    max_lag: int


def _step_matrix(spec, mats, photon_law, y):
    """Transition factor A[x, z] = sum_x' P(y)[x, x'] Ms[x, x'] Ml[x', z]."""
    n = spec.r + 1
    P = np.zeros((n, n))
    delta = 1.0 if y == 0 else 0.0
    P[:, 1:] = delta
    P[0, 0] = photon_law.p00(y)
    P[1:, 0] = photon_law.p10(y)
    return (P * mats.m_short) @ mats.m_long


def exact_likelihood(spec: OuterModelSpec, photon_law: PhotonLaw, y,
                     budget: EnumerationBudget = None):
    """Likelihood of an observed photon series by full path enumeration.

    Sums nu[x_0] * prod_t A_t[x_t, x_{t-1}] over every hidden path, where
    A_t couples the photon pmf at y_t with the two transition matrices.
    Terms are combined in log space with a streaming running-maximum
    summation, in a fixed depth-first order.
    """
    budget = budget or EnumerationBudget()
    y = np.asarray(y)
    T = len(y)
    n = spec.r + 1
    budget.check(n, T)
    spec.validate()
    mats = build_matrices(spec)
    steps = [_step_matrix(spec, mats, photon_law, int(y[t]))
             for t in range(T)]

    with np.errstate(divide="ignore"):
        log_steps = [np.log(A) for A in steps]
        log_nu = np.log(spec.nu)

    # streaming log-sum-exp accumulator
    acc_max = -np.inf
    acc_sum = 0.0

    def absorb(logw):
        nonlocal acc_max, acc_sum
        if logw == -np.inf:
            return
        if logw <= acc_max:
            acc_sum += math.exp(logw - acc_max)
        else:
            acc_sum = acc_sum * math.exp(acc_max - logw) + 1.0
            acc_max = logw

    def walk(t, state, logw):
        if t == T:
            absorb(logw)
            return
        column = log_steps[t][:, state]
        for nxt in range(n):
            lw = column[nxt]
            if lw != -np.inf:
                walk(t + 1, nxt, logw + lw)

    for x0 in range(n):
        if log_nu[x0] != -np.inf:
            walk(0, x0, log_nu[x0])

    if acc_max == -np.inf:
        return 0.0
    return math.exp(acc_max) * acc_sum


def _conditional_mean_tables(spec, mats, theta, f2):
    """Per-transition photon mean and second moment given z -> x.

    Only exposures that start bright emit photons.  The mean splits by
    destination (stay vs common exit); the second moment enters every
    entry through its bright-start pooled value, which is all the
    second-order parameters determine and all any moment of the trace
    depends on.
    """
    n = spec.r + 1
    q00 = float(spec.q[0, 0])
    t1, t2, t3 = theta.theta1, theta.theta2, theta.theta3
    mean_by_dest = np.empty(n)
    mean_by_dest[0] = t1 * t2 / q00
    mean_by_dest[1:] = t1 * (1.0 - t2) / (1.0 - q00)
    t3_eff = t3 + (f2 - 1.0) / t1
    second_pooled = t1 * t1 * (t3_eff + 1.0) + t1

    M = mats.m
    # P(X' = 0 and X_t = x | X_{t-1} = z)
    bright_prob = np.outer(spec.q[:, 0], mats.m_long[0, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(M > 0, bright_prob / M, 0.0)
    ey = weight * mean_by_dest[:, None]
    ey2 = weight * second_pooled
    return ey, ey2


def _enumerate_single(spec, ey, ey2, M, nu, T, budget, chunk=1 << 14):
    """Single-fluorophore mean/cross/second-moment sums over all paths."""
    n = M.shape[0]
    total = budget.check(n, T)
    mu = np.zeros(T)
    cross = np.zeros((T, T))
    diag = np.zeros(T)
    powers = n ** np.arange(T + 1)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = (idx[:, None] // powers[None, :]) % n
        w = nu[digits[:, 0]].astype(float)
        ebar = np.empty((len(idx), T))
        e2bar = np.empty((len(idx), T))
        for t in range(1, T + 1):
            z = digits[:, t - 1]
            x = digits[:, t]
            w = w * M[x, z]
            ebar[:, t - 1] = ey[x, z]
            e2bar[:, t - 1] = ey2[x, z]
        mu += w @ ebar
        diag += w @ e2bar
        cross += ebar.T @ (ebar * w[:, None])
    return mu, cross, diag


def enumerate_marginals(spec: OuterModelSpec, theta: ThetaParams, T,
                        m=1, camera: CameraModel = None,
                        budget: EnumerationBudget = None) -> MomentSet:
    """Exact trace moments by total expectation over enumerated paths.

    Conditionally on the hidden path, frame photon counts are independent
    with per-transition means and pooled second moments; summing over all
    paths gives the exact mean and covariance, scaled to m independent
    fluorophores, with camera noise terms added at the end.
    """
    budget = budget or EnumerationBudget()
    spec.validate()
    mats = build_matrices(spec)
    cam = camera if camera is not None else CameraModel(a=1.0, f2=1.0, o=0.0)
    ey, ey2 = _conditional_mean_tables(spec, mats, theta, cam.f2)

    mu1, cross1, diag1 = _enumerate_single(
        spec, ey, ey2, mats.m, spec.nu, T, budget
    )
    second1 = cross1 - np.outer(mu1, mu1)
    second1[np.diag_indices(T)] = diag1 - mu1**2

    e0 = np.zeros(spec.r + 1)
    e0[0] = 1.0
    mu0_1, _, _ = _enumerate_single(spec, ey, ey2, mats.m, e0, T, budget)

    mu = m * mu1
    Sigma = m * second1
    sigma_bg = cam.sigma_vector(T)
    Sigma[np.diag_indices(T)] += (sigma_bg / cam.a) ** 2
    mu0 = np.empty(T + 1)
    mu0[0] = m * theta.theta1 / float(spec.q[0, 0])
    mu0[1:] = m * mu0_1
    return MomentSet(mu=mu, mu0=mu0, Sigma=Sigma)


def monte_carlo_moments(traces, max_lag=None) -> MonteCarloMoments:
    """Empirical mean and covariance with jackknife standard errors.

    Standard errors for covariance entries are computed for lags up to
    ``max_lag`` (default: all) by leave-one-trace-out recombination of the
    running sums; entries outside the band are NaN.
    """
    ys = [t.y if hasattr(t, "y") else np.asarray(t, float) for t in traces]
    if len(ys) < 2:
        raise InsufficientData("need at least two traces")
    T = len(ys[0])
    if any(len(y) != T for y in ys):
        raise InsufficientData("traces must all have the same length")
    Y = np.stack(ys)
    n = Y.shape[0]
    if max_lag is None:
        max_lag = T - 1
    max_lag = min(max_lag, T - 1)

    mu_hat = Y.mean(axis=0)
    Sigma_hat = np.cov(Y, rowvar=False, ddof=1)
    if Sigma_hat.ndim == 0:  # T == 1
        Sigma_hat = Sigma_hat.reshape(1, 1)
    se_mu = Y.std(axis=0, ddof=1) / math.sqrt(n)

    se_Sigma = np.full((T, T), np.nan)
    for lag in range(max_lag + 1):
        x = Y[:, : T - lag]
        yv = Y[:, lag:]
        s1x = x.sum(axis=0)
        s1y = yv.sum(axis=0)
        prod = (x * yv).sum(axis=0)
        loo_mx = (s1x[None, :] - x) / (n - 1)
        loo_my = (s1y[None, :] - yv) / (n - 1)
        loo_c = (prod[None, :] - x * yv - (n - 1) * loo_mx * loo_my) / (n - 2)
        center = loo_c.mean(axis=0)
        se = np.sqrt((n - 1) / n * ((loo_c - center) ** 2).sum(axis=0))
        idx = np.arange(T - lag)
        se_Sigma[idx + lag, idx] = se
        se_Sigma[idx, idx + lag] = se
    return MonteCarloMoments(mu_hat=mu_hat, Sigma_hat=Sigma_hat,
                             se_mu=se_mu, se_Sigma=se_Sigma,
                             n_traces=n, max_lag=max_lag)
