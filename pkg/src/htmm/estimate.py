"""Constrained pseudo-maximum-likelihood estimation from a single trace.

The observed trace is approximated by a Gaussian process with the model's
exact first two moments; the fluorophore count is profiled over an integer
grid while the continuous parameters are optimized per grid point by a
block-coordinate derivative-free search.  Equality constraints are
eliminated by substitution, inequality constraints by logistic
reparameterization, so every evaluated candidate satisfies the coefficient
constraints by construction.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.ndimage import uniform_filter1d
from scipy.optimize import minimize, nnls
from scipy.special import expit, logit

from .alexa import CameraModel, ThetaParams
from .errors import (
    ConstraintViolation,
    DegenerateTrace,
    IllConditioned,
    NoConvergence,
    SigmaNotPD,
)
from .moments import SecondOrderParams, check_constraints, covariance

__all__ = [
    "FitOptions",
    "FitResult",
    "CalibrationResult",
    "pseudo_loglik",
    "init_params",
    "fit",
    "calibrate_camera",
]

_LAM_EPS = 1e-6
_Q00_MIN = 1e-6
_Q00_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class FitOptions:
    """Knobs of the profile fit.

    nu0 = None lets the initially-bright fraction float; a number fixes
    it (1.0 drops the dark-start coefficients entirely).  With
    ``alexa_theta2`` the bright-stay contribution fraction is bound to
    q00 through the burst model instead of being a free parameter.
    """

    r: int
    m_grid: tuple = tuple(range(1, 21))
    nu0: object = 1.0
    restarts: int = 1
    tol: float = 0.5
    max_iters: int = 12
    seed: int = 0
    alexa_theta2: bool = True

    def __post_init__(self):
        object.__setattr__(self, "m_grid",
                           tuple(int(m) for m in self.m_grid))
        if not self.m_grid:
            raise ValueError("m_grid must not be empty")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class FitResult:
    gamma_hat: SecondOrderParams
    m_hat: int
    loglik: float
    profile: list
    diagnostics: dict

    def to_dict(self):
        return {
            "gamma_hat": self.gamma_hat.to_dict(),
            "m_hat": self.m_hat,
            "loglik": self.loglik,
            "profile": [[m, ll] for m, ll in self.profile],
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True)
class CalibrationResult:
    a: float
    const: float


def _trace_array(y):
    return np.asarray(y.y if hasattr(y, "y") else y, dtype=float)


def pseudo_loglik(gamma: SecondOrderParams, camera: CameraModel, y,
                  tol=1e-6) -> float:
    """Gaussian-surrogate log-likelihood of a trace (additive const dropped).

    -(1/2) [(y - mu)' Sigma^-1 (y - mu) + log det Sigma] computed through a
    Cholesky factorization.  If the factorization fails, a diagonal jitter
    of 1e-10 trace(Sigma)/T is added once, then 1e-8 trace(Sigma)/T;
    failure after that raises SigmaNotPD.
    """
    yv = _trace_array(y)
    T = len(yv)
    ms = covariance(gamma, camera, T, tol=tol)
    resid = yv - ms.mu
    base = np.trace(ms.Sigma) / T
    factor = None
    for jitter in (0.0, 1e-10 * base, 1e-8 * base):
        try:
            factor = scipy.linalg.cho_factor(
                ms.Sigma + jitter * np.eye(T) if jitter else ms.Sigma,
                lower=True,
            )
            break
        except (scipy.linalg.LinAlgError, ValueError):
            continue
    if factor is None:
        raise SigmaNotPD("covariance not positive definite after jitter")
    solved = scipy.linalg.cho_solve(factor, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(-0.5 * (resid @ solved + logdet))


def _moving_average(y, window):
    if window <= 1:
        return y.copy()
    # edge-replicating filter; zero padding would bias the first frames,
    # which carry the bright-start level the initialization keys on
    return uniform_filter1d(y, size=window, mode="nearest")


def _theta2_from_q00(q00):
    return -q00 * math.log(q00) / (1.0 - q00)


def _multi_exp_fit(smooth, r, T):
    """Non-negative least squares over combinations of a decay-rate grid.

    Returns (lam, coeffs) of length r, descending in lam; missing scales
    are padded with slow decays near 1 and zero mass.
    """
    taus = np.geomspace(0.5, 4.0 * T, 25)
    grid = np.exp(-1.0 / taus)
    t = np.arange(T)[:, None]
    columns = grid[None, :] ** t
    best = None
    for combo in itertools.combinations(range(len(grid)), r):
        A = columns[:, combo]
        coef, resid = nnls(A, smooth)
        if best is None or resid < best[0]:
            best = (resid, grid[list(combo)], coef)
    _, lam, coeffs = best
    # pad decay scales that got no mass with slow near-unity placeholders
    pad = 1.0 - 1e-3
    for i in range(r):
        if coeffs[i] <= 0:
            lam[i] = pad
            pad = 1.0 - (1.0 - pad) / 2.0
            coeffs[i] = 0.0
    order = np.argsort(-lam)
    return lam[order], coeffs[order]


def init_params(y, r, camera: CameraModel,
                m_grid=tuple(range(1, 21)),
                alexa_theta2=True) -> SecondOrderParams:
    """Initial parameter guess from the trace itself.

    Smooths the trace, fits an r-term exponential decay to pin the
    eigenvalues and their weights, reads the single-molecule brightness
    off the late-trace activity plateau, and derives q00 from the
    coefficient identity.  Raises DegenerateTrace when the trace carries
    no usable signal.
    """
    yv = _trace_array(y)
    T = len(yv)
    if T < 10 * r:
        raise ValueError(f"need at least {10 * r} frames for r={r}, got {T}")
    window = math.ceil(T / 50)
    smooth = _moving_average(yv, window)
    if np.max(smooth) <= 0.0 or np.max(yv) <= 0.0:
        raise DegenerateTrace("trace has no positive signal")

    lam, coeffs = _multi_exp_fit(np.clip(smooth, 0.0, None), r, T)
    total = float(np.sum(coeffs))
    if total <= 0.0:
        raise DegenerateTrace("exponential fit found no decaying mass")

    sigma_scale = float(np.mean(camera.sigma_vector(T))) / camera.a
    late = yv[3 * T // 4:]
    active = late[late > 3.0 * sigma_scale]
    if len(active) >= 5:
        srt = np.sort(active)
        cut = max(1, len(srt) // 10)
        theta1 = float(srt[cut:-cut].mean()) if len(srt) > 2 * cut \
            else float(srt.mean())
    else:
        theta1 = float(np.max(yv)) / 2.0
    theta1 = max(theta1, 1e-6)

    m_init = int(round(total / theta1))
    m_init = min(max(m_init, min(m_grid)), max(m_grid))

    alpha0 = np.zeros(r + 1)
    alpha0[:r] = coeffs / total
    # zero-weight slots get no say; make the weights sum exactly to 1
    alpha0[0] += 1.0 - alpha0.sum()
    lam_full = np.append(np.clip(lam, _LAM_EPS, 1.0 - 1e-4), 1.0)
    denom = float((alpha0[:r] / lam_full[:r]).sum())
    q00 = float(np.clip(1.0 / denom, 1e-4, 1.0 - 1e-4))
    theta2 = _theta2_from_q00(q00) if alexa_theta2 else 0.5
    theta = ThetaParams(theta1=theta1, theta2=theta2, theta3=1e-6)
    return SecondOrderParams(
        m=m_init, nu0=1.0, q00=q00, lam=lam_full, alpha0=alpha0,
        alpha1=np.zeros(r + 1), theta=theta,
    )


class _ParamSpace:
    """Bijective map between optimizer coordinates and valid parameters.

    Layout: r logistic eigenvalue coordinates, r-1 free bright-start
    weights, log theta1, log(1 + theta3), then optionally a logistic
    theta2, a logistic nu0, and r-1 free dark-start weights.  q00, the
    leading weights of both coefficient vectors, and theta2 (in the
    burst-model mode) are derived, so the equality constraints hold
    identically.
    """

    def __init__(self, r, nu0, alexa_theta2):
        self.r = r
        self.nu0_fixed = nu0
        self.alexa_theta2 = alexa_theta2
        idx = {}
        pos = 0
        idx["lam"] = slice(pos, pos + r)
        pos += r
        idx["alpha0"] = slice(pos, pos + r - 1)
        pos += r - 1
        idx["theta1"] = pos
        pos += 1
        idx["theta3"] = pos
        pos += 1
        if not alexa_theta2:
            idx["theta2"] = pos
            pos += 1
        if nu0 is None:
            idx["nu0"] = pos
            pos += 1
        if self._alpha1_active():
            idx["alpha1"] = slice(pos, pos + r - 1)
            pos += r - 1
        self.idx = idx
        self.size = pos

    def _alpha1_active(self):
        if self.r < 2:
            return False
        return self.nu0_fixed is None or self.nu0_fixed < 1.0

    def blocks(self):
        """Coordinate blocks for the cyclic search."""
        out = [list(range(self.idx["lam"].start, self.idx["alpha0"].stop))]
        photon = [self.idx["theta1"], self.idx["theta3"]]
        if "theta2" in self.idx:
            photon.append(self.idx["theta2"])
        out.append(photon)
        start = []
        if "nu0" in self.idx:
            start.append(self.idx["nu0"])
        if "alpha1" in self.idx:
            start.extend(range(self.idx["alpha1"].start,
                               self.idx["alpha1"].stop))
        if start:
            out.append(start)
        return out

    def pack(self, gamma):
        x = np.zeros(self.size)
        lam = np.clip(gamma.lam[:-1], _LAM_EPS * 1.5, 1.0 - _LAM_EPS * 1.5)
        x[self.idx["lam"]] = logit((lam - _LAM_EPS) / (1.0 - 2 * _LAM_EPS))
        x[self.idx["alpha0"]] = gamma.alpha0[1:self.r]
        x[self.idx["theta1"]] = math.log(gamma.theta.theta1)
        x[self.idx["theta3"]] = math.log1p(max(gamma.theta.theta3,
                                               -1.0 + 1e-9))
        if "theta2" in self.idx:
            x[self.idx["theta2"]] = logit(np.clip(gamma.theta.theta2,
                                                  1e-9, 1 - 1e-9))
        if "nu0" in self.idx:
            x[self.idx["nu0"]] = logit(np.clip(gamma.nu0, 1e-9, 1 - 1e-9))
        if "alpha1" in self.idx:
            x[self.idx["alpha1"]] = gamma.alpha1[1:self.r]
        return x

    def unpack(self, x, m):
        """Build parameters from coordinates; returns (gamma, penalty)."""
        r = self.r
        lam = _LAM_EPS + (1.0 - 2 * _LAM_EPS) * expit(x[self.idx["lam"]])
        lam = np.sort(lam)[::-1]
        lam_full = np.append(lam, 1.0)

        alpha0 = np.empty(r + 1)
        alpha0[1:r] = x[self.idx["alpha0"]]
        alpha0[r] = 0.0
        alpha0[0] = 1.0 - alpha0[1:r].sum()
        denom = float((alpha0[:r] / lam).sum())
        if denom <= 0.0:
            return None, 1.0 + abs(denom)
        q00 = 1.0 / denom
        if not _Q00_MIN < q00 < _Q00_MAX:
            return None, 1.0 + abs(q00 - 0.5)

        theta1 = math.exp(min(max(x[self.idx["theta1"]], -40.0), 40.0))
        theta3 = math.expm1(min(max(x[self.idx["theta3"]], -30.0), 30.0))
        if self.alexa_theta2:
            theta2 = _theta2_from_q00(q00)
        else:
            theta2 = 1e-9 + (1 - 2e-9) * expit(x[self.idx["theta2"]])

        nu0 = self.nu0_fixed
        if nu0 is None:
            nu0 = float(expit(x[self.idx["nu0"]]))

        alpha1 = np.zeros(r + 1)
        if "alpha1" in self.idx:
            alpha1[1:r] = x[self.idx["alpha1"]]
            alpha1[0] = -lam[0] * float((alpha1[1:r] / lam[1:]).sum())
            s = q00 * alpha1.sum()
            if s < 0.0 or s > 1.0:
                return None, 1.0 + max(-s, s - 1.0)

        theta = ThetaParams(theta1=theta1, theta2=theta2, theta3=theta3)
        gamma = SecondOrderParams(m=m, nu0=nu0, q00=q00, lam=lam_full,
                                  alpha0=alpha0, alpha1=alpha1, theta=theta)
        return gamma, 0.0


_REJECTED = 1e8


def _profile_point(space, x0, m, camera, yv, options, rng):
    """Optimize the continuous parameters for one candidate m."""
    evals = [0]

    def objective(x):
        evals[0] += 1
        gamma, penalty = space.unpack(x, m)
        if gamma is None:
            return _REJECTED * (1.0 + penalty)
        try:
            return -pseudo_loglik(gamma, camera, yv)
        except (SigmaNotPD, ConstraintViolation, FloatingPointError):
            return _REJECTED

    def rescue(x):
        """Inflate theta3 until the start covariance is positive definite.

        A larger excess variance only grows the diagonal, so some rung of
        the ladder is feasible whenever the mean scale is sane.
        """
        if objective(x) < _REJECTED:
            return x
        for theta3 in (1.0, 3.0, 8.0, 20.0, 50.0):
            trial = x.copy()
            trial[space.idx["theta3"]] = math.log1p(theta3)
            if objective(trial) < _REJECTED:
                return trial
        return x

    best_x = None
    best_f = np.inf
    converged = False
    for restart in range(options.restarts):
        x = x0.copy()
        if restart > 0:
            x = x + rng.normal(0.0, 0.25, size=len(x))
        x = rescue(x)
        f = objective(x)
        for cycle in range(options.max_iters):
            f_cycle = f
            for block in space.blocks():
                sub0 = x[block]

                def sub_obj(xb, block=block):
                    trial = x.copy()
                    trial[block] = xb
                    return objective(trial)

                nm_options = {"xatol": 1e-5, "fatol": options.tol / 10.0}
                if cycle == 0:
                    nm_options["maxfev"] = 100 * len(block) + 80
                else:
                    # polish with a tight simplex around the current point
                    nm_options["maxfev"] = 40 * len(block) + 30
                    simplex = np.tile(sub0, (len(block) + 1, 1))
                    for j in range(len(block)):
                        simplex[j + 1, j] += 0.05
                    nm_options["initial_simplex"] = simplex
                res = minimize(
                    sub_obj, sub0, method="Nelder-Mead",
                    options=nm_options,
                )
                if res.fun < f:
                    x[block] = res.x
                    f = float(res.fun)
            if f_cycle - f < options.tol:
                converged = True
                break
        if f < best_f:
            best_f = f
            best_x = x.copy()
    return best_x, -best_f, evals[0], converged


def fit(y, camera: CameraModel, options: FitOptions) -> FitResult:
    """Profile pseudo-maximum-likelihood over the fluorophore-count grid.

    Every integer m in the grid gets its own block-coordinate optimization
    of the continuous parameters; the reported estimate maximizes the
    profile, with ties broken toward smaller m.  Deterministic for fixed
    (trace, options).

    Raises
    ------
    NoConvergence
        When the winning profile point never met the improvement
        criterion; the partial result is attached to the exception.
    """
    yv = _trace_array(y)
    init = init_params(yv, options.r, camera,
                       m_grid=options.m_grid,
                       alexa_theta2=options.alexa_theta2)
    space = _ParamSpace(options.r, options.nu0, options.alexa_theta2)
    x0 = space.pack(init)

    # the initial trace level pins m * theta1, so each profile point gets
    # the brightness rescaled to its own candidate count
    smooth = _moving_average(yv, math.ceil(len(yv) / 50))
    level = max(float(np.max(smooth)), 1e-6)

    profile = []
    best = None
    total_evals = 0
    for k, m in enumerate(options.m_grid):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=options.seed & (2**63 - 1),
                                   spawn_key=(k,))
        )
        x0_m = x0.copy()
        x0_m[space.idx["theta1"]] = math.log(level / m)
        x_m, ll_m, evals, conv = _profile_point(
            space, x0_m, m, camera, yv, options, rng
        )
        total_evals += evals
        profile.append((m, ll_m))
        if best is None or ll_m > best[1]:
            best = (m, ll_m, x_m, conv)

    m_hat, loglik, x_hat, converged = best
    gamma_hat, _ = space.unpack(x_hat, m_hat)
    report = check_constraints(gamma_hat)
    try:
        ms = covariance(gamma_hat, camera, len(yv))
        sigma_cond = float(np.linalg.cond(ms.Sigma))
    except ConstraintViolation:
        sigma_cond = float("nan")
    result = FitResult(
        gamma_hat=gamma_hat,
        m_hat=int(m_hat),
        loglik=float(loglik),
        profile=profile,
        diagnostics={
            "converged": bool(converged),
            "iterations": int(total_evals),
            "constraint_residuals": report.max_residual(),
            "sigma_condition": sigma_cond,
        },
    )
    if not converged:
        raise NoConvergence("profile optimum did not meet the improvement "
                            "criterion", result=result)
    return result


def calibrate_camera(pixel_stats, f2) -> CalibrationResult:
    """Amplification factor from a variance-vs-mean regression.

    Constant illumination makes per-pixel photon counts Poisson, so the
    camera output satisfies Var = a f^2 E + const; ordinary least squares
    on (mean, variance) pairs recovers a given the excess noise factor.
    """
    stats = np.asarray(pixel_stats, dtype=float)
    if stats.ndim != 2 or stats.shape[1] != 2 or stats.shape[0] < 3:
        raise IllConditioned("need at least three (mean, variance) pairs")
    means = stats[:, 0]
    variances = stats[:, 1]
    lo, hi = float(np.min(means)), float(np.max(means))
    if hi - lo < 10.0 * lo:
        raise IllConditioned(
            f"mean range [{lo:g}, {hi:g}] too narrow for a stable slope"
        )
    slope, intercept = np.polyfit(means, variances, 1)
    return CalibrationResult(a=float(slope / f2), const=float(intercept))
