"""Closed-form first and second moments of multi-fluorophore traces.

The expected trace is a superposition of exponential decays in the
eigenvalues of the combined transition matrix; the covariance follows from
the bright-start expectation and the second-order photon parameters.  Two
independent implementations are provided: the spectral formulas driven by
eigen-coefficients, and a matrix-power route that never diagonalizes.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .alexa import CameraModel, ThetaParams
from .errors import ComplexSpectrum, ConstraintViolation, InvalidSpec
from .markov import OuterModelSpec, SpectralDecomposition, build_matrices, \
    spectral_decompose

__all__ = [
    "SecondOrderParams",
    "MomentSet",
    "AlphaCoefficients",
    "ConstraintReport",
    "alpha_from_model",
    "gamma_from_model",
    "mean_trace",
    "matrix_power_mean",
    "covariance",
    "matrix_moment_covariance",
    "check_constraints",
    "export_mu_csv",
    "export_sigma_csv",
]

# q00 -> 1 makes the off-diagonal prefactor 1/(1 - q00) blow up; values
# this close to 1 are rejected instead of extrapolated.
_Q00_CEILING = 1.0 - 1e-6


@dataclass(frozen=True)
class SecondOrderParams:
    """Everything the first two moments of a trace depend on.

    m : fluorophore count (integer for reporting, real during fits).
    nu0 : fraction of initially bright molecules.
    q00 : probability to stay bright through one exposure.
    lam : eigenvalues of the combined transition matrix, bleached 1 last.
    alpha0 : decay coefficients for a bright start (last entry 0).
    alpha1 : decay coefficients for a dark start (last entry 0).
    theta : second-order photon parameters.
    """

    m: float
    nu0: float
    q00: float
    lam: np.ndarray
    alpha0: np.ndarray
    alpha1: np.ndarray
    theta: ThetaParams

    def __post_init__(self):
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "alpha0",
                           np.asarray(self.alpha0, dtype=float))
        object.__setattr__(self, "alpha1",
                           np.asarray(self.alpha1, dtype=float))

    @property
    def r(self):
        return len(self.lam) - 1

    def alpha(self):
        """Combined decay coefficients nu0 * alpha0 + (1 - nu0) * alpha1."""
        return self.nu0 * self.alpha0 + (1.0 - self.nu0) * self.alpha1

    def to_dict(self):
        return {
            "m": self.m, "nu0": self.nu0, "q00": self.q00,
            "lambda": self.lam.tolist(), "alpha0": self.alpha0.tolist(),
            "alpha1": self.alpha1.tolist(), "theta": self.theta.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(m=float(d["m"]), nu0=float(d["nu0"]), q00=float(d["q00"]),
                   lam=np.asarray(d["lambda"], float),
                   alpha0=np.asarray(d["alpha0"], float),
                   alpha1=np.asarray(d["alpha1"], float),
                   theta=ThetaParams.from_dict(d["theta"]))


@dataclass(frozen=True)
class MomentSet:
    """Mean vector, bright-start means, and covariance matrix of a trace.

    mu has length T; mu0 has length T+1 with mu0[k] the bright-start
    expectation at lag k (slot 0 holds the lag-0 extension m*theta1/q00
    so that indices align with lags).
    """

    mu: np.ndarray
    mu0: np.ndarray
    Sigma: np.ndarray


class AlphaCoefficients(NamedTuple):
    alpha: np.ndarray
    alpha0: np.ndarray
    alpha1: np.ndarray


@dataclass(frozen=True)
class ConstraintReport:
    """Residuals of the coefficient constraints and an overall verdict."""

    sum_alpha0: float
    stay_identity: float
    alpha1_balance: float
    alpha1_range: float
    passed: bool

    def max_residual(self):
        return max(abs(self.sum_alpha0), abs(self.stay_identity),
                   abs(self.alpha1_balance), self.alpha1_range)


def _merge_degenerate(lam, coeffs):
    """Sum coefficient mass across numerically equal eigenvalues.

    Keeps the bleached slot (last index) untouched.  Acting on nearly
    degenerate pairs avoids the huge cancelling coefficients an
    ill-conditioned eigenbasis would otherwise produce.
    """
    out = coeffs.copy()
    n = len(lam) - 1
    for x in range(n):
        if out[x] == 0.0:
            continue
        for z in range(x + 1, n):
            if abs(lam[x] - lam[z]) < 1e-12:
                out[x] += out[z]
                out[z] = 0.0
    return out


def alpha_from_model(spec: OuterModelSpec,
                     decomp: SpectralDecomposition) -> AlphaCoefficients:
    """Decay coefficients for the given start law, bright start, dark start.

    alpha[x] = V[0, x] * (lam[x]/q00) * (V^-1 @ nu)[x]; the bright-start
    coefficients use the unit start vector, the dark-start ones the start
    law restricted to dark states.  The combination
    nu0 * alpha0 + (1 - nu0) * alpha1 recovers alpha.
    """
    if not decomp.is_real:
        raise ComplexSpectrum(
            "decay coefficients require a real spectrum"
        )
    q00 = float(spec.q[0, 0])
    if not 0.0 < q00 < 1.0:
        raise InvalidSpec(f"bright-stay probability must lie in (0, 1), "
                          f"got {q00}")
    lam = decomp.lam.real
    V = decomp.V.real
    V_inv = decomp.V_inv.real
    n = len(lam)

    def coeffs(start):
        a = V[0, :] * (lam / q00) * (V_inv @ start)
        a[n - 1] = 0.0
        return _merge_degenerate(lam, a)

    e0 = np.zeros(n)
    e0[0] = 1.0
    alpha = coeffs(spec.nu)
    alpha0 = coeffs(e0)
    nu0 = float(spec.nu[0])
    if nu0 < 1.0:
        nu_dark = spec.nu.copy()
        nu_dark[0] = 0.0
        alpha1 = coeffs(nu_dark / (1.0 - nu0))
    else:
        alpha1 = np.zeros(n)
    return AlphaCoefficients(alpha=alpha, alpha0=alpha0, alpha1=alpha1)


def gamma_from_model(spec: OuterModelSpec, theta: ThetaParams,
                     m) -> SecondOrderParams:
    """Second-order parameters implied by a full outer model."""
    decomp = spectral_decompose(build_matrices(spec).m)
    coeffs = alpha_from_model(spec, decomp)
    return SecondOrderParams(
        m=m, nu0=float(spec.nu[0]), q00=float(spec.q[0, 0]),
        lam=decomp.lam.real, alpha0=coeffs.alpha0, alpha1=coeffs.alpha1,
        theta=theta,
    )


def check_constraints(gamma: SecondOrderParams, tol=1e-8) -> ConstraintReport:
    """Residuals of the four coefficient constraints.

    sum(alpha0) = 1, sum(alpha0/lam) = 1/q00, sum(alpha1/lam) = 0, and
    0 <= q00 * sum(alpha1) <= 1 (reported as violation magnitude).
    """
    r1 = float(gamma.alpha0.sum() - 1.0)
    r2 = float((gamma.alpha0 / gamma.lam).sum() - 1.0 / gamma.q00)
    r3 = float((gamma.alpha1 / gamma.lam).sum())
    s1 = gamma.q00 * gamma.alpha1.sum()
    r4 = float(max(0.0, -s1, s1 - 1.0))
    passed = max(abs(r1), abs(r2), abs(r3), r4) < tol
    return ConstraintReport(sum_alpha0=r1, stay_identity=r2,
                            alpha1_balance=r3, alpha1_range=r4,
                            passed=bool(passed))


def _validate_gamma(gamma, tol):
    if gamma.m < 1:
        raise ConstraintViolation(f"need m >= 1, got {gamma.m}")
    if not 0.0 <= gamma.nu0 <= 1.0:
        raise ConstraintViolation(f"nu0 must lie in [0, 1], got {gamma.nu0}")
    if not 0.0 < gamma.q00 < 1.0:
        raise ConstraintViolation(f"q00 must lie in (0, 1), got {gamma.q00}")
    if np.any(gamma.lam <= 0.0) or np.any(gamma.lam > 1.0 + 1e-12):
        raise ConstraintViolation(
            f"eigenvalues must lie in (0, 1], got {gamma.lam}"
        )
    if abs(gamma.lam[-1] - 1.0) > 1e-12:
        raise ConstraintViolation("last eigenvalue must equal 1")
    if gamma.alpha0[-1] != 0.0 or gamma.alpha1[-1] != 0.0:
        raise ConstraintViolation("bleached coefficients must vanish")
    report = check_constraints(gamma, tol=tol)
    if not report.passed:
        raise ConstraintViolation(
            f"constraint residuals {report} exceed {tol:g}"
        )


def _decay_matrix(lam, T):
    """Powers lam_x^(t-1) arranged as (T, n)."""
    t = np.arange(T)[:, None]
    return np.asarray(lam)[None, :] ** t


def mean_trace(gamma: SecondOrderParams, T, tol=1e-6):
    """Expected normalized trace of length T.

    mu_t = m * theta1 * sum_x (nu0 alpha0 + (1 - nu0) alpha1)_x lam_x^(t-1)
    with the bleached term dropping out.  Tiny negative values from
    cancellation are clamped to zero.
    """
    if T < 1:
        raise ValueError(f"need T >= 1, got {T}")
    _validate_gamma(gamma, tol)
    weights = gamma.alpha()[:-1]
    powers = _decay_matrix(gamma.lam[:-1], T)
    mu = gamma.m * gamma.theta.theta1 * (powers @ weights)
    threshold = 1e-12 * max(float(np.max(np.abs(mu))), 1e-300)
    mu[(mu < 0.0) & (mu > -threshold)] = 0.0
    return mu


def matrix_power_mean(spec: OuterModelSpec, theta1, m, T):
    """Expected trace via repeated matrix-vector products, no spectrum.

    mu_t = m * (theta1/q00) * (M^t nu)[bright]; serves as the independent
    cross-check of the spectral formula.
    """
    mats = build_matrices(spec)
    q00 = float(spec.q[0, 0])
    v = spec.nu.copy()
    mu = np.empty(T)
    for t in range(T):
        v = mats.m @ v
        mu[t] = v[0]
    return m * theta1 / q00 * mu


def _mu0_spectral(gamma, T):
    """Bright-start expectations, slot k holding lag k (length T+1)."""
    powers = _decay_matrix(gamma.lam[:-1], T)
    mu0 = np.empty(T + 1)
    mu0[0] = gamma.m * gamma.theta.theta1 / gamma.q00
    mu0[1:] = gamma.m * gamma.theta.theta1 * (powers @ gamma.alpha0[:-1])
    return mu0


def covariance(gamma: SecondOrderParams, camera: CameraModel = None,
               T=None, tol=1e-6) -> MomentSet:
    """Moment set of the normalized trace under the full camera model.

    Diagonal: (m theta1 (theta3+1) + m f^2 - mu_t) mu_t / m + (sigma_t/a)^2.
    Off-diagonal (t > t'): bright-start expectations at lags t-t' and
    t-t'+1 combine with theta2 and q00; the matrix is mirrored exactly.
    """
    if T is None:
        raise ValueError("T must be given")
    _validate_gamma(gamma, tol)
    if gamma.q00 > _Q00_CEILING:
        raise ConstraintViolation(
            f"q00 = {gamma.q00} too close to 1 for the off-diagonal formula"
        )
    mu = mean_trace(gamma, T, tol=tol)
    mu0 = _mu0_spectral(gamma, T)

    m, theta = gamma.m, gamma.theta
    cam = camera if camera is not None else CameraModel(a=1.0, f2=1.0, o=0.0)
    sigma_bg = cam.sigma_vector(T)

    ratio = (1.0 - theta.theta2) / (1.0 - gamma.q00)
    c1 = theta.theta2 - gamma.q00 * ratio
    # Toeplitz recombination of the bright-start expectations by lag;
    # entry (t, t') couples the lag term with the later mean inside the
    # bracket and the earlier mean outside
    lag_term = np.empty(T)
    lag_term[1:] = c1 * mu0[1:T] + ratio * mu0[2:]
    lag_term[0] = 0.0
    idx = np.arange(T)
    later = np.maximum.outer(idx, idx)
    earlier = np.minimum.outer(idx, idx)
    Sigma = (lag_term[later - earlier] - mu[later]) * mu[earlier] / m

    diag = (m * theta.theta1 * (theta.theta3 + 1.0) + m * cam.f2 - mu) \
        * mu / m
    Sigma[np.diag_indices(T)] = diag + (sigma_bg / cam.a) ** 2
    return MomentSet(mu=mu, mu0=mu0, Sigma=Sigma)


def matrix_moment_covariance(spec: OuterModelSpec, theta: ThetaParams, m,
                             camera: CameraModel = None, T=None):
    """Covariance via matrix powers only; the diagonalization-free oracle.

    Uses the same lag recombination as ``covariance`` but drives the mean
    and bright-start expectations through repeated multiplication with the
    combined transition matrix.
    """
    if T is None:
        raise ValueError("T must be given")
    q00 = float(spec.q[0, 0])
    if q00 > _Q00_CEILING:
        raise ConstraintViolation(
            f"q00 = {q00} too close to 1 for the off-diagonal formula"
        )
    mats = build_matrices(spec)
    mu = matrix_power_mean(spec, theta.theta1, m, T)

    e0 = np.zeros(spec.r + 1)
    e0[0] = 1.0
    v = e0.copy()
    mu0 = np.empty(T + 1)
    mu0[0] = m * theta.theta1 / q00
    for t in range(T):
        v = mats.m @ v
        mu0[t + 1] = m * theta.theta1 / q00 * v[0]

    cam = camera if camera is not None else CameraModel(a=1.0, f2=1.0, o=0.0)
    sigma_bg = cam.sigma_vector(T)
    Sigma = np.zeros((T, T))
    diag = (m * theta.theta1 * (theta.theta3 + 1.0) + m * cam.f2 - mu) \
        * mu / m
    Sigma[np.diag_indices(T)] = diag + (sigma_bg / cam.a) ** 2

    ratio = (1.0 - theta.theta2) / (1.0 - q00)
    c1 = theta.theta2 - q00 * ratio
    for lag in range(1, T):
        head = mu[: T - lag]
        tail = mu[lag:]
        vals = (c1 * mu0[lag] + ratio * mu0[lag + 1] - tail) * head / m
        idx = np.arange(T - lag)
        Sigma[idx + lag, idx] = vals
        Sigma[idx, idx + lag] = vals
    return Sigma


def export_mu_csv(moments: MomentSet, path):
    """Write the mean as a two-column t,mu CSV at full precision."""
    with open(path, "w") as fh:
        fh.write("t,mu\n")
        for t, value in enumerate(moments.mu, start=1):
            fh.write(f"{t},{value:.17g}\n")


def export_sigma_csv(moments: MomentSet, path):
    """Write the covariance as a dense CSV at full precision."""
    T = moments.Sigma.shape[0]
    with open(path, "w") as fh:
        fh.write(",".join(f"s{t}" for t in range(1, T + 1)) + "\n")
        for row in moments.Sigma:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
