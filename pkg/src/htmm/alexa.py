"""Inner (within-exposure) photon model for the Alexa 647 fluorophore.

Photons come in bursts: each burst emits a geometric number of photons,
the burst count per frame is the minimum of a Poisson variable and an
independent geometric one, and exceeding the geometric bound means the
fluorophore leaves the bright state during the exposure.  The module
provides the burst/photon generating functions, the second-order summary
parameters (theta1, theta2, theta3), the Lambert-W inversion of theta2,
and the thinning and camera transformations of those parameters.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import OutOfConvergenceRegion, OutOfDomain

__all__ = [
    "InnerAlexaParams",
    "ThetaParams",
    "CameraModel",
    "FrameSample",
    "q00_from_inner",
    "theta_from_inner",
    "q00_from_theta2",
    "lambert_w_m1",
    "gen_fn_B",
    "gen_fn_Y",
    "conditional_gen_fn_B",
    "conditional_gen_fn_Y",
    "conditional_burst_law",
    "thin_inner",
    "thin_theta",
    "camera_theta",
    "sample_frame",
]


@dataclass(frozen=True)
class InnerAlexaParams:
    """Burst-model parameters.

    p : photon-success probability of a burst; photons per burst are
        geometric on {0, 1, ...} with success probability 1 - p.
    q : burst-continuation probability; the number of bursts before the
        exit channel fires is geometric on {0, 1, ...} with success
        probability 1 - q.
    rate : Poisson parameter for the number of burst opportunities within
        one exposure.
    """

    p: float
    q: float
    rate: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie strictly in (0, 1), got {self.p}")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie strictly in (0, 1), got {self.q}")
        if not self.rate > 0.0:
            raise ValueError(f"rate must be positive, got {self.rate}")

    def to_dict(self):
        return {"p": self.p, "q": self.q, "rate": self.rate}

    @classmethod
    def from_dict(cls, d):
        return cls(p=float(d["p"]), q=float(d["q"]), rate=float(d["rate"]))


@dataclass(frozen=True)
class ThetaParams:
    """Second-order summary of the bright-frame photon statistics.

    theta1 : expected photons per bright frame (photons, detected photons,
             or normalized camera units depending on pipeline stage).
    theta2 : fraction of theta1 contributed by frames where the
             fluorophore also stays bright, in (0, 1).
    theta3 : excess relative variance with respect to a Poisson law of the
             same mean, >= -1 (0 for exactly Poissonian photons).
    """

    theta1: float
    theta2: float
    theta3: float

    def __post_init__(self):
        if not self.theta1 > 0.0:
            raise ValueError(f"theta1 must be positive, got {self.theta1}")
        if not 0.0 < self.theta2 < 1.0:
            raise ValueError(
                f"theta2 must lie strictly in (0, 1), got {self.theta2}"
            )
        if not self.theta3 >= -1.0:
            raise ValueError(f"theta3 must be >= -1, got {self.theta3}")

    def to_dict(self):
        return {"theta1": self.theta1, "theta2": self.theta2,
                "theta3": self.theta3}

    @classmethod
    def from_dict(cls, d):
        return cls(theta1=float(d["theta1"]), theta2=float(d["theta2"]),
                   theta3=float(d["theta3"]))


@dataclass(frozen=True)
class CameraModel:
    """EMCCD readout parameters.

    a : overall amplification (camera units per detected photon).
    f2 : excess noise factor of the multiplication register, in [1, 2].
    o : constant offset added to the output.
    sigma : standard deviation of the additive background noise, either a
            scalar or one value per frame (camera units).
    p_d : probability that an emitted photon is detected at all; used by
          the simulator and folded into theta1 for estimation.
    """

    a: float
    f2: float
    o: float
    sigma: object = 0.0
    p_d: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"amplification must be positive, got {self.a}")
        if not 1.0 <= self.f2 <= 2.0:
            raise ValueError(f"excess noise factor must lie in [1, 2], "
                             f"got {self.f2}")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("background noise level must be >= 0")
        if not 0.0 < self.p_d <= 1.0:
            raise ValueError(f"detection probability must lie in (0, 1], "
                             f"got {self.p_d}")

    def sigma_vector(self, T):
        """Per-frame background noise levels broadcast to length T."""
        sig = np.asarray(self.sigma, dtype=float)
        if sig.ndim == 0:
            return np.full(T, float(sig))
        if sig.shape != (T,):
            raise ValueError(f"sigma must be scalar or length {T}, "
                             f"got shape {sig.shape}")
        return sig

    def to_dict(self):
        sig = np.asarray(self.sigma, dtype=float)
        return {"a": self.a, "f2": self.f2, "o": self.o,
                "sigma": float(sig) if sig.ndim == 0 else sig.tolist(),
                "p_d": self.p_d}

    @classmethod
    def from_dict(cls, d):
        sigma = d.get("sigma", 0.0)
        if isinstance(sigma, list):
            sigma = np.asarray(sigma, dtype=float)
        else:
            sigma = float(sigma)
        return cls(a=float(d["a"]), f2=float(d["f2"]), o=float(d["o"]),
                   sigma=sigma, p_d=float(d.get("p_d", 1.0)))


class FrameSample(NamedTuple):
    photons: int
    exited: bool


def q00_from_inner(params: InnerAlexaParams) -> float:
    """Probability to stay bright through one exposure: exp(-(1-q) rate)."""
    return math.exp(-(1.0 - params.q) * params.rate)


def theta_from_inner(params: InnerAlexaParams) -> ThetaParams:
    """Second-order parameters implied by the burst model."""
    p, q = params.p, params.q
    q00 = q00_from_inner(params)
    theta1 = p / (1.0 - p) * q / (1.0 - q) * (1.0 - q00)
    theta2 = -q00 * math.log(q00) / (1.0 - q00)
    theta3 = 2.0 / (1.0 - q00) * ((1.0 - q) / q - theta2 + 1.0) - 1.0
    return ThetaParams(theta1=theta1, theta2=theta2, theta3=theta3)


def lambert_w_m1(x):
    """Lower real branch of the Lambert W function on [-1/e, 0).

    Halley iteration with residual target 1e-13.  Starts from the
    asymptotic guess log(-x) - log(-log(-x)), switching to the series
    around the branch point -1/e when the argument is close to it.
    """
    if not -1.0 / math.e <= x < 0.0:
        raise OutOfDomain(f"W_-1 requires -1/e <= x < 0, got {x}")
    z = 1.0 + math.e * x
    if z <= 0.0:
        return -1.0
    if z < 1e-3:
        s = -math.sqrt(2.0 * z)
        w = -1.0 + s - s * s / 3.0 + 11.0 / 72.0 * s**3
    else:
        l1 = math.log(-x)
        w = l1 - math.log(-l1)
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= 1e-13 * abs(x):
            break
        wp1 = w + 1.0
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= step
        if abs(step) <= 1e-16 * abs(w):
            break
    return w


def q00_from_theta2(theta2) -> float:
    """Invert the bright-stay fraction map theta2 = -q ln(q)/(1 - q).

    Uses the closed form q00 = -theta2 / W_-1(-theta2 exp(-theta2)) and
    polishes with Newton steps on the forward map, so the returned value
    reproduces theta2 to 1e-10 or better.
    """
    if not 0.0 < theta2 < 1.0:
        raise OutOfDomain(f"theta2 must lie strictly in (0, 1), got {theta2}")
    w = lambert_w_m1(-theta2 * math.exp(-theta2))
    q00 = -theta2 / w
    q00 = min(max(q00, 1e-300), 1.0 - 1e-16)
    for _ in range(3):
        log_q = math.log(q00)
        f = -q00 * log_q / (1.0 - q00) - theta2
        if abs(f) <= 1e-14:
            break
        # d theta2 / d q00
        df = -(log_q + 1.0 - q00) / (1.0 - q00) ** 2
        step = f / df
        q00 = min(max(q00 - step, 1e-300), 1.0 - 1e-16)
    return q00


def _burst_mgf_terms(xi, params):
    """Poisson-killed burst generating pieces at argument xi.

    Returns (stay, cont) with stay = exp(-rate * z) for z = 1 - q e^xi and
    cont = (1 - q)(1 - exp(-rate z))/z, so that the burst-count generating
    function is stay + cont.  A short series covers the removable
    singularity at z -> 0.
    """
    q, rate = params.q, params.rate
    s = math.exp(xi)
    z = 1.0 - q * s
    if z <= 0.0:
        raise OutOfConvergenceRegion(
            f"burst generating function needs q e^xi < 1, got {q * s}"
        )
    stay = math.exp(-rate * z)
    if abs(z) < 1e-8:
        u = rate * z
        cont = (1.0 - q) * rate * (1.0 - u / 2.0 + u * u / 6.0 - u**3 / 24.0)
    else:
        cont = -(1.0 - q) * math.expm1(-rate * z) / z
    return stay, cont


def gen_fn_B(xi, params: InnerAlexaParams) -> float:
    """Moment generating function of the burst count per frame."""
    stay, cont = _burst_mgf_terms(xi, params)
    return stay + cont


def conditional_gen_fn_B(xi, params: InnerAlexaParams, exited: bool) -> float:
    """Burst-count generating function conditioned on the frame outcome.

    Staying bright leaves the burst count Poisson with the reduced
    parameter q * rate; the exit branch is the complementary part of the
    unconditional generating function.
    """
    q00 = q00_from_inner(params)
    stay, cont = _burst_mgf_terms(xi, params)
    if exited:
        return cont / (1.0 - q00)
    return stay / q00


def _photon_to_burst_argument(xi, params):
    p = params.p
    s = math.exp(xi)
    if p * s >= 1.0:
        raise OutOfConvergenceRegion(
            f"photon generating function needs p e^xi < 1, got {p * s}"
        )
    return math.log((1.0 - p) / (1.0 - p * s))


def gen_fn_Y(xi, params: InnerAlexaParams) -> float:
    """Moment generating function of the photon count per bright frame.

    Composes the burst generating function with the per-burst geometric
    law: G_Y(xi) = G_B(log((1 - p)/(1 - p e^xi))).
    """
    return gen_fn_B(_photon_to_burst_argument(xi, params), params)


def conditional_gen_fn_Y(xi, params: InnerAlexaParams, exited: bool) -> float:
    """Photon generating function conditioned on staying bright or exiting."""
    return conditional_gen_fn_B(
        _photon_to_burst_argument(xi, params), params, exited
    )


def conditional_burst_law(params: InnerAlexaParams) -> float:
    """Poisson parameter of the burst count given the fluorophore stays
    bright: the rate reduced by the continuation probability, q * rate."""
    return params.q * params.rate


def thin_inner(p, p_d) -> float:
    """Photon-success probability after binomial thinning with rate p_d.

    The thinned photon law stays inside the parametric family; only the
    geometric parameter moves: p' = p p_d / (1 - p + p p_d).
    """
    return p * p_d / (1.0 - p + p * p_d)


def thin_theta(theta: ThetaParams, p_d) -> ThetaParams:
    """Second-order parameters after binomial thinning: only theta1 scales."""
    return ThetaParams(theta1=p_d * theta.theta1, theta2=theta.theta2,
                       theta3=theta.theta3)


def camera_theta(theta: ThetaParams, camera: CameraModel,
                 normalized=False) -> ThetaParams:
    """Second-order parameters after stochastic camera amplification.

    theta1 picks up the amplification factor (unless the data are already
    normalized back to photon units), theta2 is untouched, and theta3
    absorbs the multiplication noise as (f^2 - 1)/theta1.
    """
    a = 1.0 if normalized else camera.a
    return ThetaParams(
        theta1=a * theta.theta1,
        theta2=theta.theta2,
        theta3=theta.theta3 + (camera.f2 - 1.0) / theta.theta1,
    )


def sample_frame(params: InnerAlexaParams, rng) -> FrameSample:
    """Draw one bright-frame outcome: photon count and exit indicator.

    The burst count is min(Z, G) with Z ~ Poisson(rate) and G geometric on
    {0, 1, ...} with success probability 1 - q; each burst contributes a
    geometric number of photons on {0, 1, ...} with success probability
    1 - p.  The fluorophore exits the bright state exactly when Z > G.
    """
    z = rng.poisson(params.rate)
    g = rng.geometric(1.0 - params.q) - 1
    b = min(int(z), int(g))
    if b > 0:
        photons = int(rng.geometric(1.0 - params.p, size=b).sum()) - b
    else:
        photons = 0
    return FrameSample(photons=photons, exited=bool(z > g))
