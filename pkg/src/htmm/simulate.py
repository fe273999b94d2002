"""Synthetic trace generation through the full imaging chain.

Hidden outer path -> per-frame burst photons -> binomial detection loss ->
stochastic electron multiplication -> offset and Gaussian background ->
normalization.  Randomness is counter-based and split per
(seed, replicate, fluorophore), so replicates and fluorophores can be
simulated in any order, or in parallel, with identical results.
"""

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .alexa import CameraModel, InnerAlexaParams, q00_from_inner, sample_frame
from .errors import InconsistentQ00, InvalidSpec
from .markov import OuterModelSpec, build_matrices

__all__ = [
    "SimulationConfig",
    "Trace",
    "simulate_hidden_path",
    "simulate_photon_trace",
    "apply_detection",
    "apply_camera",
    "normalize",
    "simulate_trace",
    "simulate_traces",
]


@dataclass(frozen=True)
class SimulationConfig:
    """Bundle of everything one simulation run needs."""

    spec: OuterModelSpec
    inner: InnerAlexaParams
    camera: CameraModel
    m: int
    T: int
    seed: int
    replicates: int = 1

    def validate(self):
        self.spec.validate()
        if self.m < 1:
            raise InvalidSpec(f"need at least one fluorophore, got m={self.m}")
        if self.T < 1:
            raise InvalidSpec(f"need at least one frame, got T={self.T}")
        if self.replicates < 1:
            raise InvalidSpec(f"need replicates >= 1, got {self.replicates}")
        sig = np.asarray(self.camera.sigma)
        if sig.ndim > 0 and sig.shape != (self.T,):
            raise InvalidSpec(
                f"camera.sigma must be scalar or length T={self.T}"
            )

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "inner": self.inner.to_dict(),
            "camera": self.camera.to_dict(),
            "m": self.m, "T": self.T, "seed": self.seed,
            "replicates": self.replicates,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            spec=OuterModelSpec.from_dict(d["spec"]),
            inner=InnerAlexaParams.from_dict(d["inner"]),
            camera=CameraModel.from_dict(d["camera"]),
            m=int(d["m"]), T=int(d["T"]), seed=int(d["seed"]),
            replicates=int(d.get("replicates", 1)),
        )

    def content_hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Trace:
    """Normalized per-frame intensities plus provenance metadata."""

    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))


def stream(seed, replicate, unit):
    """Counter-based generator for one parallel simulation unit."""
    root = np.random.SeedSequence(
        entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(int(replicate), int(unit)),
    )
    return np.random.Generator(np.random.Philox(root))


def _draw_column(column, rng):
    return int(np.searchsorted(np.cumsum(column), rng.random(), side="right"))


def simulate_hidden_path(spec: OuterModelSpec, T, rng):
    """Sample the alternating outer chain X_0 -> X'_1 -> X_1 -> ...

    Returns (states_pre, states_post): the pre-exposure states X'_1..X'_T
    and the post-exposure states X_0..X_T.  The bleached state is
    absorbing in both steps.
    """
    mats = build_matrices(spec)
    bleached = spec.r
    post = np.empty(T + 1, dtype=np.int64)
    pre = np.empty(T, dtype=np.int64)
    post[0] = _draw_column(spec.nu, rng)
    for t in range(1, T + 1):
        z = post[t - 1]
        x_pre = z if z in (0, bleached) else _draw_column(mats.m_long[:, z],
                                                          rng)
        x_post = _draw_column(mats.m_short[:, 0], rng) if x_pre == 0 \
            else x_pre
        pre[t - 1] = x_pre
        post[t] = x_post
    return pre, post


def _single_photon_trace(spec, inner, T, rng):
    """One fluorophore's emitted-photon counts, co-generating the path.

    The within-exposure transition is driven by the inner model itself:
    photons and the exit event come from one frame sample, and on exit the
    dark destination follows the exit column renormalized over the dark
    states.
    """
    q00 = float(spec.q[0, 0])
    exit_probs = spec.q[1:, 0] / (1.0 - q00)
    exit_cum = np.cumsum(exit_probs)
    bleached = spec.r
    mats = build_matrices(spec)

    y = np.zeros(T, dtype=np.int64)
    x = _draw_column(spec.nu, rng)
    for t in range(T):
        x_pre = x if x in (0, bleached) else _draw_column(mats.m_long[:, x],
                                                          rng)
        if x_pre == 0:
            frame = sample_frame(inner, rng)
            y[t] = frame.photons
            if frame.exited:
                x = 1 + int(np.searchsorted(exit_cum, rng.random(),
                                            side="right"))
            else:
                x = 0
        else:
            x = x_pre
    return y


def simulate_photon_trace(config: SimulationConfig, replicate=0):
    """Total emitted photons per frame summed over all m fluorophores.

    Raises
    ------
    InconsistentQ00
        If the inner model's implied bright-stay probability disagrees
        with the outer specification's q[0, 0] beyond 1e-6.
    """
    config.validate()
    q00_inner = q00_from_inner(config.inner)
    q00_outer = float(config.spec.q[0, 0])
    if abs(q00_inner - q00_outer) > 1e-6:
        raise InconsistentQ00(
            f"inner model implies q00 = {q00_inner:.9f} but the outer "
            f"specification carries {q00_outer:.9f}"
        )
    total = np.zeros(config.T, dtype=np.int64)
    for k in range(config.m):
        rng = stream(config.seed, replicate, k)
        total += _single_photon_trace(config.spec, config.inner, config.T,
                                      rng)
    return total


def apply_detection(photons, p_d, rng):
    """Binomial thinning of emitted photons with detection probability."""
    if not 0.0 < p_d <= 1.0:
        raise InvalidSpec(f"detection probability must lie in (0, 1], "
                          f"got {p_d}")
    photons = np.asarray(photons, dtype=np.int64)
    if p_d == 1.0:
        return photons.copy()
    return rng.binomial(photons, p_d)


def apply_camera(detected, camera: CameraModel, rng):
    """Amplify detected photons and add offset plus background noise.

    Every photo electron draws an independent multiplication gain from a
    Gamma law with relative variance f^2 - 1; the per-frame sum of n such
    gains is itself Gamma distributed with n-fold shape, which is drawn
    directly.  With f^2 = 1 the gain is deterministic.
    """
    detected = np.asarray(detected, dtype=np.int64)
    T = len(detected)
    sigma = camera.sigma_vector(T)
    if camera.f2 > 1.0:
        shape = detected / (camera.f2 - 1.0)
        scale = camera.a * (camera.f2 - 1.0)
        amplified = np.zeros(T)
        nz = detected > 0
        amplified[nz] = rng.gamma(shape[nz], scale)
    else:
        amplified = camera.a * detected.astype(float)
    noise = sigma * rng.standard_normal(T)
    return amplified + noise + camera.o


def normalize(ytilde, camera: CameraModel, meta=None) -> Trace:
    """Map camera units back to photon scale: (y - o) / a."""
    y = (np.asarray(ytilde, dtype=float) - camera.o) / camera.a
    return Trace(y=y, meta=dict(meta) if meta else {})


def simulate_trace(config: SimulationConfig, replicate=0) -> Trace:
    """Run the full chain for one replicate and return a normalized trace.

    Detection and camera noise use dedicated streams (units m and m+1) so
    that per-fluorophore photon streams stay reproducible on their own.
    """
    photons = simulate_photon_trace(config, replicate)
    rng_detect = stream(config.seed, replicate, config.m)
    detected = apply_detection(photons, config.camera.p_d, rng_detect)
    rng_camera = stream(config.seed, replicate, config.m + 1)
    ytilde = apply_camera(detected, config.camera, rng_camera)
    meta = {
        "m_true": config.m,
        "seed": config.seed,
        "replicate": replicate,
        "config_hash": config.content_hash(),
    }
    return normalize(ytilde, config.camera, meta=meta)


def _thread_count():
    raw = os.environ.get("HTMM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def simulate_traces(config: SimulationConfig):
    """All replicates of a configuration, honoring HTMM_THREADS.

    Results are ordered by replicate index and independent of the
    execution schedule.
    """
    config.validate()
    replicates = range(config.replicates)
    workers = _thread_count()
    if workers == 1 or config.replicates == 1:
        return [simulate_trace(config, i) for i in replicates]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: simulate_trace(config, i), replicates))
