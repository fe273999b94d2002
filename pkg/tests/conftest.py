"""Shared fixtures: the desk-scale reference configuration and random
model generators used across the suite."""

import numpy as np
import pytest

from htmm.alexa import CameraModel, InnerAlexaParams, q00_from_inner, \
    theta_from_inner, thin_theta
from htmm.markov import OuterModelSpec, build_matrices, spectral_decompose
from htmm.moments import gamma_from_model
from htmm.simulate import SimulationConfig


def make_reference_setup(m=3, T=250, seed=11, replicates=1):
    """Three-dark-state configuration producing traces at a realistic
    scale: per-molecule brightness ~40 normalized units, bright dwell
    ~10 frames, bleaching over ~100 frames, heavy camera noise."""
    inner = InnerAlexaParams(p=0.8, q=0.995, rate=21.0)
    q00 = q00_from_inner(inner)
    r = 3
    q = np.zeros((r + 1, r))
    q[:, 0] = [q00, 0.06, 0.03, 1.0 - q00 - 0.09]
    q[:, 1] = [0.05, 0.94, 0.005, 0.005]
    q[:, 2] = [0.02, 0.005, 0.97, 0.005]
    nu = np.array([1.0, 0.0, 0.0, 0.0])
    spec = OuterModelSpec(r=r, q=q, nu=nu)
    camera = CameraModel(a=20.0, f2=2.0, o=100.0, sigma=160.0, p_d=0.5)
    config = SimulationConfig(spec=spec, inner=inner, camera=camera,
                              m=m, T=T, seed=seed, replicates=replicates)
    theta_eff = thin_theta(theta_from_inner(inner), camera.p_d)
    gamma = gamma_from_model(spec, theta_eff, m=m)
    return config, gamma


def random_spec(rng, r, bright_stay=(0.7, 0.95), dark_stay=(0.75, 0.98),
                nu="bright", require_real=True, max_tries=500):
    """Random valid outer model, optionally conditioned on a real positive
    spectrum (heavy diagonals make rejection rare)."""
    for _ in range(max_tries):
        q = np.zeros((r + 1, r))
        q00 = rng.uniform(*bright_stay)
        q[0, 0] = q00
        q[1:, 0] = rng.dirichlet(np.ones(r)) * (1.0 - q00)
        for z in range(1, r):
            stay = rng.uniform(*dark_stay)
            others = rng.dirichlet(np.ones(r)) * (1.0 - stay)
            q[:, z] = np.insert(others, z, stay)
        if nu == "bright":
            nu_vec = np.zeros(r + 1)
            nu_vec[0] = 1.0
        elif nu == "random":
            nu_vec = rng.dirichlet(np.ones(r + 1))
        else:
            nu_vec = np.asarray(nu, dtype=float)
        spec = OuterModelSpec(r=r, q=q, nu=nu_vec)
        if not require_real:
            return spec
        decomp = spectral_decompose(build_matrices(spec).m)
        lam = decomp.lam.real
        if decomp.is_real and decomp.is_positive and np.all(lam > 1e-4) \
                and np.min(np.abs(np.diff(np.sort(lam)))) > 1e-4:
            return spec
    raise RuntimeError("failed to draw a real-spectrum model")


def random_m3(rng, diag_low=0.0, diag_high=1.0):
    """Random 4x4 absorbing-form matrix with free off-diagonal mass."""
    cols = []
    for j in range(3):
        stay = rng.uniform(diag_low, diag_high)
        others = rng.dirichlet(np.ones(3)) * (1.0 - stay)
        col = np.insert(others, j, stay)
        cols.append(col)
    M = np.zeros((4, 4))
    for j, col in enumerate(cols):
        M[:, j] = col
    M[:, 3] = [0.0, 0.0, 0.0, 1.0]
    return M


@pytest.fixture(scope="session")
def reference_setup():
    return make_reference_setup()


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
