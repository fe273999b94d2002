"""Hidden two-timescale Markov model (HTMM) for fluorescence time traces.

Simulation of the full imaging chain (photon bursts, detection thinning,
camera amplification, background noise), closed-form first and second
moments of the observed traces, brute-force validation oracles, and
constrained pseudo-maximum-likelihood estimation of the fluorophore count.
"""

from . import markov, alexa, moments, simulate, oracles, estimate

__version__ = "0.1.0"

__all__ = ["markov", "alexa", "moments", "simulate", "oracles", "estimate",
           "__version__"]
