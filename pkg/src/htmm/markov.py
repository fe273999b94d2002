"""Constrained two-timescale transition matrices and their spectral analysis.

The outer state space of a fluorophore is {0, ..., r} with 0 the bright and
r the absorbing bleached state.  Frame-to-frame dynamics factor into a
long-time step (between exposures) and a short-time step (during exposure),
both column-stochastic with a fixed sparsity pattern.  This module builds
those matrices from a transition-probability table, diagonalizes their
product, and provides the eigenvalue criteria and state-lumping operation
used by the moment formulas.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDiagonal,
    InvalidSpec,
    NotDiagonalizable,
    NotIrreducible,
    NotLumpable,
    ShapeMismatch,
)

__all__ = [
    "OuterModelSpec",
    "TransitionMatrices",
    "SpectralDecomposition",
    "StatePartition",
    "build_matrices",
    "spectral_decompose",
    "check_real_spectrum_r2",
    "check_real_spectrum_r3",
    "check_gap_condition",
    "lump",
    "RealSpectrumVerdict",
    "RealConditionVerdict",
    "GapConditionVerdict",
]


@dataclass(frozen=True)
class OuterModelSpec:
    """Outer-model parameters: dark-state count, transition table, start law.

    Parameters
    ----------
    r : int
        Number of dark states (incl. bleached), >= 1.  State space size r+1.
    q : ndarray, shape (r+1, r)
        Transition probabilities q[x, z].  Column 0 is the short-time exit
        column (destination probabilities when leaving the bright state
        within one exposure, with q[0, 0] the bright-stay probability);
        columns 1..r-1 are the long-time columns of the temporary dark
        states.  Every column sums to 1.
    nu : ndarray, shape (r+1,)
        Distribution of the initial state X_0.
    """

    r: int
    q: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=float))

    def validate(self, tol=1e-9):
        """Raise InvalidSpec if shapes, ranges, or column sums are off."""
        if self.r < 1:
            raise InvalidSpec(f"need at least one dark state, got r={self.r}")
        if self.q.shape != (self.r + 1, self.r):
            raise InvalidSpec(
                f"q must have shape {(self.r + 1, self.r)}, got {self.q.shape}"
            )
        if self.nu.shape != (self.r + 1,):
            raise InvalidSpec(
                f"nu must have length {self.r + 1}, got shape {self.nu.shape}"
            )
        if np.any(self.q < -tol) or np.any(self.q > 1 + tol):
            raise InvalidSpec("transition probabilities must lie in [0, 1]")
        colsums = self.q.sum(axis=0)
        if np.any(np.abs(colsums - 1.0) > tol):
            raise InvalidSpec(f"columns of q must sum to 1, got {colsums}")
        if np.any(self.nu < -tol):
            raise InvalidSpec("nu must be non-negative")
        if abs(self.nu.sum() - 1.0) > tol:
            raise InvalidSpec(f"nu must sum to 1, got {self.nu.sum()}")

    def to_dict(self):
        return {"r": self.r, "q": self.q.tolist(), "nu": self.nu.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(r=int(d["r"]), q=np.asarray(d["q"], float),
                   nu=np.asarray(d["nu"], float))


@dataclass(frozen=True)
class TransitionMatrices:
    """Long-time, short-time, and combined transition matrices.

    All three are column-stochastic on {0, ..., r}; ``m`` is the product
    m_short @ m_long governing the post-exposure chain.
    """

    m_long: np.ndarray
    m_short: np.ndarray
    m: np.ndarray


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigendecomposition m = V diag(lam) V_inv.

    The bleached eigenvalue 1 with eigenvector (0, ..., 0, 1) is stored
    last; the remaining eigenvalues are sorted by descending real part.
    ``is_real`` holds when all imaginary parts are below 1e-10 in
    magnitude, ``is_positive`` when additionally no real part drops below
    -1e-10.
    """

    lam: np.ndarray
    V: np.ndarray
    V_inv: np.ndarray
    is_real: bool
    is_positive: bool


@dataclass(frozen=True)
class StatePartition:
    """Disjoint blocks of state indices covering {0, ..., n-1}."""

    blocks: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "blocks", tuple(tuple(sorted(b)) for b in self.blocks)
        )

    def validate(self, n):
        seen = set()
        for b in self.blocks:
            if not b:
                raise InvalidSpec("partition blocks must be non-empty")
            if seen & set(b):
                raise InvalidSpec("partition blocks must be disjoint")
            seen |= set(b)
        if seen != set(range(n)):
            raise InvalidSpec(
                f"partition must cover all {n} states, covers {sorted(seen)}"
            )


@dataclass(frozen=True)
class RealSpectrumVerdict:
    real: bool
    nonnegative: bool


@dataclass(frozen=True)
class RealConditionVerdict:
    lambda0: float
    condition_value: float
    real: bool


@dataclass(frozen=True)
class GapConditionVerdict:
    mu1: float
    mu2: float
    satisfied: bool


def build_matrices(spec: OuterModelSpec) -> TransitionMatrices:
    """Assemble the long-time and short-time matrices from a spec.

    The long-time matrix keeps the bright and bleached states fixed and
    applies columns 1..r-1 of ``spec.q`` to the temporary dark states; the
    short-time matrix acts only on the bright state via column 0.
    """
    spec.validate(tol=1e-9)
    n = spec.r + 1

    m_long = np.zeros((n, n))
    m_long[0, 0] = 1.0
    m_long[n - 1, n - 1] = 1.0
    for z in range(1, spec.r):
        m_long[:, z] = spec.q[:, z]

    m_short = np.eye(n)
    m_short[:, 0] = spec.q[:, 0]

    return TransitionMatrices(m_long=m_long, m_short=m_short,
                              m=m_short @ m_long)


def _canonicalize_columns(V):
    """Scale eigenvector columns to unit norm with a fixed phase.

    The phase of the largest-magnitude component is rotated to the positive
    real axis so that repeated runs produce identical matrices.
    """
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        k = np.argmax(np.abs(col))
        pivot = col[k]
        if pivot != 0:
            col = col * (np.abs(pivot) / pivot)
        nrm = np.linalg.norm(col)
        if nrm > 0:
            col = col / nrm
        V[:, j] = col
    return V


def spectral_decompose(M, cond_limit=1e12) -> SpectralDecomposition:
    """Diagonalize a combined transition matrix with absorbing last state.

    Exploits the block-triangular structure forced by the absorbing
    bleached state: the last column of ``M`` must equal the last unit
    vector.  The eigenvalue 1 of the bleached state is pinned with
    eigenvector (0, ..., 0, 1) as the last column of ``V``; the remaining
    eigenvalues come from the leading principal block and are sorted by
    descending real part.

    Raises
    ------
    NotDiagonalizable
        If the eigenvector matrix is ill conditioned (condition number
        above ``cond_limit``) or the reconstruction residual exceeds 1e-9.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {M.shape}")
    if np.any(np.abs(M.sum(axis=0) - 1.0) > 1e-9):
        raise InvalidSpec("matrix must be column-stochastic")
    e_last = np.zeros(n)
    e_last[-1] = 1.0
    if np.max(np.abs(M[:, -1] - e_last)) > 1e-12:
        raise InvalidSpec("last column must be the absorbing unit vector")

    A = M[:-1, :-1]
    b = M[-1, :-1]
    lam_a, W = np.linalg.eig(A)
    order = np.lexsort((-lam_a.imag, -lam_a.real))
    lam_a = lam_a[order]
    W = W[:, order]

    V = np.zeros((n, n), dtype=complex)
    V[:-1, :-1] = W
    for j in range(n - 1):
        overlap = b @ W[:, j]
        denom = lam_a[j] - 1.0
        if abs(denom) < 1e-13:
            # degenerate with the bleached eigenvalue; only consistent when
            # the block eigenvector does not feed the absorbing state
            if abs(overlap) > 1e-9:
                raise NotDiagonalizable(
                    "eigenvalue 1 is defective (absorbing state coupled)"
                )
            V[-1, j] = 0.0
        else:
            V[-1, j] = overlap / denom
    V[:, -1] = e_last
    V = _canonicalize_columns(V)

    lam = np.append(lam_a, 1.0)
    if np.max(np.abs(lam)) > 1 + 1e-12:
        raise InvalidSpec("stochastic matrix with eigenvalue beyond unit disc")

    if np.linalg.cond(V) > cond_limit:
        raise NotDiagonalizable(
            f"eigenvector condition number exceeds {cond_limit:g}"
        )
    V_inv = np.linalg.inv(V)
    residual = np.max(np.abs(M - (V * lam) @ V_inv))
    if residual > 1e-9:
        raise NotDiagonalizable(
            f"reconstruction residual {residual:.3g} above 1e-9"
        )

    is_real = bool(np.max(np.abs(lam.imag)) < 1e-10)
    is_positive = bool(is_real and np.min(lam.real) > -1e-10)
    return SpectralDecomposition(lam=lam, V=V, V_inv=V_inv,
                                 is_real=is_real, is_positive=is_positive)


def _validate_absorbing_form(M, n):
    M = np.asarray(M, dtype=float)
    if M.shape != (n, n):
        raise ShapeMismatch(f"expected shape {(n, n)}, got {M.shape}")
    e_last = np.zeros(n)
    e_last[-1] = 1.0
    if np.max(np.abs(M[:, -1] - e_last)) > 1e-12:
        raise ShapeMismatch("last column must be the absorbing unit vector")
    if np.any(M < -1e-12) or np.any(np.abs(M.sum(axis=0) - 1.0) > 1e-9):
        raise ShapeMismatch("matrix must be column-stochastic")
    return M


def check_real_spectrum_r2(M) -> RealSpectrumVerdict:
    """Decide realness/non-negativity of the spectrum for one dark state.

    For the 3x3 absorbing form the discriminant of the non-bleached block
    is (a1 - a4)^2 + 4 a2 a3 >= 0, so the spectrum is always real.
    Non-negativity holds whenever both non-bleached diagonal entries are
    >= 1/2; otherwise a direct eigenvalue computation decides.
    """
    M = _validate_absorbing_form(M, 3)
    real = True
    if M[0, 0] >= 0.5 and M[1, 1] >= 0.5:
        nonnegative = True
    else:
        eigs = np.linalg.eigvals(M[:2, :2]).real
        nonnegative = bool(np.min(eigs) >= -1e-12)
    return RealSpectrumVerdict(real=real, nonnegative=nonnegative)


def _reachability(adj):
    """Boolean transitive closure of a small adjacency matrix."""
    n = adj.shape[0]
    reach = adj.astype(bool) | np.eye(n, dtype=bool)
    for _ in range(n):
        reach = reach | (reach.astype(np.uint8) @ reach.astype(np.uint8) > 0)
    return reach


def _perron_eigenvalue(A, tol=1e-12, max_iters=100_000):
    """Largest eigenvalue of an irreducible non-negative matrix.

    Power iteration with deterministic start (1, 1, 1)/3.  Iterates on
    A + I, which is primitive for irreducible A, so convergence is
    guaranteed even for periodic sparsity; the shift is subtracted again.
    """
    n = A.shape[0]
    v = np.full(n, 1.0 / n)
    shifted = A + np.eye(n)
    est = 0.0
    for _ in range(max_iters):
        w = shifted @ v
        nrm = w.sum()
        w = w / nrm
        new_est = nrm - 1.0
        if np.max(np.abs(w - v)) < tol and abs(new_est - est) < tol:
            return new_est
        v = w
        est = new_est
    return est


def check_real_spectrum_r3(M) -> RealConditionVerdict:
    """Analytic realness criterion for the three-dark-state matrix.

    Computes the dominant eigenvalue lambda0 of the irreducible upper-left
    3x3 block by power iteration and evaluates the cubic discriminant of
    the shifted characteristic polynomial.  The remaining eigenvalues are
    real exactly when the returned condition value is non-negative.
    """
    M = _validate_absorbing_form(M, 4)
    A = M[:3, :3]
    reach = _reachability(A > 0)
    if not reach.all():
        raise NotIrreducible("upper-left 3x3 block is not irreducible")

    lambda0 = _perron_eigenvalue(A)
    a1, a5, a9 = A[0, 0], A[1, 1], A[2, 2]
    a2, a3 = A[0, 1], A[0, 2]
    a4, a6 = A[1, 0], A[1, 2]
    a7, a8 = A[2, 0], A[2, 1]
    b1, b5, b9 = a1 - lambda0, a5 - lambda0, a9 - lambda0
    condition_value = (b1 + b5 + b9) ** 2 + 4.0 * (
        a6 * a8 + a2 * a4 + a3 * a7 - b1 * b5 - b1 * b9 - b5 * b9
    )
    return RealConditionVerdict(
        lambda0=float(lambda0),
        condition_value=float(condition_value),
        real=bool(condition_value >= -1e-12),
    )


def check_gap_condition(diag, lambda0) -> GapConditionVerdict:
    """Evaluate the diagonal-diversity condition for a real spectrum.

    The three diagonal values are sorted descending to d1 > d2 > d3 and
    mapped to the gap ratios mu1 = (lambda0 - d1)/(lambda0 - d2) and
    mu2 = (lambda0 - d2)/(lambda0 - d3).  The condition
    mu2^2 (1 - mu1)^2 >= 2 mu2 (1 + mu1) - 1 is sufficient for all
    eigenvalues of the corresponding transition matrix to be real.
    """
    d = np.sort(np.asarray(diag, dtype=float))[::-1]
    if d.shape != (3,):
        raise ShapeMismatch("need exactly three diagonal values")
    if np.min(np.abs(np.diff(d))) < 1e-12:
        raise DegenerateDiagonal("diagonal values must be distinct")
    mu1 = (lambda0 - d[0]) / (lambda0 - d[1])
    mu2 = (lambda0 - d[1]) / (lambda0 - d[2])
    satisfied = mu2**2 * (1 - mu1) ** 2 >= 2 * mu2 * (1 + mu1) - 1
    return GapConditionVerdict(mu1=float(mu1), mu2=float(mu2),
                               satisfied=bool(satisfied))


def lump(M, partition: StatePartition, tol=1e-9):
    """Merge states of a column-stochastic chain along a partition.

    The chain is lumpable exactly when, for every block pair, the summed
    transition probability into the target block is the same from every
    state of the source block; those common values form the returned
    lumped matrix.

    Raises
    ------
    NotLumpable
        With the offending block pair and largest deviation when the
        block-column sums disagree beyond ``tol``.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    partition.validate(n)
    k = len(partition.blocks)
    lumped = np.zeros((k, k))
    for j, target in enumerate(partition.blocks):
        rows = M[list(target), :].sum(axis=0)
        for i, source in enumerate(partition.blocks):
            vals = rows[list(source)]
            dev = np.max(vals) - np.min(vals)
            if dev > tol:
                raise NotLumpable(
                    f"blocks {i} -> {j} differ by {dev:.3g}",
                    blocks=(i, j),
                    deviation=float(dev),
                )
            lumped[j, i] = vals.mean()
    return lumped
