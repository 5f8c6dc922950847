"""Sparse precision blocks for the latent Gaussian field: fixed effects with a
diffuse Gaussian prior, a stationary AR(1) effect, and a cyclic second-order
random walk over hour-of-day classes, assembled with sum-to-zero constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Jitter added to intrinsic (rank-deficient) precisions at assembly so the
# joint prior is proper; the sum-to-zero constraint pins the level anyway.
RW2_JITTER = 1e-5


@dataclass(frozen=True)
class Ar1Spec:
    n: int
    rho: float
    tau: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class CyclicRw2Spec:
    n: int
    tau: float

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("cyclic RW2 needs n >= 3")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class FixedEffectsSpec:
    design: np.ndarray  # (n_obs, p), no missing entries
    prior_precision: float = 1e-6

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        if not np.all(np.isfinite(design)):
            raise ValueError("design matrix must have no missing entries")
        object.__setattr__(self, "design", design)
        if not self.prior_precision > 0:
            raise ValueError("prior_precision must be > 0")


def ar1_precision(spec: Ar1Spec) -> sp.csc_matrix:
    """Precision of the stationary AR(1): tau-scaled tridiagonal with boundary
    corrections, the exact inverse of the stationary covariance."""
    n, rho, tau = spec.n, spec.rho, spec.tau
    if n == 1:
        return sp.csc_matrix(np.array([[tau * (1 - rho**2)]]))
    diag = np.full(n, 1 + rho**2)
    diag[0] = diag[-1] = 1.0
    off = np.full(n - 1, -rho)
    return (tau * sp.diags([off, diag, off], [-1, 0, 1])).tocsc()


def ar1_logdet(spec: Ar1Spec) -> float:
    """log det of ar1_precision: n*log(tau) + log(1 - rho^2)."""
    return spec.n * np.log(spec.tau) + np.log1p(-spec.rho**2)


def cyclic_rw2_precision(spec: CyclicRw2Spec) -> sp.csc_matrix:
    """tau * D'D with D the circulant second-difference operator.

    Rank is n-1 (constants are in the null space); rows carry the
    (..., 1, -4, 6, -4, 1, ...) stencil once n >= 5.
    """
    n = spec.n
    rows = np.repeat(np.arange(n), 3)
    cols = (np.add.outer(np.arange(n), [0, 1, 2]) % n).ravel()
    vals = np.tile([1.0, -2.0, 1.0], n)
    d = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return (spec.tau * (d.T @ d)).tocsc()


def cyclic_rw2_gen_logdet(spec: CyclicRw2Spec) -> float:
    """Generalized log-determinant over the n-1 non-null circulant eigenvalues
    tau * (2 - 2cos(2*pi*k/n))^2, k = 1..n-1."""
    k = np.arange(1, spec.n)
    eig = (2.0 - 2.0 * np.cos(2 * np.pi * k / spec.n)) ** 2
    return (spec.n - 1) * np.log(spec.tau) + float(np.sum(np.log(eig)))


# ---------------------------------------------------------------------------
# Blocks: each contributes a precision (theta-dependent), incidence entries
# mapping observations onto its coefficients, and optionally a sum-to-zero row.
# ---------------------------------------------------------------------------


class FixedBlock:
    """Intercept-plus-covariates block with a diffuse Gaussian prior."""

    sum_to_zero = False

    def __init__(self, design: np.ndarray, eps: float = 1e-6, name: str = "fixed"):
        self.spec = FixedEffectsSpec(design=design, prior_precision=eps)
        self.name = name
        self.dim = self.spec.design.shape[1]

    def precision(self, theta: dict) -> sp.csc_matrix:
        return (self.spec.prior_precision * sp.eye(self.dim)).tocsc()

    def logdet(self, theta: dict) -> float:
        return self.dim * np.log(self.spec.prior_precision)

    def incidence(self):
        design = self.spec.design
        n, p = design.shape
        rows = np.repeat(np.arange(n), p)
        cols = np.tile(np.arange(p), n)
        return rows, cols, design.ravel()


class Ar1Block:
    """AR(1) effect over a time grid; obs row i loads coefficient index[i]."""

    sum_to_zero = True

    def __init__(self, n: int, index: np.ndarray, rho_key: str = "rho1", tau_key: str = "tau1",
                 name: str = "ar1"):
        self.n = n
        self.dim = n
        self.index = np.asarray(index, dtype=int)
        self.rho_key = rho_key
        self.tau_key = tau_key
        self.name = name

    def _spec(self, theta: dict) -> Ar1Spec:
        return Ar1Spec(n=self.n, rho=theta[self.rho_key], tau=theta[self.tau_key])

    def precision(self, theta: dict) -> sp.csc_matrix:
        return ar1_precision(self._spec(theta))

    def logdet(self, theta: dict) -> float:
        return ar1_logdet(self._spec(theta))

    def incidence(self):
        rows = np.arange(self.index.size)
        return rows, self.index, np.ones(self.index.size)


class CyclicRw2Block:
    """Cyclic RW(2) effect over hour-of-day classes."""

    sum_to_zero = True

    def __init__(self, n: int, index: np.ndarray, tau_key: str = "tau2",
                 jitter: float = RW2_JITTER, name: str = "rw2"):
        self.n = n
        self.dim = n
        self.index = np.asarray(index, dtype=int)
        self.tau_key = tau_key
        self.jitter = jitter
        self.name = name

    def precision(self, theta: dict) -> sp.csc_matrix:
        spec = CyclicRw2Spec(n=self.n, tau=theta[self.tau_key])
        return (cyclic_rw2_precision(spec) + self.jitter * sp.eye(self.n)).tocsc()

    def logdet(self, theta: dict) -> float:
        spec = CyclicRw2Spec(n=self.n, tau=theta[self.tau_key])
        eig_k = np.arange(self.n)
        eig = spec.tau * (2.0 - 2.0 * np.cos(2 * np.pi * eig_k / self.n)) ** 2 + self.jitter
        return float(np.sum(np.log(eig)))

    def incidence(self):
        rows = np.arange(self.index.size)
        return rows, self.index, np.ones(self.index.size)


@dataclass
class LatentField:
    """Assembled latent model: theta-dependent joint precision, fixed incidence
    matrix A (eta = A x), and sum-to-zero constraint rows."""

    blocks: tuple
    n_obs: int
    A: sp.csr_matrix
    constraints: np.ndarray  # (k, total_dim), possibly k = 0
    offsets: dict = field(default_factory=dict)

    @property
    def total_dim(self) -> int:
        return self.A.shape[1]

    def slice_of(self, name: str) -> slice:
        return self.offsets[name]

    def precision(self, theta: dict) -> sp.csc_matrix:
        return sp.block_diag([b.precision(theta) for b in self.blocks], format="csc")

    def prior_logdet(self, theta: dict) -> float:
        return float(sum(b.logdet(theta) for b in self.blocks))


def assemble_latent(blocks, n_obs: int) -> LatentField:
    """Stack blocks into one latent field; every block's incidence rows must
    index the same observation vector of length n_obs."""
    offsets = {}
    col0 = 0
    rows_all, cols_all, vals_all = [], [], []
    constraint_rows = []
    for b in blocks:
        if b.name in offsets:
            raise ValueError(f"duplicate block name {b.name!r}")
        offsets[b.name] = slice(col0, col0 + b.dim)
        r, c, v = b.incidence()
        r = np.asarray(r)
        if r.size and r.max() >= n_obs:
            raise ValueError(f"block {b.name!r} maps observation {r.max()} >= n_obs={n_obs}")
        rows_all.append(r)
        cols_all.append(np.asarray(c) + col0)
        vals_all.append(np.asarray(v, dtype=float))
        if b.sum_to_zero:
            constraint_rows.append((col0, b.dim))
        col0 += b.dim
    A = sp.csr_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n_obs, col0),
    )
    C = np.zeros((len(constraint_rows), col0))
    for i, (start, dim) in enumerate(constraint_rows):
        C[i, start : start + dim] = 1.0
    return LatentField(blocks=tuple(blocks), n_obs=n_obs, A=A, constraints=C, offsets=offsets)


def constrain(Q, C: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Condition x on Cx = 0 by kriging: x - Q^-1 C' (C Q^-1 C')^-1 C x.

    Q may be a sparse matrix or any object with a ``solve`` method; x may be a
    vector or a matrix of column samples.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.size == 0 or C.shape[0] == 0:
        return x
    if hasattr(Q, "solve"):
        V = Q.solve(C.T)
    else:
        from scipy.sparse.linalg import splu

        V = splu(sp.csc_matrix(Q)).solve(C.T)
    S = C @ V
    try:
        correction = V @ np.linalg.solve(S, C @ x)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"constraint system C Q^-1 C' is singular: {exc}") from None
    return x - correction
