"""Laplace-approximate inference for latent Gaussian models: a Newton solver
for the Gaussian approximation to p(x | y, theta), the Laplace marginal
likelihood log p(y | theta), and a derivative-free search for the posterior
mode of the hyperparameters.

The fitted object is an empirical-Bayes plug-in: hyperparameters at their
posterior mode, latent field summarized by the Gaussian approximation there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.linalg import splu
from scipy import special

from .distributions import (
    XI_ZERO,
    bernoulli_logit_logpdf,
    gamma_q_logpdf,
    gp_q_logpdf,
    GammaQ,
    GPQ,
)
from .latent import LatentField

HESSIAN_FLOOR = 1e-10
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 30


class InferenceError(RuntimeError):
    pass


class NewtonDivergence(InferenceError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (last gradient inf-norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class HyperOptError(InferenceError):
    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class SparseFactor:
    """SPD sparse factorization with log-determinant, via SuperLU restricted to
    natural ordering and diagonal pivoting (an LDL' factorization in effect)."""

    def __init__(self, Q: sp.spmatrix):
        self._lu = splu(
            sp.csc_matrix(Q),
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
        n = Q.shape[0]
        if not (
            np.array_equal(self._lu.perm_r, np.arange(n))
            and np.array_equal(self._lu.perm_c, np.arange(n))
        ):
            raise InferenceError("factorization pivoted away from the diagonal")
        diag = self._lu.U.diagonal()
        if np.any(diag <= 0):
            raise InferenceError("matrix is not positive definite")
        self.logdet = float(np.sum(np.log(diag)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))


# ---------------------------------------------------------------------------
# Likelihood adapters: observations plus stage hyperparameters, evaluated along
# the linear predictor. Each returns (total loglik, d/deta, d2/deta2) arrays.
# ---------------------------------------------------------------------------


class GammaLikelihood:
    """Positive observations with the quantile-anchored Gamma density."""

    def __init__(self, y: np.ndarray, kappa: float, alpha: float):
        self.y = np.asarray(y, dtype=float)
        if np.any(self.y <= 0):
            raise ValueError("Gamma stage requires strictly positive observations")
        self.kappa = kappa
        self.alpha = alpha
        self._logc = math.log(float(special.gammaincinv(kappa, alpha)))

    def eval(self, eta: np.ndarray):
        c_over_psi = np.exp(self._logc - eta)
        ry = self.y * c_over_psi
        ll = (
            self.kappa * (self._logc - eta)
            - special.gammaln(self.kappa)
            + (self.kappa - 1) * np.log(self.y)
            - ry
        )
        return float(np.sum(ll)), ry - self.kappa, -ry


class BernoulliLikelihood:
    def __init__(self, y: np.ndarray):
        self.y = np.asarray(y, dtype=float)
        if np.any((self.y != 0) & (self.y != 1)):
            raise ValueError("Bernoulli stage requires 0/1 indicators")

    def eval(self, eta: np.ndarray):
        ll, d1, d2 = bernoulli_logit_logpdf(self.y, eta)
        return float(np.sum(ll)), d1, d2


class GenParetoLikelihood:
    """Threshold exceedances with the quantile-anchored GP density."""

    def __init__(self, x: np.ndarray, xi: float, beta: float):
        self.x = np.asarray(x, dtype=float)
        if np.any(self.x < 0):
            raise ValueError("GP stage requires nonnegative exceedances")
        self.xi = xi
        self.beta = beta

    def eval(self, eta: np.ndarray):
        if self.xi < XI_ZERO:
            lam = -math.log1p(-self.beta)
            b = lam * self.x * np.exp(-eta)
            ll = math.log(lam) - eta - b
            return float(np.sum(ll)), b - 1.0, -b
        slope = np.expm1(-self.xi * math.log1p(-self.beta))
        a = slope * self.x * np.exp(-eta)
        k = 1.0 / self.xi + 1.0
        ll = math.log(slope) - math.log(self.xi) - eta - k * np.log1p(a)
        frac = a / (1.0 + a)
        return float(np.sum(ll)), k * frac - 1.0, -k * frac / (1.0 + a)


class GaussianLikelihood:
    """y ~ N(eta, 1/prec); used for exactness checks and toy problems."""

    def __init__(self, y: np.ndarray, prec: float = 1.0):
        self.y = np.asarray(y, dtype=float)
        self.prec = prec

    def eval(self, eta: np.ndarray):
        r = self.y - eta
        ll = 0.5 * math.log(self.prec / (2 * math.pi)) - 0.5 * self.prec * r**2
        return float(np.sum(ll)), self.prec * r, np.full(eta.shape, -self.prec)


# ---------------------------------------------------------------------------
# Gaussian approximation (Newton with step-halving and kriged constraints)
# ---------------------------------------------------------------------------


@dataclass
class GaussianApprox:
    """Mode and curvature of the Gaussian approximation to p(x | y, theta)."""

    x: np.ndarray
    theta: dict
    field: LatentField
    factor: SparseFactor  # factor of Q* = Q_prior + A' W A at the mode
    loglik: float
    prior_quad: float  # x' Q_prior x at the mode
    logdet_prior: float
    logdet_post: float
    # constraint pieces (empty when unconstrained)
    constraint_logdet_prior: float
    constraint_logdet_post: float
    V_post: np.ndarray  # Q*^-1 C'
    S_post: np.ndarray  # C Q*^-1 C'
    n_iter: int
    grad_norm: float
    trace: list = field(default_factory=list)


def _project_out(C: np.ndarray, v: np.ndarray) -> np.ndarray:
    if C.shape[0] == 0:
        return v
    coef = np.linalg.solve(C @ C.T, C @ v)
    return v - C.T @ coef


def gaussian_approx(
    latent: LatentField,
    lik,
    theta: dict,
    x0: np.ndarray | None = None,
    max_iter: int = NEWTON_MAX_ITER,
    tol: float = NEWTON_TOL,
) -> GaussianApprox:
    """Newton-iterate to the (constrained) mode of the latent posterior at
    fixed hyperparameters and assemble the Laplace pieces there."""
    A = latent.A
    C = latent.constraints
    Qp = latent.precision(theta)
    n = latent.total_dim
    if latent.n_obs < 1:
        raise ValueError("need at least one observation")

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if C.shape[0]:
        x = _project_out(C, x)

    def objective(xv, eta=None):
        eta = A @ xv if eta is None else eta
        ll, _, _ = lik.eval(eta)
        return ll - 0.5 * float(xv @ (Qp @ xv))

    eta = A @ x
    ll, g, h = lik.eval(eta)
    obj = ll - 0.5 * float(x @ (Qp @ x))
    grad_norm = np.inf
    factor = None
    trace = []
    converged = False
    for it in range(1, max_iter + 1):
        w = np.maximum(-h, HESSIAN_FLOOR)
        Qs = (Qp + A.T @ sp.diags(w) @ A).tocsc()
        factor = SparseFactor(Qs)
        b = A.T @ (w * eta + g)
        x_new = factor.solve(b)
        if C.shape[0]:
            V = factor.solve(C.T)
            S = C @ V
            x_new = x_new - V @ np.linalg.solve(S, C @ x_new)
        # step-halving keeps the objective non-decreasing
        step = x_new - x
        t = 1.0
        for _ in range(MAX_HALVINGS):
            x_try = x + t * step
            obj_try = objective(x_try)
            if np.isfinite(obj_try) and obj_try >= obj - 1e-12 * (1 + abs(obj)):
                break
            t *= 0.5
        else:
            raise NewtonDivergence("step-halving failed to find ascent", grad_norm)
        x = x + t * step
        eta = A @ x
        ll, g, h = lik.eval(eta)
        obj = ll - 0.5 * float(x @ (Qp @ x))
        grad = A.T @ g - Qp @ x
        grad = _project_out(C, grad)
        grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        trace.append({"iter": it, "objective": obj, "grad_norm": grad_norm, "step": t})
        if grad_norm < tol:
            converged = True
            break
    if not converged:
        raise NewtonDivergence(f"Newton did not converge in {max_iter} iterations", grad_norm)

    # curvature at the accepted mode
    w = np.maximum(-h, HESSIAN_FLOOR)
    Qs = (Qp + A.T @ sp.diags(w) @ A).tocsc()
    factor = SparseFactor(Qs)
    logdet_prior = latent.prior_logdet(theta)

    if C.shape[0]:
        V_post = factor.solve(C.T)
        S_post = C @ V_post
        prior_factor = SparseFactor(Qp)
        S_prior = C @ prior_factor.solve(C.T)
        sgn_post, cl_post = np.linalg.slogdet(S_post)
        sgn_prior, cl_prior = np.linalg.slogdet(S_prior)
        if sgn_post <= 0 or sgn_prior <= 0:
            raise InferenceError("constraint Schur complement is not positive definite")
    else:
        V_post = np.zeros((n, 0))
        S_post = np.zeros((0, 0))
        cl_post = 0.0
        cl_prior = 0.0

    return GaussianApprox(
        x=x,
        theta=dict(theta),
        field=latent,
        factor=factor,
        loglik=ll,
        prior_quad=float(x @ (Qp @ x)),
        logdet_prior=logdet_prior,
        logdet_post=factor.logdet,
        constraint_logdet_prior=cl_prior,
        constraint_logdet_post=cl_post,
        V_post=V_post,
        S_post=S_post,
        n_iter=it,
        grad_norm=grad_norm,
        trace=trace,
    )


def log_evidence(approx: GaussianApprox) -> float:
    """Laplace estimate of log p(y | theta); exact when the likelihood is
    Gaussian in the linear predictor. Constraint corrections follow the
    conditioning-by-kriging identities."""
    value = (
        approx.loglik
        - 0.5 * approx.prior_quad
        + 0.5 * (approx.logdet_prior - approx.logdet_post)
    )
    value += 0.5 * (approx.constraint_logdet_prior - approx.constraint_logdet_post)
    return float(value)


def predictor_marginals(approx: GaussianApprox):
    """Posterior mean and variance of each observation's linear predictor under
    the (constrained) Gaussian approximation."""
    A = approx.field.A
    mean = A @ approx.x
    cols = approx.factor.solve(np.asarray(A.T.todense()))
    var = np.asarray(A.multiply(cols.T).sum(axis=1)).ravel()
    if approx.S_post.size:
        AV = A @ approx.V_post
        var = var - np.einsum("ij,ij->i", AV @ np.linalg.inv(approx.S_post), AV)
    return mean, np.maximum(var, 0.0)


def latent_marginal_variance(approx: GaussianApprox, rows: np.ndarray):
    """Variance of linear functionals rows @ x (rows dense, one per functional)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    cols = approx.factor.solve(rows.T)
    var = np.einsum("ij,ji->i", rows, cols)
    if approx.S_post.size:
        RV = rows @ approx.V_post
        var = var - np.einsum("ij,ij->i", RV @ np.linalg.inv(approx.S_post), RV)
    return np.maximum(var, 0.0)


# ---------------------------------------------------------------------------
# Hyperparameter optimization
# ---------------------------------------------------------------------------

_TRANSFORMS = {
    "log": (
        lambda t: math.exp(t),
        lambda v: math.log(v),
        lambda t, v: t,  # log |d nat / d t| = log(nat) = t
    ),
    "atanh": (
        lambda t: math.tanh(t),
        lambda v: math.atanh(v),
        lambda t, v: math.log1p(-v * v),
    ),
    "softplus": (
        lambda t: math.log1p(math.exp(-abs(t))) + max(t, 0.0),
        lambda v: v + math.log(-math.expm1(-v)),  # inverse softplus, v > 0
        lambda t, v: -(math.log1p(math.exp(-abs(t))) + max(-t, 0.0)),  # log sigmoid(t)
    ),
    "identity": (lambda t: t, lambda v: v, lambda t, v: 0.0),
}


@dataclass(frozen=True)
class HyperParam:
    """One hyperparameter: its transform to the unconstrained scale, a starting
    value on the natural scale, and a log-prior density in natural units."""

    name: str
    transform: str
    init: float
    logprior: object = None  # callable nat -> float, or None for flat

    def to_natural(self, t: float) -> float:
        return _TRANSFORMS[self.transform][0](t)

    def from_natural(self, v: float) -> float:
        return _TRANSFORMS[self.transform][1](v)

    def log_jacobian(self, t: float, v: float) -> float:
        return _TRANSFORMS[self.transform][2](t, v)


@dataclass
class HyperEstimate:
    theta: dict  # natural scale
    theta_transformed: np.ndarray
    logpost: float
    approx: GaussianApprox
    n_eval: int
    converged: bool
    simplex_spread: float
    trace: list


def optimize_hyper(
    latent: LatentField,
    make_lik,
    params: list[HyperParam],
    xatol: float = 1e-4,
    fatol: float = 1e-5,
    maxfev: int = 500,
) -> HyperEstimate:
    """Maximize log p(y | theta) + log p(theta) over transformed hyperparameters
    with a Nelder-Mead simplex; the Gaussian approximation is warm-started
    between nearby evaluations."""
    t0 = np.array([p.from_natural(p.init) for p in params])
    state = {"x0": None, "n": 0, "best": None, "trace": []}

    def to_theta(tvec):
        return {p.name: p.to_natural(t) for p, t in zip(params, tvec)}

    def neg_logpost(tvec):
        state["n"] += 1
        theta = to_theta(tvec)
        try:
            approx = gaussian_approx(latent, make_lik(theta), theta, x0=state["x0"])
        except (InferenceError, ValueError, np.linalg.LinAlgError):
            # out-of-domain or numerically hopeless theta: repel the simplex
            return np.inf
        state["x0"] = approx.x
        value = log_evidence(approx)
        for p, t in zip(params, tvec):
            v = theta[p.name]
            # a natural-scale prior density transforms with its Jacobian;
            # logprior None means flat on the search scale (no tilt)
            if p.logprior is not None:
                value += float(p.logprior(v)) + p.log_jacobian(float(t), v)
        if not np.isfinite(value):
            return np.inf
        if state["best"] is None or value > state["best"][0]:
            state["best"] = (value, np.array(tvec))
        state["trace"].append((state["n"], float(value)))
        return -value

    res = minimize(
        neg_logpost,
        t0,
        method="Nelder-Mead",
        options={
            "xatol": xatol,
            "fatol": fatol,
            "maxfev": maxfev,
            "initial_simplex": _initial_simplex(t0),
        },
    )
    if state["best"] is None:
        raise HyperOptError("objective was never finite")
    if not res.success:
        best_theta = to_theta(state["best"][1])
        raise HyperOptError(
            f"no convergence within {state['n']} evaluations (cap {maxfev}); best "
            f"logpost {state['best'][0]:.6g} at {best_theta}",
            best=(state["best"][0], best_theta),
        )
    t_hat = res.x
    theta_hat = to_theta(t_hat)
    approx = gaussian_approx(latent, make_lik(theta_hat), theta_hat, x0=state["x0"])
    spread = float(np.max(np.abs(res.final_simplex[0] - res.final_simplex[0][0])))
    return HyperEstimate(
        theta=theta_hat,
        theta_transformed=t_hat,
        logpost=-float(res.fun),
        approx=approx,
        n_eval=state["n"],
        converged=bool(res.success),
        simplex_spread=spread,
        trace=state["trace"],
    )


def _initial_simplex(t0: np.ndarray) -> np.ndarray:
    """Fixed-size simplex around t0 (scipy's default scales poorly near 0)."""
    n = t0.size
    simplex = np.tile(t0, (n + 1, 1))
    for i in range(n):
        simplex[i + 1, i] += 0.5
    return simplex
