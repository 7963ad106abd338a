"""Linear latent variable models (PPCA and factor analysis) fitted by batch EM.

The generative model is ``y = W z + mu + eta`` with ``z ~ N(0, I_M)`` and
``eta ~ N(0, diag(psi))``. Every routine works in factored form: the implied
covariance ``W W^T + diag(psi)`` is never materialised, so a fit costs
O(H N M) per EM iteration and a latent projection O(H M^2).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

LOG_2PI = np.log(2.0 * np.pi)


class Variant(str, enum.Enum):
    PPCA = "ppca"
    FA = "fa"


@dataclass(frozen=True)
class EmOptions:
    tol: float = 1e-8
    max_iter: int = 500
    # optional extra stop on relative change of (W, psi); loglik alone stalls
    # at roundoff long before the parameters settle on high-SNR data
    param_tol: float | None = None
    psi_floor_rel: float = 1e-9
    psi_floor_abs: float = 1e-12


@dataclass(frozen=True)
class FitInfo:
    """Diagnostics of one EM run. ``loglik`` holds the total log-likelihood
    of the parameters at the start of every iteration plus the final value."""

    loglik: tuple[float, ...]
    n_iter: int
    converged: bool
    degenerate: bool = False  # psi clamped at the floor, or a zero-variance ensemble


@dataclass(frozen=True)
class JointEnsemble:
    """N stacked samples ``[q; d]`` of shape (N, h_q + h_d)."""

    samples: np.ndarray
    h_q: int
    h_d: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != self.h_q + self.h_d:
            raise ValueError(
                f"samples must have shape (N, {self.h_q + self.h_d}), got {samples.shape}"
            )
        if samples.shape[0] < 1:
            raise ValueError("ensemble is empty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("ensemble contains non-finite values")
        object.__setattr__(self, "samples", samples)

    @classmethod
    def stack(cls, q: np.ndarray, d: np.ndarray) -> "JointEnsemble":
        q = np.atleast_2d(np.asarray(q, dtype=float))
        d = np.atleast_2d(np.asarray(d, dtype=float))
        return cls(np.hstack([q, d]), q.shape[1], d.shape[1])

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def h(self) -> int:
        return self.h_q + self.h_d


@dataclass(frozen=True)
class LatentPosterior:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class LlvmParams:
    """Fitted latent model. ``W`` is (H, M); ``mu`` and ``psi`` have length H.

    The first ``h_q`` rows belong to the quantities of interest, the remaining
    ``h_d`` rows to the observables.
    """

    W: np.ndarray
    mu: np.ndarray
    psi: np.ndarray
    variant: Variant
    h_q: int
    h_d: int
    info: FitInfo | None = field(default=None, repr=False)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        mu = np.asarray(self.mu, dtype=float).ravel()
        psi = np.asarray(self.psi, dtype=float).ravel()
        h = self.h_q + self.h_d
        if W.shape[0] != h or mu.shape != (h,) or psi.shape != (h,):
            raise ValueError("W, mu, psi are inconsistent with h_q + h_d")
        if np.any(psi <= 0):
            raise ValueError("psi entries must be positive")
        for name, arr in (("W", W), ("mu", mu), ("psi", psi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def h(self) -> int:
        return self.h_q + self.h_d

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def W_q(self) -> np.ndarray:
        return self.W[: self.h_q]

    @property
    def W_d(self) -> np.ndarray:
        return self.W[self.h_q :]

    @property
    def mu_q(self) -> np.ndarray:
        return self.mu[: self.h_q]

    @property
    def mu_d(self) -> np.ndarray:
        return self.mu[self.h_q :]

    @property
    def psi_q(self) -> np.ndarray:
        return self.psi[: self.h_q]

    @property
    def psi_d(self) -> np.ndarray:
        return self.psi[self.h_q :]

    @cached_property
    def _psi_inv_W(self) -> np.ndarray:
        return self.W / self.psi[:, None]

    @cached_property
    def latent_cov(self) -> np.ndarray:
        """``I - W^T Sigma^{-1} W``, which equals ``(I + W^T Psi^{-1} W)^{-1}``."""
        inner = np.eye(self.m) + self.W.T @ self._psi_inv_W
        cov = np.linalg.inv(inner)
        cov = 0.5 * (cov + cov.T)
        cov.setflags(write=False)
        return cov

    @cached_property
    def _logdet_inner(self) -> float:
        inner = np.eye(self.m) + self.W.T @ self._psi_inv_W
        return float(np.linalg.slogdet(inner)[1])

    def implied_cov(self) -> np.ndarray:
        """Dense ``W W^T + diag(psi)``; for diagnostics on small H only."""
        return self.W @ self.W.T + np.diag(self.psi)

    def project(self, samples: np.ndarray) -> np.ndarray:
        """Posterior latent means ``W^T Sigma^{-1} (y - mu)`` for rows of ``samples``."""
        samples = np.asarray(samples, dtype=float)
        if samples.shape[-1] != self.h:
            raise ValueError(f"expected trailing dimension {self.h}, got {samples.shape}")
        return (samples - self.mu) @ self._psi_inv_W @ self.latent_cov

    def sigma_inv_apply(self, x: np.ndarray) -> np.ndarray:
        """Apply ``Sigma^{-1}`` to the rows of ``x`` with the Woodbury identity."""
        x = np.asarray(x, dtype=float)
        px = x / self.psi
        return px - (px @ self.W) @ self.latent_cov @ self._psi_inv_W.T


def latent_posterior(params: LlvmParams, sample) -> LatentPosterior:
    """Gaussian posterior of the latent variable given one joint sample."""
    sample = np.asarray(sample, dtype=float)
    if sample.shape != (params.h,):
        raise ValueError(f"sample must have length {params.h}, got shape {sample.shape}")
    return LatentPosterior(params.project(sample), params.latent_cov)


def latent_posteriors(params: LlvmParams, samples) -> list[LatentPosterior]:
    means = params.project(np.atleast_2d(samples))
    return [LatentPosterior(m, params.latent_cov) for m in means]


def marginal_loglik(params: LlvmParams, sample) -> np.ndarray | float:
    """Log-density of ``sample`` (or each row of a 2-D array) under N(mu, W W^T + Psi)."""
    sample = np.asarray(sample, dtype=float)
    if sample.shape[-1] != params.h:
        raise ValueError(f"expected trailing dimension {params.h}, got {sample.shape}")
    x = sample - params.mu
    u = x @ params._psi_inv_W
    quad = np.sum(x * x / params.psi, axis=-1) - np.sum((u @ params.latent_cov) * u, axis=-1)
    logdet = np.sum(np.log(params.psi)) + params._logdet_inner
    out = -0.5 * (params.h * LOG_2PI + logdet + quad)
    return float(out) if np.ndim(out) == 0 else out


def _e_step(X: np.ndarray, var: np.ndarray, W: np.ndarray, psi: np.ndarray):
    """Total log-likelihood of centred data and the M x M statistics the M-step needs."""
    n, h = X.shape
    PW = W / psi[:, None]
    inner = np.eye(W.shape[1]) + W.T @ PW
    G = np.linalg.inv(inner)
    XPW = X @ PW
    B = XPW.T @ XPW
    quad = n * np.sum(var / psi) - np.sum(G * B)
    logdet = np.sum(np.log(psi)) + np.linalg.slogdet(inner)[1]
    return -0.5 * (n * (h * LOG_2PI + logdet) + quad), XPW, G, B


@njit(cache=True)
def _em_loop(X, var, W, psi, ppca, floor, tol, param_tol, max_iter):
    """Batch EM iterations; same arithmetic as ``_e_step`` followed by the M-step.

    ``param_tol < 0`` disables the parameter-change stopping test.
    """
    n, h = X.shape
    m = W.shape[1]
    eye = np.eye(m)
    trace = np.empty(max_iter + 1)
    n_tr = 0
    step = np.inf
    converged = False
    it = 0
    log2pi = np.log(2.0 * np.pi)
    while it < max_iter:
        it += 1
        PW = W / psi.reshape(-1, 1)
        inner = eye + W.T @ PW
        G = np.linalg.inv(inner)
        XPW = X @ PW
        B = XPW.T @ XPW
        quad = n * np.sum(var / psi) - np.sum(G * B)
        logdet = np.sum(np.log(psi)) + np.linalg.slogdet(inner)[1]
        ll = -0.5 * (n * (h * log2pi + logdet) + quad)
        if (n_tr > 0 and abs(ll - trace[n_tr - 1]) <= tol * abs(trace[n_tr - 1])
                and (param_tol < 0 or step <= param_tol)):
            trace[n_tr] = ll
            n_tr += 1
            converged = True
            break
        trace[n_tr] = ll
        n_tr += 1
        # summed latent second moments and data/latent cross moments
        Ezz = n * G + G @ B @ G
        XtEz = (X.T @ XPW) @ G
        try:
            W_new = np.linalg.solve(Ezz, XtEz.T).T.copy()
        except Exception:
            # Ezz is positive definite but can be numerically singular once psi
            # sits on the floor
            W_new = np.linalg.lstsq(Ezz, XtEz.T, 1e-15)[0].T.copy()
        psi_new = var - np.sum(W_new * XtEz, axis=1) / n
        if ppca:
            psi_new = np.full(h, psi_new.mean())
        psi_new = np.maximum(psi_new, floor)
        if param_tol >= 0:
            nw = max(np.linalg.norm(W_new), 1e-300)
            step = max(np.linalg.norm(W_new - W) / nw,
                       np.linalg.norm(psi_new - psi) / np.linalg.norm(psi_new))
        W = W_new
        psi = psi_new
    if not converged:
        PW = W / psi.reshape(-1, 1)
        inner = eye + W.T @ PW
        G = np.linalg.inv(inner)
        XPW = X @ PW
        quad = n * np.sum(var / psi) - np.sum(G * (XPW.T @ XPW))
        logdet = np.sum(np.log(psi)) + np.linalg.slogdet(inner)[1]
        trace[n_tr] = -0.5 * (n * (h * log2pi + logdet) + quad)
        n_tr += 1
    return W, psi, trace[:n_tr], it, converged


def _initial_loadings(X: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    std = X.std(axis=0)
    return rng.standard_normal((X.shape[1], m)) * std[:, None] / np.sqrt(m)


def fit_llvm(
    ensemble: JointEnsemble,
    m: int,
    variant: Variant | str = Variant.PPCA,
    opts: EmOptions | None = None,
    seed=None,
    init: LlvmParams | None = None,
) -> LlvmParams:
    """Maximum-likelihood PPCA or FA fit by batch EM.

    ``mu`` is the sample mean and the sample covariance uses 1/N
    normalisation. ``init`` warm-starts from a previous fit with the same
    shape; otherwise loadings are seeded Gaussian draws scaled by the
    per-coordinate standard deviation.
    """
    opts = opts or EmOptions()
    variant = Variant(variant)
    Y = ensemble.samples
    n, h = Y.shape
    if not 1 <= m < max(n, 2):
        raise ValueError(f"latent dimension must satisfy 1 <= m < N, got m={m}, N={n}")
    mu = Y.mean(axis=0)
    X = Y - mu
    var = np.mean(X * X, axis=0)
    floor = opts.psi_floor_rel * max(float(var.max()), opts.psi_floor_abs)

    if not np.any(var > 0):
        info = FitInfo(loglik=(), n_iter=0, converged=True, degenerate=True)
        return LlvmParams(np.zeros((h, m)), mu, np.full(h, floor), variant,
                          ensemble.h_q, ensemble.h_d, info)

    def clamp(psi):
        if variant is Variant.PPCA:
            psi = np.full(h, psi.mean())
        return np.maximum(psi, floor)

    if init is not None and init.W.shape == (h, m):
        W = np.array(init.W, dtype=float)
        psi = clamp(np.array(init.psi, dtype=float))
    else:
        W = _initial_loadings(X, m, np.random.default_rng(seed))
        coef, *_ = np.linalg.lstsq(W, X.T, rcond=None)
        resid = X - (W @ coef).T
        psi = clamp(np.mean(resid * resid, axis=0))

    param_tol = -1.0 if opts.param_tol is None else float(opts.param_tol)
    W, psi, trace, it, converged = _em_loop(
        X, var, W, psi, variant is Variant.PPCA, floor, float(opts.tol), param_tol, int(opts.max_iter)
    )
    trace = trace.tolist()

    info = FitInfo(loglik=tuple(trace), n_iter=it, converged=converged,
                   degenerate=bool(np.any(psi <= floor)))
    return LlvmParams(W, mu, psi, variant, ensemble.h_q, ensemble.h_d, info)
