"""Gaussian mixtures in low-rank-plus-diagonal form.

Builds the ensemble reconstruction mixture of a fitted latent model,
conditions it on an observed data vector and draws new ensemble members.
Components produced here share one covariance object, so every expensive
factorisation is done once per mixture rather than once per component.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .llvm import LOG_2PI, JointEnsemble, LatentPosterior, LlvmParams


@dataclass(frozen=True, eq=False)
class FactoredCov:
    """Covariance ``A S A^T + diag(p)`` with ``A`` (D, M) and ``S`` (M, M)."""

    A: np.ndarray
    S: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        p = np.asarray(self.p, dtype=float).ravel()
        if S.shape != (A.shape[1], A.shape[1]) or p.shape != (A.shape[0],):
            raise ValueError("inconsistent factored covariance shapes")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "S", 0.5 * (S + S.T))
        object.__setattr__(self, "p", p)
        lam, V = np.linalg.eigh(self.S)
        # R R^T = S and B B^T = A S A^T; small negative eigenvalues are roundoff
        root = V * np.sqrt(np.clip(lam, 0.0, None))
        object.__setattr__(self, "_root", root)
        object.__setattr__(self, "_B", A @ root)
        # thin SVD of the noise-whitened factor drives every solve below
        # (full V when D < M so the null directions of the factor are kept)
        Bt = self._B / np.sqrt(p)[:, None]
        U, sv, Vt = np.linalg.svd(Bt, full_matrices=Bt.shape[0] < Bt.shape[1])
        object.__setattr__(self, "_svd", (U, sv, Vt))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def dense(self) -> np.ndarray:
        return self.A @ self.S @ self.A.T + np.diag(self.p)

    def logpdf(self, x, means) -> np.ndarray:
        """Log-density of ``x`` under N(mean_k, self) for every row of ``means``."""
        return self._whitened_logpdf(self._whiten(x, means))

    def _whiten(self, x, means) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.atleast_2d(means)) / np.sqrt(self.p)

    def _whitened_logpdf(self, r: np.ndarray) -> np.ndarray:
        # the quadratic form splits into the part orthogonal to range(U) and
        # the shrunk in-range part, so nothing cancels when p is tiny
        U, sv, _ = self._svd
        proj = r @ U
        perp = r - proj @ U.T
        quad = np.sum(perp * perp, axis=1) + np.sum(proj * proj / (1.0 + sv * sv), axis=1)
        logdet = np.sum(np.log(self.p)) + np.sum(np.log1p(sv * sv))
        return -0.5 * (self.dim * LOG_2PI + logdet + quad)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Zero-mean draws, shape (n, D)."""
        z = rng.standard_normal((n, self._B.shape[1]))
        e = rng.standard_normal((n, self.dim))
        return z @ self._B.T + e * np.sqrt(self.p)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: tuple[FactoredCov, ...]
    diverged: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = tuple(self.covs)
        if len(covs) == 1 and len(w) > 1:
            covs = covs * len(w)
        if not (len(w) == means.shape[0] == len(covs)):
            raise ValueError("weights, means and covs must have one entry per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to one")
        if not np.all(np.isfinite(means)):
            raise ValueError("component means must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def groups(self):
        """Yield ``(cov, component_indices)`` for each distinct covariance object."""
        seen: dict[int, list[int]] = {}
        objs: dict[int, FactoredCov] = {}
        for i, c in enumerate(self.covs):
            seen.setdefault(id(c), []).append(i)
            objs[id(c)] = c
        for key, idx in seen.items():
            yield objs[key], np.asarray(idx)

    def rescaled(self, scale) -> "GaussianMixture":
        """Mixture of ``diag(scale) x`` for ``x`` drawn from this mixture."""
        scale = np.asarray(scale, dtype=float)
        mapped = {}
        covs = []
        for c in self.covs:
            if id(c) not in mapped:
                mapped[id(c)] = FactoredCov(c.A * scale[:, None], c.S, c.p * scale**2)
            covs.append(mapped[id(c)])
        return GaussianMixture(self.weights, self.means * scale, tuple(covs), self.diverged)

    def effective_components(self) -> float:
        """Exponential of the weight entropy, in [1, K]."""
        w = self.weights[self.weights > 0]
        return float(np.exp(-np.sum(w * np.log(w))))

    def marginal_pdf(self, index: int, x) -> np.ndarray:
        """Density of coordinate ``index`` evaluated at the points ``x``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for cov, idx in self.groups():
            var = np.sum(cov._B[index] ** 2) + cov.p[index]
            mu = self.means[idx, index]
            dens = np.exp(-0.5 * (x[:, None] - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)
            out += dens @ self.weights[idx]
        return out


def count_modes(pdf_values, min_rel_height: float = 0.0) -> int:
    """Strict interior local maxima of a gridded density.

    Maxima lower than ``min_rel_height`` times the global maximum are ignored.
    """
    f = np.asarray(pdf_values)
    peak = (f[1:-1] > f[:-2]) & (f[1:-1] > f[2:])
    return int(np.sum(peak & (f[1:-1] >= min_rel_height * f.max())))


@dataclass(frozen=True)
class InflationResult:
    alpha: float
    alpha_raw: float


def build_joint_mixture(params: LlvmParams, ensemble: JointEnsemble) -> GaussianMixture:
    """One reconstruction component per ensemble member, equally weighted."""
    if ensemble.h_q != params.h_q or ensemble.h_d != params.h_d:
        raise ValueError("ensemble blocks do not match the fitted model")
    means = params.project(ensemble.samples) @ params.W.T + params.mu
    cov = FactoredCov(params.W, params.latent_cov, params.psi)
    n = ensemble.n
    return GaussianMixture(np.full(n, 1.0 / n), means, (cov,) * n)


def mixture_moments(gm: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    mean = gm.weights @ gm.means
    centred = gm.means - mean
    cov = (centred * gm.weights[:, None]).T @ centred
    for c, idx in gm.groups():
        cov += gm.weights[idx].sum() * c.dense()
    return mean, 0.5 * (cov + cov.T)


def inflate_noise(params: LlvmParams, d_obs) -> InflationResult:
    """Maximum-likelihood scale of the observable noise, clamped below at one.

    With the empirical noise taken as the outer product of the innovation
    ``r = d_obs - mu_d``, the optimum is ``r^T Psi_d^{-1} r / H_d``.
    """
    d_obs = np.asarray(d_obs, dtype=float)
    if d_obs.shape != (params.h_d,):
        raise ValueError(f"d_obs must have length {params.h_d}")
    r = d_obs - params.mu_d
    raw = float(np.sum(r * r / params.psi_d) / params.h_d)
    return InflationResult(alpha=max(1.0, raw), alpha_raw=raw)


def condition_mixture(
    params: LlvmParams,
    latent_posteriors: list[LatentPosterior],
    d_obs,
    alpha: float = 1.0,
) -> GaussianMixture:
    """Condition every reconstruction component on ``d_obs``; returns a mixture over q.

    Weights are the component likelihoods of ``d_obs`` under the observable
    marginal with noise ``alpha * Psi_d``. If every weight underflows the
    result falls back to uniform weights and is flagged ``diverged``.
    """
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    d_obs = np.asarray(d_obs, dtype=float)
    if d_obs.shape != (params.h_d,):
        raise ValueError(f"d_obs must have length {params.h_d}")
    n = len(latent_posteriors)
    Wq, Wd = params.W_q, params.W_d
    noise_d = alpha * params.psi_d
    resid0 = d_obs - params.mu_d

    means = np.empty((n, params.h_q))
    covs: list[FactoredCov | None] = [None] * n
    logw = np.empty(n)
    # sharing is by identity of the latent covariance array
    by_cov: dict[int, list[int]] = {}
    for i, lp in enumerate(latent_posteriors):
        by_cov.setdefault(id(lp.cov), []).append(i)
    for idx in by_cov.values():
        C = latent_posteriors[idx[0]].cov
        m = np.array([latent_posteriors[i].mean for i in idx])
        obs_cov = FactoredCov(Wd, C, noise_d)
        r = obs_cov._whiten(resid0, m @ Wd.T)
        with np.errstate(over="ignore"):
            # overflow here means a zero weight; handled after the loop
            logw[idx] = obs_cov._whitened_logpdf(r)
        # with C = R R^T and noise-whitened W_d R = U s V^T the latent posterior is
        # P = (R V) diag(1/(1+s^2)) (R V)^T, mean m + (R V) diag(s/(1+s^2)) U^T r
        U, sv, Vt = obs_cov._svd
        RV = obs_cov._root @ Vt.T
        k = len(sv)
        shrink = np.ones(RV.shape[1])
        shrink[:k] = 1.0 / (1.0 + sv * sv)
        P = (RV * shrink) @ RV.T
        z_mean = m + ((r @ U) * (sv * shrink[:k])) @ RV[:, :k].T
        means[idx] = z_mean @ Wq.T + params.mu_q
        post_cov = FactoredCov(Wq, P, params.psi_q)
        for i in idx:
            covs[i] = post_cov

    diverged = False
    finite = np.isfinite(logw)
    if not np.any(finite):
        w = np.full(n, 1.0 / n)
        diverged = True
    else:
        logw = np.where(finite, logw, -np.inf)
        w = np.exp(logw - logsumexp(logw))
        w /= w.sum()
    return GaussianMixture(w, means, tuple(covs), diverged=diverged)


def sample_mixture(gm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial component choice followed by an exact Gaussian draw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(gm.k, size=n, p=gm.weights)
    out = gm.means[comp].copy()
    for cov, idx in gm.groups():
        hit = np.flatnonzero(np.isin(comp, idx))
        if hit.size:
            out[hit] += cov.sample(hit.size, rng)
    return out
