"""The EnLLVM filter cycle, the stochastic EnKF baseline and a single-trial runner."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .config import BenchConfig
from .llvm import EmOptions, JointEnsemble, LlvmParams, Variant, fit_llvm, latent_posteriors
from .mixture import (
    GaussianMixture,
    condition_mixture,
    inflate_noise,
    mixture_moments,
    sample_mixture,
)

# Lorenz 63 prior: equal-weight pair of Gaussians, covariance sqrt(0.35) * I
L63_PRIOR_MEANS = np.array([[-0.2, -0.2, 8.0], [0.2, 0.2, 8.0]])
L63_PRIOR_VAR = np.sqrt(0.35)


@dataclass
class FilterState:
    """QoI ensemble (N, H_q): state columns first, then any constant parameters."""

    ensemble: np.ndarray
    rng: np.random.Generator
    step: int = 0
    params: LlvmParams | None = None


@dataclass(frozen=True)
class EnllvmConfig:
    m_latent: int
    variant: Variant = Variant.PPCA
    em_opts: EmOptions = field(default_factory=EmOptions)
    inflation: bool = True
    warm_start: bool = False
    # fit on the per-coordinate standardised joint ensemble; isotropic PPCA
    # noise otherwise tracks the largest-scale observable
    standardize: bool = True


@dataclass(frozen=True)
class CycleDiagnostics:
    alpha: float
    alpha_raw: float
    weight_entropy: float
    posterior_mean: np.ndarray
    posterior_cov_diag: np.ndarray
    diverged: bool = False
    em_iter: int = 0
    posterior: GaussianMixture | None = field(default=None, repr=False)


def _propagate(state: FilterState, sys: dyn.DynSystem, dt_model: float, n_steps: int) -> np.ndarray:
    ens = state.ensemble
    x = dyn.integrate(sys, ens[:, : sys.dim], dt_model, n_steps)
    if sys.process_noise_std > 0:
        x = x + sys.process_noise_std * state.rng.standard_normal(x.shape)
    return np.hstack([x, ens[:, sys.dim :]])


def enllvm_cycle(
    state: FilterState,
    sys: dyn.DynSystem,
    meas: dyn.MeasModel,
    d_obs,
    cfg: EnllvmConfig,
    dt_model: float,
    n_steps: int,
) -> tuple[FilterState, CycleDiagnostics]:
    """Propagate, fit the latent model on [q; d], inflate, condition and resample."""
    d_obs = np.asarray(d_obs, dtype=float)
    if d_obs.shape != (meas.obs_dim,):
        raise ValueError(f"d_obs must have length {meas.obs_dim}")
    rng = state.rng
    q = _propagate(state, sys, dt_model, n_steps)
    # predicted observables carry a noise draw so only samples of h are needed
    d = dyn.measure(meas, q[:, : sys.dim], rng)
    joint = JointEnsemble.stack(q, d)
    scale = None
    if cfg.standardize:
        scale = joint.samples.std(axis=0)
        scale[scale <= 0] = 1.0
        joint = JointEnsemble(joint.samples / scale, joint.h_q, joint.h_d)
        d_obs = d_obs / scale[joint.h_q :]
    # everything up to the rescale below lives in standardised coordinates
    init = state.params if cfg.warm_start else None
    params = fit_llvm(joint, cfg.m_latent, cfg.variant, cfg.em_opts, seed=rng, init=init)

    if cfg.inflation:
        infl = inflate_noise(params, d_obs)
        alpha, alpha_raw = infl.alpha, infl.alpha_raw
    else:
        alpha, alpha_raw = 1.0, float("nan")
    post = condition_mixture(params, latent_posteriors(params, joint.samples), d_obs, alpha)
    if scale is not None:
        post = post.rescaled(scale[: joint.h_q])
    new = sample_mixture(post, len(q), rng)
    mean, cov = mixture_moments(post)
    diag = CycleDiagnostics(
        alpha=alpha,
        alpha_raw=alpha_raw,
        weight_entropy=post.effective_components(),
        posterior_mean=mean,
        posterior_cov_diag=np.diag(cov).copy(),
        diverged=post.diverged,
        em_iter=params.info.n_iter if params.info else 0,
        posterior=post,
    )
    return FilterState(new, rng, state.step + 1, params), diag


def enkf_cycle(
    state: FilterState,
    sys: dyn.DynSystem,
    meas: dyn.MeasModel,
    d_obs,
    dt_model: float,
    n_steps: int,
) -> FilterState:
    """Stochastic EnKF with perturbed observations and ensemble-estimated gain."""
    d_obs = np.asarray(d_obs, dtype=float)
    if d_obs.shape != (meas.obs_dim,):
        raise ValueError(f"d_obs must have length {meas.obs_dim}")
    rng = state.rng
    q = _propagate(state, sys, dt_model, n_steps)
    y = dyn.measure(meas, q[:, : sys.dim])
    n = len(q)
    A = q - q.mean(axis=0)
    B = y - y.mean(axis=0)
    C_qd = A.T @ B / (n - 1)
    C_dd = B.T @ B / (n - 1) + np.diag(meas.noise_var)
    perturbed = d_obs + rng.standard_normal(y.shape) * np.sqrt(meas.noise_var)
    K = np.linalg.solve(C_dd, C_qd.T).T
    q = q + (perturbed - y) @ K.T
    return FilterState(q, rng, state.step + 1, None)


@dataclass(frozen=True)
class TrialResult:
    scenario: str
    filter: str
    seed: int
    rmse_mean: float
    rmse_series: np.ndarray
    posterior_means: np.ndarray
    times: np.ndarray
    alphas: np.ndarray
    eff_components: np.ndarray
    failed: bool = False
    failed_cycle: int | None = None
    truth: np.ndarray | None = field(default=None, repr=False)
    diagnostics: tuple = field(default=(), repr=False)


def build_models(cfg: BenchConfig):
    """Return ``(truth_system, filter_system, measurement_model)``."""
    if cfg.system == "lorenz63":
        truth = model = dyn.lorenz63()
    else:
        truth = dyn.lorenz96(cfg.truth_forcing)
        model = dyn.lorenz96(cfg.model_forcing)
    meas = dyn.MEASUREMENTS[cfg.measurement](noise_var=cfg.obs_noise_var)
    return truth, model, meas


def sample_prior(cfg: BenchConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.system == "lorenz63":
        comp = rng.integers(0, 2, size=n)
        return L63_PRIOR_MEANS[comp] + np.sqrt(L63_PRIOR_VAR) * rng.standard_normal((n, 3))
    return rng.standard_normal((n, 40))


def trial_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (twin, filter) generators; the twin stream ignores the filter type."""
    twin_ss, filt_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(twin_ss), np.random.default_rng(filt_ss)


def run_trial(cfg: BenchConfig, seed: int, keep_diagnostics: bool = False) -> TrialResult:
    """Twin experiment: truth from the prior, filter from an independent prior draw."""
    truth_sys, model_sys, meas = build_models(cfg)
    twin_rng, filt_rng = trial_streams(seed)
    x0 = sample_prior(cfg, 1, twin_rng)[0]
    twin = dyn.generate_twin(truth_sys, meas, x0, cfg.dt_model, cfg.dt_obs, cfg.n_cycles, twin_rng)
    n_steps = dyn.steps_per_interval(cfg.dt_model, cfg.dt_obs)

    state = FilterState(sample_prior(cfg, cfg.n_ensemble, filt_rng), filt_rng)
    ecfg = None
    if cfg.filter != "enkf":
        ecfg = EnllvmConfig(
            m_latent=cfg.m_latent,
            variant=Variant.FA if cfg.filter == "enfa" else Variant.PPCA,
            em_opts=EmOptions(tol=cfg.em_tol, max_iter=cfg.em_max_iter),
            inflation=cfg.inflation,
            warm_start=cfg.warm_start,
            standardize=cfg.standardize,
        )

    n_c = cfg.n_cycles
    means = np.full((n_c, model_sys.dim), np.nan)
    alphas = np.ones(n_c)
    eff = np.full(n_c, float(cfg.n_ensemble))
    diags = []
    failed_cycle = None
    for c in range(n_c):
        d_obs = twin.observations[c]
        try:
            if ecfg is None:
                state = enkf_cycle(state, model_sys, meas, d_obs, cfg.dt_model, n_steps)
                means[c] = state.ensemble[:, : model_sys.dim].mean(axis=0)
            else:
                state, diag = enllvm_cycle(state, model_sys, meas, d_obs, ecfg, cfg.dt_model, n_steps)
                means[c] = diag.posterior_mean[: model_sys.dim]
                alphas[c] = diag.alpha
                eff[c] = diag.weight_entropy
                if keep_diagnostics:
                    diags.append(diag)
            if not np.all(np.isfinite(state.ensemble)):
                raise dyn.DivergenceError("non-finite ensemble")
        except (dyn.DivergenceError, np.linalg.LinAlgError, ValueError, FloatingPointError):
            failed_cycle = c
            break

    err = means - twin.truth
    rmse = np.sqrt(np.mean(err * err, axis=1))
    failed = failed_cycle is not None
    return TrialResult(
        scenario=cfg.scenario_id,
        filter=cfg.filter,
        seed=seed,
        rmse_mean=float("nan") if failed else float(rmse.mean()),
        rmse_series=rmse,
        posterior_means=means,
        times=twin.times,
        alphas=alphas,
        eff_components=eff,
        failed=failed,
        failed_cycle=failed_cycle,
        truth=twin.truth,
        diagnostics=tuple(diags),
    )
