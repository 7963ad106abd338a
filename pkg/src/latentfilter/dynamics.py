"""Lorenz 63 / Lorenz 96 systems, RK4 integration, measurement models and
twin-experiment data generation.

State arrays may carry leading batch axes; drifts and measurement maps act
on the last axis so a whole ensemble is advanced in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit


class DivergenceError(RuntimeError):
    def __init__(self, message: str, cycle: int | None = None):
        super().__init__(message)
        self.cycle = cycle


@dataclass(frozen=True)
class DynSystem:
    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    name: str = ""
    # additive Gaussian process noise std applied once per assimilation interval
    process_noise_std: float = 0.0
    # optional compiled ``(x, dt, n_steps) -> x`` equivalent of repeated rk4_step
    stepper: Callable | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class MeasModel:
    obs_dim: int
    h: Callable[[np.ndarray], np.ndarray]
    noise_var: np.ndarray
    name: str = ""

    def __post_init__(self):
        nv = np.broadcast_to(np.asarray(self.noise_var, dtype=float), (self.obs_dim,)).copy()
        if np.any(nv < 0):
            raise ValueError("noise variances must be non-negative")
        object.__setattr__(self, "noise_var", nv)


@dataclass(frozen=True)
class TwinRun:
    """Truth and noisy observations at the assimilation times ``times``."""

    truth: np.ndarray
    observations: np.ndarray
    times: np.ndarray
    dt_model: float
    dt_obs: float
    x0: np.ndarray


def lorenz63_drift(x, c=10.0, b=8.0 / 3.0, r=28.0):
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([c * (x2 - x1), -x1 * x3 + r * x1 - x2, x1 * x2 - b * x3], axis=-1)


def lorenz96_drift(x, F=8.0):
    x = np.asarray(x, dtype=float)
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F


@njit(cache=True)
def _l63_f(x, c, b, r, out):
    out[0] = c * (x[1] - x[0])
    out[1] = -x[0] * x[2] + r * x[0] - x[1]
    out[2] = x[0] * x[1] - b * x[2]


@njit(cache=True)
def _l96_f(x, F, out):
    n = x.shape[0]
    out[0] = (x[1] - x[n - 2]) * x[n - 1] - x[0] + F
    out[1] = (x[2] - x[n - 1]) * x[0] - x[1] + F
    for j in range(2, n - 1):
        out[j] = (x[j + 1] - x[j - 2]) * x[j - 1] - x[j] + F
    out[n - 1] = (x[0] - x[n - 3]) * x[n - 2] - x[n - 1] + F


@njit(cache=True)
def _rk4_combine(x, k1, k2, k3, k4, tmp, dt, stage):
    d = x.shape[0]
    if stage == 0:
        for j in range(d):
            tmp[j] = x[j] + 0.5 * dt * k1[j]
    elif stage == 1:
        for j in range(d):
            tmp[j] = x[j] + 0.5 * dt * k2[j]
    elif stage == 2:
        for j in range(d):
            tmp[j] = x[j] + dt * k3[j]
    else:
        for j in range(d):
            x[j] += (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])


@njit(cache=True)
def _rk4_l63(X, dt, n_steps, c, b, r):
    out = X.copy()
    k1 = np.empty(3); k2 = np.empty(3); k3 = np.empty(3); k4 = np.empty(3); tmp = np.empty(3)
    for i in range(out.shape[0]):
        x = out[i]
        for _ in range(n_steps):
            _l63_f(x, c, b, r, k1)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 0)
            _l63_f(tmp, c, b, r, k2)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 1)
            _l63_f(tmp, c, b, r, k3)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 2)
            _l63_f(tmp, c, b, r, k4)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 3)
    return out


@njit(cache=True)
def _rk4_l96(X, dt, n_steps, F):
    out = X.copy()
    d = out.shape[1]
    k1 = np.empty(d); k2 = np.empty(d); k3 = np.empty(d); k4 = np.empty(d); tmp = np.empty(d)
    for i in range(out.shape[0]):
        x = out[i]
        for _ in range(n_steps):
            _l96_f(x, F, k1)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 0)
            _l96_f(tmp, F, k2)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 1)
            _l96_f(tmp, F, k3)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 2)
            _l96_f(tmp, F, k4)
            _rk4_combine(x, k1, k2, k3, k4, tmp, dt, 3)
    return out


def _batched(kernel, dim, *args):
    def step(x, dt, n_steps):
        x = np.asarray(x, dtype=float)
        flat = np.ascontiguousarray(x.reshape(-1, dim))
        return kernel(flat, float(dt), int(n_steps), *args).reshape(x.shape)
    return step


def lorenz63(c=10.0, b=8.0 / 3.0, r=28.0) -> DynSystem:
    return DynSystem(3, lambda x: lorenz63_drift(x, c, b, r), {"c": c, "b": b, "r": r}, "lorenz63",
                     stepper=_batched(_rk4_l63, 3, float(c), float(b), float(r)))


def lorenz96(F=8.0, dim=40) -> DynSystem:
    return DynSystem(dim, lambda x: lorenz96_drift(x, F), {"F": F}, "lorenz96",
                     stepper=_batched(_rk4_l96, dim, float(F)))


def rk4_step(sys: DynSystem, x, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = sys.drift
    x = np.asarray(x, dtype=float)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite state after RK4 step")
    return out


def integrate(sys: DynSystem, x, dt: float, n_steps: int) -> np.ndarray:
    """``n_steps`` RK4 steps; uses the compiled stepper when the system has one."""
    if sys.stepper is None:
        for _ in range(n_steps):
            x = rk4_step(sys, x, dt)
        return x
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = sys.stepper(x, dt, n_steps)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite state after integration")
    return out


def steps_per_interval(dt_model: float, dt_obs: float) -> int:
    ratio = dt_obs / dt_model
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"dt_obs={dt_obs} is not an integer multiple of dt_model={dt_model}")
    return k


def measure(model: MeasModel, x, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``h``; add diagonal Gaussian noise when ``rng`` is given."""
    d = model.h(np.asarray(x, dtype=float))
    if rng is not None:
        d = d + rng.standard_normal(d.shape) * np.sqrt(model.noise_var)
    return d


def l63_range(noise_var=1.0) -> MeasModel:
    return MeasModel(1, lambda x: np.sqrt(np.sum(x * x, axis=-1, keepdims=True)), noise_var, "l63_range")


def l96_linear(dim=40, noise_var=1.0) -> MeasModel:
    return MeasModel(dim // 2, lambda x: x[..., 0::2], noise_var, "l96_linear")


def l96_nl1(dim=40, noise_var=1.0) -> MeasModel:
    return MeasModel(dim // 2, lambda x: x[..., 0::2] * x[..., 1::2], noise_var, "l96_nl1")


def l96_nl2(dim=40, noise_var=1.0) -> MeasModel:
    return MeasModel(dim // 2, lambda x: x[..., 0::2] ** 2, noise_var, "l96_nl2")


MEASUREMENTS = {
    "l63_range": l63_range,
    "l96_linear": l96_linear,
    "l96_nl1": l96_nl1,
    "l96_nl2": l96_nl2,
}


def generate_twin(
    sys_truth: DynSystem,
    meas: MeasModel,
    x0,
    dt_model: float,
    dt_obs: float,
    n_cycles: int,
    rng: np.random.Generator,
) -> TwinRun:
    k = steps_per_interval(dt_model, dt_obs)
    x = np.array(x0, dtype=float)
    truth = np.empty((n_cycles, sys_truth.dim))
    obs = np.empty((n_cycles, meas.obs_dim))
    for c in range(n_cycles):
        try:
            x = integrate(sys_truth, x, dt_model, k)
        except DivergenceError as exc:
            raise DivergenceError(f"truth diverged in cycle {c}", cycle=c) from exc
        if sys_truth.process_noise_std > 0:
            x = x + sys_truth.process_noise_std * rng.standard_normal(x.shape)
        truth[c] = x
        obs[c] = measure(meas, x, rng)
    times = dt_obs * np.arange(1, n_cycles + 1)
    return TwinRun(truth, obs, times, dt_model, dt_obs, np.array(x0, dtype=float))
