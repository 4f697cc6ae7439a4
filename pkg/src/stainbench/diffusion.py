"""Diffusion machinery: noise schedules and forward samples, deterministic
implicit steps, two-model latent-bridge translation, consistency-model
parametrization and training, and the Brownian-bridge process between paired
images (forward sample, training target, reverse sampler).

Everything here works in the signed [-1, 1] pixel domain; conversion happens
at this module's boundary and nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import NonFiniteError, ScheduleError, ShapeMismatchError, StainbenchError
from .imaging import ImageTensor

# DenoiserFn contract: callable(x, t, condition) -> array of x's shape.
DenoiserFn = Callable[[np.ndarray, float, np.ndarray | None], np.ndarray]


def to_signed(image: ImageTensor) -> np.ndarray:
    """[0,1] pixels -> [-1,1] working domain."""
    return image.data * 2.0 - 1.0


def from_signed(arr: np.ndarray) -> ImageTensor:
    """[-1,1] working domain -> clipped [0,1] pixels."""
    return ImageTensor(np.clip((np.asarray(arr) + 1.0) / 2.0, 0.0, 1.0))


# --- DDPM / DDIM ---

@dataclass(frozen=True)
class AlphaSchedule:
    T: int
    betas: np.ndarray        # (T,) per-step variances in (0,1)
    alpha_bars: np.ndarray   # (T+1,) cumulative products, alpha_bars[0] = 1

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if self.T < 1 or betas.shape != (self.T,) or bars.shape != (self.T + 1,):
            raise ScheduleError(f"inconsistent schedule arrays for T={self.T}")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        if bars[0] != 1.0 or np.any(bars <= 0) or np.any(bars > 1):
            raise ScheduleError("alpha_bars must start at 1 and stay in (0, 1]")
        if np.any(np.diff(bars) >= 0):
            raise ScheduleError("alpha_bars must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", bars)


def linear_beta_schedule(T: int, beta_min: float, beta_max: float) -> AlphaSchedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return AlphaSchedule(T, betas, alpha_bars)


def ddpm_forward_sample(x0: np.ndarray, t: int, schedule: AlphaSchedule,
                        noise: np.ndarray) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, for 1 <= t <= T."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeMismatchError(f"x0 {x0.shape} vs noise {noise.shape}")
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"t={t} outside 1..{schedule.T}")
    abar = schedule.alpha_bars[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def _ddim_jump(x: np.ndarray, t_from: int, t_to: int, eps_hat: np.ndarray,
               schedule: AlphaSchedule) -> np.ndarray:
    """Deterministic implicit move between arbitrary schedule times."""
    abar_f = schedule.alpha_bars[t_from]
    abar_t = schedule.alpha_bars[t_to]
    x0_hat = (x - np.sqrt(1.0 - abar_f) * eps_hat) / np.sqrt(abar_f)
    return np.sqrt(abar_t) * x0_hat + np.sqrt(1.0 - abar_t) * eps_hat


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
              schedule: AlphaSchedule) -> np.ndarray:
    """Deterministic (eta=0) reverse step from t to t_prev <= t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatchError(f"x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    if not (0 <= t_prev <= t <= schedule.T) or t < 1:
        raise ScheduleError(f"need 1 <= t <= T and 0 <= t_prev <= t, got t={t}, t_prev={t_prev}")
    if t_prev == t:
        return x_t.copy()
    return _ddim_jump(x_t, t, t_prev, eps_hat, schedule)


def _check_model_output(pred: np.ndarray, shape: tuple) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != shape:
        raise ShapeMismatchError(f"model output {pred.shape}, expected {shape}")
    if not np.all(np.isfinite(pred)):
        raise NonFiniteError("model produced non-finite output")
    return pred


def uniform_stride_times(T: int, steps: int) -> list[int]:
    """steps+1 strictly increasing integer times from 0 to T."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must lie in 1..T, got steps={steps}, T={T}")
    return [round(i * T / steps) for i in range(steps + 1)]


def ddib_translate(x_src: np.ndarray, model_src: DenoiserFn, model_tgt: DenoiserFn,
                   schedule: AlphaSchedule, steps: int) -> np.ndarray:
    """Encode source to the shared latent with its own model (reverse-time
    implicit walk), then decode with the target-domain model. Deterministic."""
    x = np.asarray(x_src, dtype=np.float64).copy()
    times = uniform_stride_times(schedule.T, steps)
    for k in range(steps):                      # encode: 0 -> T
        eps = _check_model_output(model_src(x, times[k], None), x.shape)
        x = _ddim_jump(x, times[k], times[k + 1], eps, schedule)
    for k in range(steps, 0, -1):               # decode: T -> 0
        eps = _check_model_output(model_tgt(x, times[k], None), x.shape)
        x = _ddim_jump(x, times[k], times[k - 1], eps, schedule)
    return x


# --- consistency models ---

@dataclass(frozen=True)
class CmConfig:
    sigma_min: float = 0.002
    sigma_max: float = 10.0
    sigma_data: float = 0.5
    rho: float = 7.0
    n_sigmas: int = 18

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ScheduleError("need 0 < sigma_min < sigma_max")
        if self.n_sigmas < 2:
            raise ScheduleError("n_sigmas must be >= 2")


def karras_sigmas(config: CmConfig) -> np.ndarray:
    """Descending rho-spaced noise grid from sigma_max to sigma_min."""
    n, rho = config.n_sigmas, config.rho
    hi = config.sigma_max ** (1.0 / rho)
    lo = config.sigma_min ** (1.0 / rho)
    ramp = np.arange(n) / (n - 1)
    return (hi + ramp * (lo - hi)) ** rho


def cm_scalings(sigma: float, config: CmConfig) -> tuple[float, float]:
    """(c_skip, c_out) with the boundary c_skip(sigma_min)=1, c_out(sigma_min)=0."""
    sd = config.sigma_data
    d = sigma - config.sigma_min
    c_skip = sd ** 2 / (d ** 2 + sd ** 2)
    c_out = d * sd / np.sqrt(sigma ** 2 + sd ** 2)
    return float(c_skip), float(c_out)


def cm_apply(x, sigma: float, raw, config: CmConfig = CmConfig()):
    """c_skip(sigma) * x + c_out(sigma) * raw; exact identity at sigma_min.

    Accepts arrays or autodiff Vars (training differentiates through raw).
    """
    if sigma < config.sigma_min:
        raise ScheduleError(f"sigma={sigma} below sigma_min={config.sigma_min}")
    c_skip, c_out = cm_scalings(sigma, config)
    if isinstance(x, Var) or isinstance(raw, Var):
        x = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
        raw = raw if isinstance(raw, Var) else Var(np.asarray(raw, dtype=np.float64))
        return ad.add(ad.mul(x, c_skip), ad.mul(raw, c_out))
    return c_skip * np.asarray(x, dtype=np.float64) + c_out * np.asarray(raw, dtype=np.float64)


def _require_adjacent(sigma_a: float, sigma_b: float, config: CmConfig) -> None:
    grid = karras_sigmas(config)
    for i in range(len(grid) - 1):
        if abs(grid[i] - sigma_a) <= 1e-9 * max(1.0, grid[i]) and \
           abs(grid[i + 1] - sigma_b) <= 1e-9 * max(1.0, grid[i + 1]):
            return
    raise ScheduleError(
        f"(sigma_a={sigma_a}, sigma_b={sigma_b}) is not an adjacent pair of the configured grid"
    )


def cm_training_step(x0: np.ndarray, condition: np.ndarray | None,
                     sigmas: tuple[float, float], model, ema_model,
                     config: CmConfig = CmConfig(), noise: np.ndarray | None = None,
                     rng: np.random.Generator | None = None,
                     check_grid: bool = True):
    """Consistency loss between adjacent noise levels on one trajectory.

    The online model is evaluated at sigma_a, the frozen EMA model at
    sigma_b < sigma_a on the same trajectory point pair; the loss is their
    mean squared difference after the skip/out parametrization.
    """
    sigma_a, sigma_b = float(sigmas[0]), float(sigmas[1])
    if not sigma_a >= sigma_b >= config.sigma_min:
        raise ScheduleError(f"need sigma_a >= sigma_b >= sigma_min, got {sigmas}")
    # equal sigmas are the degenerate identity case; adjacency applies otherwise
    if check_grid and sigma_a > sigma_b:
        _require_adjacent(sigma_a, sigma_b, config)
    x0 = np.asarray(x0, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise StainbenchError("cm_training_step needs explicit noise or an rng")
        noise = rng.standard_normal(x0.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ShapeMismatchError(f"noise {noise.shape} vs x0 {x0.shape}")

    x_a = x0 + sigma_a * noise
    x_b = x0 + sigma_b * noise
    online = cm_apply(x_a, sigma_a, model(x_a, sigma_a, condition), config)
    with ad.no_grad():
        ema_raw = ema_model(x_b, sigma_b, condition)
        ema_raw = ema_raw.value if isinstance(ema_raw, Var) else ema_raw
    target = cm_apply(x_b, sigma_b, np.asarray(ema_raw, dtype=np.float64), config)
    if isinstance(online, Var):
        diff = ad.add(online, ad.mul(Var(target), -1.0))
        return ad.mean(ad.mul(diff, diff))
    return float(((online - target) ** 2).mean())


def cm_sample_single_step(source: np.ndarray, model, config: CmConfig,
                          seed: int) -> np.ndarray:
    """One-shot sampling: start at pure noise at sigma_max, apply the model once."""
    source = np.asarray(source, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = config.sigma_max * rng.standard_normal(source.shape)
    raw = model(x, config.sigma_max, source)
    raw = raw.value if isinstance(raw, Var) else np.asarray(raw, dtype=np.float64)
    out = cm_apply(x, config.sigma_max, raw, config)
    return out if isinstance(out, np.ndarray) else out.value


# --- Brownian bridge ---

@dataclass(frozen=True)
class BridgeSchedule:
    T: int
    s: float
    m: np.ndarray       # (T+1,), m_t = t/T
    delta: np.ndarray   # (T+1,), delta_t = 2 s (m_t - m_t^2)

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        if self.T < 1 or m.shape != (self.T + 1,) or delta.shape != (self.T + 1,):
            raise ScheduleError(f"inconsistent bridge arrays for T={self.T}")
        if m[0] != 0.0 or m[-1] != 1.0:
            raise ScheduleError("bridge mixing must run from 0 to 1")
        if delta[0] != 0.0 or delta[-1] != 0.0:
            raise ScheduleError("bridge variance must vanish at both endpoints")
        if self.T > 1 and np.any(delta[1:-1] <= 0):
            raise ScheduleError("bridge variance must be positive at interior steps")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "delta", delta)


def bridge_schedule(T: int, s: float = 1.0) -> BridgeSchedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if s <= 0:
        raise ScheduleError("variance scale s must be positive")
    m = np.arange(T + 1, dtype=np.float64) / T
    delta = 2.0 * s * (m - m ** 2)
    delta[0] = 0.0
    delta[T] = 0.0
    return BridgeSchedule(T, s, m, delta)


def _bridge_check(x0: np.ndarray, xT: np.ndarray, t: int, schedule: BridgeSchedule,
                  noise: np.ndarray) -> None:
    if x0.shape != xT.shape or x0.shape != noise.shape:
        raise ShapeMismatchError(
            f"shapes differ: x0 {x0.shape}, xT {xT.shape}, noise {noise.shape}"
        )
    if not 0 <= t <= schedule.T:
        raise ScheduleError(f"t={t} outside 0..{schedule.T}")


def bbdm_forward_sample(x0_target: np.ndarray, xT_source: np.ndarray, t: int,
                        schedule: BridgeSchedule, noise: np.ndarray) -> np.ndarray:
    """(1 - m_t) x0 + m_t xT + sqrt(delta_t) noise; endpoints are returned
    exactly (no zero-scaled noise term is ever added)."""
    x0 = np.asarray(x0_target, dtype=np.float64)
    xT = np.asarray(xT_source, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _bridge_check(x0, xT, t, schedule, noise)
    if t == 0:
        return x0.copy()
    if t == schedule.T:
        return xT.copy()
    m_t = schedule.m[t]
    return (1.0 - m_t) * x0 + m_t * xT + np.sqrt(schedule.delta[t]) * noise


def bbdm_training_target(x0_target: np.ndarray, xT_source: np.ndarray, t: int,
                         schedule: BridgeSchedule, noise: np.ndarray) -> np.ndarray:
    """m_t (xT - x0) + sqrt(delta_t) noise: the drift-plus-noise the denoiser
    must predict; x_t minus this target reconstructs x0 identically."""
    x0 = np.asarray(x0_target, dtype=np.float64)
    xT = np.asarray(xT_source, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _bridge_check(x0, xT, t, schedule, noise)
    if t == 0:
        return np.zeros_like(x0)
    m_t = schedule.m[t]
    drift = m_t * (xT - x0)
    if t == schedule.T:
        return drift
    return drift + np.sqrt(schedule.delta[t]) * noise


def bbdm_sample(xT_source: np.ndarray, model: DenoiserFn, schedule: BridgeSchedule,
                steps: int, seed: int) -> np.ndarray:
    """Reverse bridge sampler.

    At each visited time the one-shot clean estimate is x0_hat = x_t - model
    prediction; the transition to the next time re-noises x0_hat through the
    forward bridge marginal, so an exact model reproduces the forward
    marginals step by step. Fully deterministic for a fixed seed.
    """
    x = np.asarray(xT_source, dtype=np.float64).copy()
    xT = x.copy()
    times = uniform_stride_times(schedule.T, steps)
    rng = np.random.default_rng(seed)
    for k in range(steps, 0, -1):
        t, t_next = times[k], times[k - 1]
        pred = _check_model_output(model(x, t, xT), x.shape)
        x0_hat = x - pred
        if t_next == 0:
            x = x0_hat
        else:
            noise = rng.standard_normal(x.shape)
            x = bbdm_forward_sample(x0_hat, xT, t_next, schedule, noise)
    return x
