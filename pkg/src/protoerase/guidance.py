"""Diffusion side: schedule, analytic denoiser, guidance, reverse sampling.

The denoiser is exact rather than learned. For a conditional data
distribution N(mu, s^2 I) under the forward process
z_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps, the noised marginal is
N(sqrt(abar_t) mu, (1 - abar_t + abar_t s^2) I) and the ideal
epsilon-prediction has the closed form

    eps_hat = sqrt(1-abar_t) (z - sqrt(abar_t) mu) / (1 - abar_t + abar_t s^2)

which equals -sqrt(1-abar_t) * grad log p_t(z). Every downstream stage can
therefore be checked against an independent score oracle.

Guidance combines predictions as

    eps~ = eps_u + alpha (eps_c - eps_u) - beta (eps_p - eps_u)

with the beta term omitted entirely when no negative prototype is given.

Two reverse updates are provided: the ancestral DDPM form (with sigma_t =
sqrt(beta_t) when stochastic, else 0) and a deterministic DDIM
x0-reprojection step. The pipeline default is the deterministic DDPM form:
with the analytic near-point conditional target, the noise-injecting chain
diverges at guidance scale 7.5 (late steps amplify deviations ~3-5x), while
the deterministic chain is contractive. The stochastic chain remains the
right tool at alpha <= 1, where it reproduces the target moments exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidConfigError, StepUnderflowError
from .semworld import Prompt, World

DDPM = "ddpm"
DDIM = "ddim"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def abar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])

    def abar_prev(self, t: int) -> float:
        return float(self.alpha_bars[t - 2]) if t >= 2 else 1.0


def make_schedule(T: int, stochastic: bool) -> NoiseSchedule:
    """Rescaled linear-beta schedule over T steps.

    beta_t runs linearly over [1e-4, 0.02] * (1000/T). The 0 < alpha_t < 1
    invariant is enforced (the rescaling breaks it for 2 <= T <= 20);
    abar_T <= 0.05 is expected for practical T and warned about otherwise.
    """
    if T < 1:
        raise InvalidConfigError("T must be >= 1")
    scale = 1000.0 / T
    betas = np.linspace(1e-4 * scale, 0.02 * scale, T)
    alphas = 1.0 - betas
    if np.any(alphas <= 0.0) or np.any(alphas >= 1.0):
        raise InvalidConfigError(
            f"rescaled schedule leaves alpha_t outside (0, 1) for T={T}"
        )
    alpha_bars = np.cumprod(alphas)
    if alpha_bars[-1] > 0.05:
        warnings.warn(
            f"abar_T={alpha_bars[-1]:.3g} > 0.05; start of chain is far from pure noise",
            stacklevel=2,
        )
    sigmas = np.sqrt(betas) if stochastic else np.zeros(T)
    for a in (betas, alphas, alpha_bars, sigmas):
        a.setflags(write=False)
    return NoiseSchedule(T=T, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)


@dataclass(frozen=True)
class Condition:
    """A conditioning signal resolved to its joint embedding and target mean.

    summary lives in R^d; mu_hat = A @ summary in R^D is the mean of the
    conditional data distribution N(mu_hat, data_std^2 I). prior_std is the
    unconditional data std carried along so sampling needs no world handle.
    """

    summary: np.ndarray
    mu_hat: np.ndarray
    data_std: float
    prior_std: float

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.summary)) and np.all(np.isfinite(self.mu_hat))):
            raise InvalidConfigError("condition must resolve to finite vectors")


def condition_from_prompt(world: World, prompt: Prompt) -> Condition:
    from .encoders import encode_prompt

    summary = encode_prompt(world, prompt)
    return _condition(world, summary)


def condition_from_soft(world: World, sp) -> Condition:
    from .encoders import text_encoder

    summary = text_encoder(world).encode(sp)
    return _condition(world, summary)


def condition_from_summary(world: World, summary: np.ndarray) -> Condition:
    return _condition(world, np.asarray(summary, dtype=np.float64))


def _condition(world: World, summary: np.ndarray) -> Condition:
    return Condition(
        summary=summary,
        mu_hat=world.A @ summary,
        data_std=world.config.sigma_data,
        prior_std=world.config.sigma_uncond,
    )


@dataclass(frozen=True)
class GuidanceConfig:
    alpha: float = 7.5
    beta: float = 7.5
    tau: float = 0.55
    T: int = 30
    stochastic: bool = False
    sampler: str = DDPM

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise InvalidConfigError("alpha and beta must be >= 0")
        if not -1.0 <= self.tau <= 1.0:
            raise InvalidConfigError("tau must lie in [-1, 1]")
        if self.T < 1:
            raise InvalidConfigError("T must be >= 1")
        if self.sampler not in (DDPM, DDIM):
            raise InvalidConfigError(f"unknown sampler {self.sampler!r}")

    def with_beta(self, beta: float) -> "GuidanceConfig":
        return replace(self, beta=beta)


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    t: int

    def __post_init__(self) -> None:
        if self.t < 0:
            raise InvalidConfigError("t must be >= 0")
        if not np.all(np.isfinite(self.z)):
            raise InvalidConfigError("latent must be finite")


def _eps_hat(z: np.ndarray, abar: float, mu: np.ndarray | float, std: float) -> np.ndarray:
    s2 = 1.0 - abar + abar * std * std
    return np.sqrt(1.0 - abar) * (z - np.sqrt(abar) * mu) / s2


def denoise_cond(state: LatentState, cond: Condition, schedule: NoiseSchedule) -> np.ndarray:
    """Exact epsilon-prediction for the condition's Gaussian at step t."""
    if not 1 <= state.t <= schedule.T:
        raise StepUnderflowError(f"t={state.t} outside 1..{schedule.T}")
    return _eps_hat(state.z, schedule.abar(state.t), cond.mu_hat, cond.data_std)


def denoise_uncond(
    state: LatentState, schedule: NoiseSchedule, sigma_uncond: float = 1.0
) -> np.ndarray:
    """Same closed form with zero mean and the unconditional data std."""
    if not 1 <= state.t <= schedule.T:
        raise StepUnderflowError(f"t={state.t} outside 1..{schedule.T}")
    return _eps_hat(state.z, schedule.abar(state.t), 0.0, sigma_uncond)


def combine_guidance(
    eps_u: np.ndarray,
    eps_c: np.ndarray | None,
    eps_p: np.ndarray | None,
    alpha: float,
    beta: float,
) -> np.ndarray:
    """Affine guidance mix with coefficients (1 - alpha + beta, alpha, -beta).

    alpha in {0, 1} short-circuits to the exact unconditional/conditional
    prediction, and the beta term is dropped when eps_p is None.
    """
    if alpha == 0.0 or eps_c is None:
        out = eps_u
    elif alpha == 1.0:
        out = eps_c
    else:
        out = eps_u + alpha * (eps_c - eps_u)
    if eps_p is not None and beta != 0.0:
        out = out - beta * (eps_p - eps_u)
    return out


def guided_epsilon(
    state: LatentState,
    cond: Condition,
    proto: Condition | None,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
) -> np.ndarray:
    sigma_uncond = cond.prior_std
    eps_u = denoise_uncond(state, schedule, sigma_uncond)
    eps_c = denoise_cond(state, cond, schedule) if cfg.alpha != 0.0 else None
    eps_p = (
        denoise_cond(state, proto, schedule)
        if proto is not None and cfg.beta != 0.0
        else None
    )
    return combine_guidance(eps_u, eps_c, eps_p, cfg.alpha, cfg.beta)


def reverse_step(
    state: LatentState, eps: np.ndarray, schedule: NoiseSchedule, noise: np.ndarray
) -> LatentState:
    """Ancestral DDPM update z_{t-1} = (z_t - ((1-a_t)/sqrt(1-abar_t)) eps)/sqrt(a_t) + sigma_t noise."""
    t = state.t
    if t < 1:
        raise StepUnderflowError("reverse_step at t=0")
    a_t = float(schedule.alphas[t - 1])
    abar = schedule.abar(t)
    z = (state.z - (1.0 - a_t) / np.sqrt(1.0 - abar) * eps) / np.sqrt(a_t)
    z = z + float(schedule.sigmas[t - 1]) * noise
    return LatentState(z=z, t=t - 1)


def ddim_step(state: LatentState, eps: np.ndarray, schedule: NoiseSchedule) -> LatentState:
    """Deterministic DDIM update: reproject the x0 estimate to level t-1."""
    t = state.t
    if t < 1:
        raise StepUnderflowError("ddim_step at t=0")
    abar = schedule.abar(t)
    abar_prev = schedule.abar_prev(t)
    x0 = (state.z - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)
    z = np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * eps
    return LatentState(z=z, t=t - 1)


def sample(
    cond: Condition,
    proto: Condition | None,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    seed: int,
) -> np.ndarray:
    """Full reverse rollout from z_T ~ N(0, I); returns x* = z_0.

    The VAE decode is the identity map, so the latent is the image. The
    noise stream is a Philox generator keyed by the seed alone, so outputs
    are bitwise reproducible and independent of scheduling order.
    """
    if cfg.T != schedule.T:
        raise InvalidConfigError(f"cfg.T={cfg.T} != schedule.T={schedule.T}")
    if cfg.sampler == DDPM and cfg.stochastic != bool(np.any(schedule.sigmas > 0)):
        raise InvalidConfigError("cfg.stochastic disagrees with the schedule's sigmas")
    from .rng import stream

    gen = stream(seed)
    D = cond.mu_hat.shape[0]
    state = LatentState(z=gen.standard_normal(D), t=schedule.T)
    drawing = cfg.sampler == DDPM and cfg.stochastic
    for t in range(schedule.T, 0, -1):
        eps = guided_epsilon(state, cond, proto, cfg, schedule)
        if cfg.sampler == DDIM:
            state = ddim_step(state, eps, schedule)
        else:
            noise = gen.standard_normal(D) if drawing else np.zeros(D)
            state = reverse_step(state, eps, schedule, noise)
    return state.z
