"""Noise schedule, forward corruption, reverse samplers, guidance.

The schedule is the cosine form alpha_bar(t) = f(t)/f(0) with
f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2). Two reverse steps are provided:
the eta-parameterized step that re-estimates the previous noise from the
predicted clean volume, and the ancestral step built on the posterior mean
and variance of the forward chain. Default mode is ancestral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, rng, volume

BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s_offset: float
    alpha_bar: np.ndarray  # [0..T], alpha_bar[0] = 1
    beta: np.ndarray  # [0..T], beta[0] unused
    signal_coeff: np.ndarray  # sqrt(alpha_bar)
    noise_coeff: np.ndarray  # sqrt(1 - alpha_bar)


@dataclass(frozen=True)
class GuidanceSpec:
    scale: float = 1.0
    enabled: bool = False

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")


def cosine_schedule(T: int, s_offset: float = 0.008) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s_offset) / (1.0 + s_offset) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    beta = np.minimum(beta, BETA_MAX)
    return NoiseSchedule(
        T=T,
        s_offset=s_offset,
        alpha_bar=alpha_bar,
        beta=beta,
        signal_coeff=np.sqrt(alpha_bar),
        noise_coeff=np.sqrt(1.0 - alpha_bar),
    )


def forward_corrupt(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    return sched.signal_coeff[t] * x0 + sched.noise_coeff[t] * eps


def cfg_combine(l_uncond: np.ndarray, l_cond: np.ndarray, g: GuidanceSpec) -> np.ndarray:
    """l = l_uncond + s * (l_cond - l_uncond)."""
    if l_uncond.shape != l_cond.shape:
        raise ValueError("cfg_combine: shape mismatch")
    return l_uncond + g.scale * (l_cond - l_uncond)


def logits_to_signal(logits: np.ndarray) -> np.ndarray:
    """Predicted clean volume in [-1,1]: tanh(l/2), the affine image of the
    sigmoid probability used by the losses (tanh(l/2) = 2*sigmoid(l) - 1)."""
    return np.tanh(logits / 2.0)


def ddim_step(
    x_t: np.ndarray, x0_hat: np.ndarray, t: int, eta: float, sched: NoiseSchedule, z: np.ndarray | None
) -> np.ndarray:
    """Eta-parameterized reverse step from the predicted clean volume."""
    if t < 1:
        raise ValueError("ddim_step requires t >= 1")
    eps_hat = (x_t - sched.signal_coeff[t] * x0_hat) / sched.noise_coeff[t]
    mu = sched.signal_coeff[t - 1] * x0_hat + sched.noise_coeff[t - 1] * eps_hat
    if t == 1 or eta == 0.0 or z is None:
        return mu
    return mu + eta * sched.noise_coeff[t - 1] * z


def ancestral_step(
    x_t: np.ndarray, x0_hat: np.ndarray, t: int, sched: NoiseSchedule, z: np.ndarray | None
) -> np.ndarray:
    """Posterior-mean reverse step of the forward chain."""
    if t < 1:
        raise ValueError("ancestral_step requires t >= 1")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    beta_t = sched.beta[t]
    alpha_t = ab_t / ab_prev
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mu = c0 * x0_hat + ct * x_t
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    if t == 1 or z is None:
        return mu
    return mu + np.sqrt(var) * z


def reverse_step(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    mode: str,
    eta: float,
    z: np.ndarray | None,
) -> np.ndarray:
    if mode == "ddim":
        return ddim_step(x_t, x0_hat, t, eta, sched, z)
    if mode == "ancestral":
        return ancestral_step(x_t, x0_hat, t, sched, z)
    raise ValueError(f"unknown sampler mode {mode!r}")


def predict_x0(model, x_t: np.ndarray, t: int, phi: float, s2_feats, guidance: GuidanceSpec) -> np.ndarray:
    """Model logits -> guided logits -> clean-volume estimate in [-1,1]."""
    l_cond = model.forward(x_t, t, phi, s2_feats=s2_feats, drop_condition=False)
    if guidance.enabled and guidance.scale != 1.0:
        l_uncond = model.forward(x_t, t, phi, s2_feats=s2_feats, drop_condition=True)
        logits = cfg_combine(l_uncond, l_cond, guidance)
    else:
        logits = l_cond
    return logits_to_signal(logits)


def sample(
    model,
    phi: float,
    sched: NoiseSchedule,
    seed: int,
    mode: str = "ancestral",
    eta: float = 1.0,
    guidance: GuidanceSpec = GuidanceSpec(),
    s2_feats=None,
    return_field: bool = False,
):
    """Full reverse loop on the model's native volume shape, then Otsu
    binarization. Noise is keyed by (seed, tag, t) so a single-tile tiled run
    reproduces this sampler bit for bit."""
    dims = (model.config.input_size,) * 3
    x = rng.normal_field(seed, "init", sched.T, dims)
    for t in range(sched.T, 0, -1):
        x0_hat = predict_x0(model, x, t, phi, s2_feats, guidance)
        z = rng.normal_field(seed, "step", t, dims) if t > 1 else None
        x = reverse_step(x, x0_hat, t, sched, mode, eta, z)
    binary, _ = metrics.otsu_threshold(x)
    if return_field:
        return binary, x
    return binary
