"""Forward-noising schedule algebra and the elementary reverse-kernel steps.

The discrete forward process at step t (1-based) is

    x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps,   eps ~ N(0, I)

with alpha_t = 1 - beta_t and alpha_bar_t the running product. The reverse
kernel is a Gaussian whose mean mixes an anchor estimate of the clean sample
with the current state:

    mean = a_t * anchor + c_t * x_t
    a_t  = beta_t * sqrt(alpha_bar_{t-1}) / (1 - alpha_bar_t)
    c_t  = sqrt(alpha_t) * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)

These satisfy a_t + c_t * sqrt(alpha_bar_t) = sqrt(alpha_bar_{t-1}), so an
anchor consistent with x_t reproduces the forward marginal.

All schedule arrays are indexed by t in 0..T where index 0 is a convention
slot: alpha_bar_0 = 1, sigma_0 = 0, betas[0] = nan. That keeps the code
reading like the recurrences above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIANCE_KINDS = ("posterior", "beta")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule plus derived reverse-kernel coefficients.

    Arrays have length T + 1 and are indexed directly by the step t.
    """

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    anchor_coef: np.ndarray   # a_t above: weight on the clean-sample anchor
    carry_coef: np.ndarray    # c_t above: weight on the current noisy state
    variance_kind: str = "posterior"

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas", "anchor_coef", "carry_coef"):
            arr = getattr(self, name)
            if arr.shape != (self.num_steps + 1,):
                raise ValueError(f"{name} must have shape ({self.num_steps + 1},)")


def build_schedule(num_steps=100, beta_min=1e-3, beta_max=0.2, variance_kind="posterior"):
    """Construct a linear-beta schedule with derived reverse coefficients.

    num_steps >= 1; 0 < beta_min <= beta_max < 1. With num_steps == 1 the single
    beta equals beta_min.
    """
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if variance_kind not in VARIANCE_KINDS:
        raise ValueError(f"variance_kind must be one of {VARIANCE_KINDS}")

    betas = np.full(num_steps + 1, np.nan)
    betas[1:] = np.linspace(beta_min, beta_max, num_steps)
    alphas = np.empty_like(betas)
    alphas[0] = 1.0
    alphas[1:] = 1.0 - betas[1:]
    alpha_bars = np.cumprod(alphas)

    one_minus = 1.0 - alpha_bars[1:]
    prev_bars = alpha_bars[:-1]
    anchor = np.zeros(num_steps + 1)
    carry = np.zeros(num_steps + 1)
    anchor[1:] = betas[1:] * np.sqrt(prev_bars) / one_minus
    carry[1:] = np.sqrt(alphas[1:]) * (1.0 - prev_bars) / one_minus

    sigmas = np.zeros(num_steps + 1)
    if variance_kind == "posterior":
        sigmas[1:] = np.sqrt((1.0 - prev_bars) / one_minus * betas[1:])
    else:
        sigmas[1:] = np.sqrt(betas[1:])

    return DiffusionSchedule(
        num_steps=num_steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        anchor_coef=anchor,
        carry_coef=carry,
        variance_kind=variance_kind,
    )


def _check_step(t, sched, lowest=1):
    if np.ndim(t) == 0:
        if not (lowest <= int(t) <= sched.num_steps):
            raise ValueError(f"step t={t} outside [{lowest}, {sched.num_steps}]")
    else:
        t = np.asarray(t)
        if t.min() < lowest or t.max() > sched.num_steps:
            raise ValueError(f"step vector outside [{lowest}, {sched.num_steps}]")


def forward_sample(x0, t, noise, sched):
    """Noise a clean sample to level t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    t may be a scalar or an integer array matching x0's shape without the
    trailing channel axis (per-frame noise levels). t = 0 is the identity.
    """
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    _check_step(t, sched, lowest=0)
    ab = sched.alpha_bars[np.asarray(t)]
    if np.ndim(t) > 0:
        ab = ab[..., None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def predict_x0(x_t, eps_hat, t, sched):
    """Invert the forward map from a noise estimate.

    Accepts scalar t or a per-frame integer array shaped like x_t minus the
    trailing channel axis. Levels with t = 0 return x_t unchanged.
    """
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != x_t shape {x_t.shape}")
    _check_step(t, sched, lowest=0)
    ab = sched.alpha_bars[np.asarray(t)]
    if np.ndim(t) > 0:
        ab = ab[..., None]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def reverse_kernel_mean(anchor, x_t, t, sched):
    """Mean of the reverse kernel: anchor_coef[t] * anchor + carry_coef[t] * x_t."""
    anchor = np.asarray(anchor, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if anchor.shape != x_t.shape:
        raise ValueError(f"anchor shape {anchor.shape} != x_t shape {x_t.shape}")
    _check_step(t, sched)
    t = int(t)
    return sched.anchor_coef[t] * anchor + sched.carry_coef[t] * x_t


def reverse_step(x_t, anchor, t, sched, rng):
    """One stochastic reverse transition x_t -> x_{t-1}.

    Draws a standard normal of x_t's shape whenever sigma_t > 0; at sigma_t = 0
    the output equals the kernel mean exactly and no draw is consumed.
    """
    mean = reverse_kernel_mean(anchor, x_t, t, sched)
    sigma = sched.sigmas[int(t)]
    if sigma > 0.0:
        mean = mean + sigma * rng.standard_normal(mean.shape)
    return mean
