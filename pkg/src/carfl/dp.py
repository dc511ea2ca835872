"""Client-side differential privacy on parameter updates.

A client's update difference is clipped to norm ``C`` and perturbed with
Gaussian noise of per-coordinate variance ``sigma0_sq + sigma1_sq * |delta|^2``.
In adaptive mode ``C`` follows an exponential moving average of the observed
update norms and the noise variance is recomputed from it every round.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from carfl.rng import Stream

DP_MODES = ("off", "fixed", "adaptive")


class DpConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DpConfig:
    mode: str = "off"
    c0: float = 1.0
    sigma0: float = 0.1
    beta: float = 0.1
    gamma: float = 0.9
    z: float = 0.1
    warmup_rounds: int = 0
    per_iteration: bool = False

    def __post_init__(self):
        if self.mode not in DP_MODES:
            raise DpConfigError(f"dp.mode must be one of {DP_MODES}, got {self.mode!r}")
        if self.warmup_rounds < 0:
            raise DpConfigError("dp.warmup_rounds must be >= 0")
        if self.mode == "off":
            return
        if self.c0 <= 0:
            raise DpConfigError("dp.c0 must be positive")
        if self.mode == "fixed" and self.sigma0 < 0:
            raise DpConfigError("dp.sigma0 must be >= 0")
        if self.mode == "adaptive":
            if not 0.0 < self.beta <= 1.0:
                raise DpConfigError("dp.beta must lie in (0, 1] for adaptive clipping")
            if self.gamma <= 0 or self.z <= 0:
                raise DpConfigError("dp.gamma and dp.z must be positive")


@dataclass(frozen=True)
class DpState:
    C: float
    sigma0_sq: float
    sigma1_sq: float
    z_delta: float = 0.0
    sigma_b: float = 0.0


def noise_multiplier_delta(z: float, m: int) -> tuple[float, float]:
    """``(z_delta, sigma_b)`` with ``sigma_b = m / 20``.

    ``z_delta = (z^-2 - (2 sigma_b)^-2)^-1/2`` only exists for ``z < m / 10``.
    """
    sigma_b = m / 20.0
    if not z < 2.0 * sigma_b:
        raise DpConfigError(
            f"adaptive DP needs z < 2*sigma_b = m/10 = {2.0 * sigma_b:g} (got z={z:g}, m={m})"
        )
    return (z ** -2 - (2.0 * sigma_b) ** -2) ** -0.5, sigma_b


def init_dp(cfg: DpConfig, m: int) -> DpState:
    if cfg.mode == "off":
        return DpState(C=cfg.c0, sigma0_sq=0.0, sigma1_sq=0.0)
    if cfg.mode == "fixed":
        return DpState(C=cfg.c0, sigma0_sq=cfg.sigma0 ** 2 * cfg.c0 ** 2, sigma1_sq=0.0)
    z_delta, sigma_b = noise_multiplier_delta(cfg.z, m)
    return DpState(
        C=cfg.c0,
        sigma0_sq=2.0 * z_delta ** 2 * (1.0 - cfg.beta) ** 2 * cfg.c0 ** 2,
        sigma1_sq=2.0 * z_delta ** 2 * cfg.beta ** 2 * cfg.gamma ** 2,
        z_delta=z_delta,
        sigma_b=sigma_b,
    )


def flat_norm(tensors: Sequence[np.ndarray]) -> float:
    """L2 norm of all tensors concatenated into one vector."""
    return float(np.sqrt(sum(float(np.sum(t * t)) for t in tensors)))


def clip_update(delta: Sequence[np.ndarray], C: float) -> list[np.ndarray]:
    """Scale ``delta`` by ``min(1, C / |delta|)``; a zero update is returned as is."""
    if C <= 0:
        raise ValueError("clip threshold must be positive")
    norm = flat_norm(delta)
    if norm <= C:
        return [np.array(d, dtype=np.float64) for d in delta]
    scale = C / norm
    return [d * scale for d in delta]


def noise_variance(state: DpState, delta_norm_sq: float) -> float:
    return state.sigma0_sq + state.sigma1_sq * delta_norm_sq


def sample_noise(shapes: Sequence[tuple], state: DpState, delta_norm_sq: float,
                 rng: Stream) -> list[np.ndarray]:
    """Gaussian noise tensors with the calibrated per-coordinate variance.

    Tensors are filled in the given order from one normal draw, so the
    result depends only on the shapes and the stream position.
    """
    var = noise_variance(state, delta_norm_sq)
    if var < 0:
        raise ValueError("noise variance must be >= 0")
    sizes = [int(np.prod(s)) for s in shapes]
    if var == 0.0:
        return [np.zeros(s) for s in shapes]
    flat = np.sqrt(var) * rng.normal(sum(sizes))
    out, start = [], 0
    for shape, size in zip(shapes, sizes):
        out.append(flat[start:start + size].reshape(shape))
        start += size
    return out


def dp_transform(theta_prev: Sequence[np.ndarray], delta: Sequence[np.ndarray],
                 state: DpState, cfg: DpConfig, rng: Stream) -> tuple[list[np.ndarray], bool]:
    """``theta_prev + clip(delta) + noise``; returns the tensors and whether clipping fired."""
    if len(theta_prev) != len(delta) or any(
        p.shape != d.shape for p, d in zip(theta_prev, delta)
    ):
        raise ValueError("parameter and update shapes disagree")
    if cfg.mode == "off":
        return [p + d for p, d in zip(theta_prev, delta)], False
    norm_sq = flat_norm(delta) ** 2
    clipped = clip_update(delta, state.C)
    noise = sample_noise([d.shape for d in delta], state, norm_sq, rng)
    out = [p + c + e for p, c, e in zip(theta_prev, clipped, noise)]
    return out, bool(np.sqrt(norm_sq) > state.C)


def adapt_threshold(state: DpState, cfg: DpConfig, delta_norm: float) -> DpState:
    """One step of ``C <- (1 - beta) C + beta * gamma * |delta|`` with a noise refresh."""
    if cfg.mode != "adaptive":
        raise RuntimeError(f"adapt_threshold called with dp.mode={cfg.mode!r}")
    C = (1.0 - cfg.beta) * state.C + cfg.beta * cfg.gamma * delta_norm
    sigma0_sq = 2.0 * state.z_delta ** 2 * (1.0 - cfg.beta) ** 2 * C ** 2
    return replace(state, C=C, sigma0_sq=sigma0_sq)


def dp_active(cfg: DpConfig, round_index: int) -> bool:
    return cfg.mode != "off" and round_index >= cfg.warmup_rounds
