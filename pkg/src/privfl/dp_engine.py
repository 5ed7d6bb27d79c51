"""Record-level differential privacy primitives for federated rounds.

Each hospital clips per-record gradients to an L2 bound, sums them, and adds
Gaussian noise with variance (noise_multiplier * clip_norm)**2 / hospitals
per coordinate before dividing by the realized batch size. Summing the K
hospitals' contributions therefore carries total noise variance
(noise_multiplier * clip_norm)**2, the effective-noise identity the variance
tests pin down. A closed-form calibration path computes the per-hospital
variance directly from a target (epsilon, delta) instead of a multiplier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError
from .model_core import ModelParams, PerSampleGradient

_NORM_SLACK = 1e-9

CALIBRATION_MODES = ("multiplier", "per-round")


@dataclass(frozen=True)
class DpConfig:
    """Privacy and optimization knobs for one training run.

    Attributes:
        sampling_prob: Poisson inclusion probability q for each record.
        noise_multiplier: Noise scale sigma relative to the clip norm.
            Zero disables noise; only the degenerate diagnostic reductions
            use that, and the accountant rejects it.
        clip_norm: L2 bound C enforced on every per-record gradient.
        learning_rate: Step size eta.
        momentum: Momentum coefficient beta in [0, 1).
        max_rounds: Upper bound T on global rounds.
        epsilon: Target privacy budget; training halts before exceeding it.
        delta: DP failure probability.
        hospitals: Number of participating hospitals K. The protocol is
            meant for K >= 2; K = 1 is the degenerate centralized case used
            by the central-DP baseline and the reduction tests.
        calibration: "multiplier" (noise from sigma, budget tracked by the
            accountant) or "per-round" (noise variance from the closed-form
            calibration for a fixed per-round epsilon).
    """

    sampling_prob: float = 0.3
    noise_multiplier: float = 1.0
    clip_norm: float = 1.0
    learning_rate: float = 0.1
    momentum: float = 0.9
    max_rounds: int = 100
    epsilon: float = 3.0
    delta: float = 1e-4
    hospitals: int = 10
    calibration: str = "multiplier"

    def __post_init__(self):
        if not 0.0 < self.sampling_prob <= 1.0:
            raise ValueError("sampling_prob must lie in (0, 1]")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.hospitals < 1:
            raise ValueError("hospitals must be >= 1")
        if self.calibration not in CALIBRATION_MODES:
            raise ValueError(f"calibration must be one of {CALIBRATION_MODES}")


@dataclass(frozen=True)
class MomentumState:
    """Exponentially accumulated gradient buffer, one per hospital."""

    buffer: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.buffer.setflags(write=False)

    @classmethod
    def zeros(cls, dim: int) -> "MomentumState":
        return cls(buffer=np.zeros(dim), step=0)


def clip_gradient(g: PerSampleGradient, clip_norm: float) -> PerSampleGradient:
    """Scale g down to L2 norm clip_norm if it exceeds it; identity otherwise."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    if not np.all(np.isfinite(g.values)):
        raise ValueError("gradient has non-finite entries")
    norm = np.linalg.norm(g.values)
    if norm <= clip_norm:
        return g
    return PerSampleGradient(values=g.values * (clip_norm / norm))


def noisy_average(
    clipped,
    noise_multiplier: float,
    clip_norm: float,
    hospitals: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noisy mean of clipped per-record gradients.

    Adds N(0, (noise_multiplier * clip_norm)**2 / hospitals) per coordinate
    to the SUM of the clipped gradients, then divides by the realized batch
    size, so the noise each hospital injects is one K-th share of the total.

    Raises:
        EmptyBatchError: if `clipped` is empty; the caller chooses the policy.
    """
    if len(clipped) == 0:
        raise EmptyBatchError("no records sampled this round")
    if noise_multiplier < 0 or not clip_norm > 0 or hospitals < 1:
        raise ValueError("need noise_multiplier >= 0, clip_norm > 0, hospitals >= 1")
    dim = len(clipped[0].values)
    total = np.zeros(dim)
    for g in clipped:
        if len(g.values) != dim:
            raise ValueError("gradients disagree on parameter count")
        if np.linalg.norm(g.values) > clip_norm + _NORM_SLACK:
            raise ValueError("gradient exceeds the clip norm; clip before averaging")
        total += g.values
    total += noise_share(dim, noise_multiplier, clip_norm, hospitals, rng)
    return total / len(clipped)


def noise_share(
    dim: int,
    noise_multiplier: float,
    clip_norm: float,
    hospitals: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One hospital's noise contribution: N(0, (sigma*C)**2 / K) per coordinate.

    Also used directly when a Poisson batch comes back empty and the hospital
    contributes pure noise as if the batch size were one.
    """
    std = noise_multiplier * clip_norm / math.sqrt(hospitals)
    return rng.normal(0.0, std, size=dim) if std > 0 else np.zeros(dim)


def noisy_average_calibrated(
    clipped,
    epsilon_round: float,
    delta_round: float,
    clip_norm: float,
    hospitals: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noisy mean with per-hospital variance from the closed-form calibration.

    The variance applies to the averaged gradient directly, so the noise is
    drawn after dividing by the realized batch size.
    """
    if len(clipped) == 0:
        raise EmptyBatchError("no records sampled this round")
    var = calibrated_noise_variance(
        epsilon_round, delta_round, clip_norm, len(clipped), hospitals
    )
    dim = len(clipped[0].values)
    total = np.zeros(dim)
    for g in clipped:
        if np.linalg.norm(g.values) > clip_norm + _NORM_SLACK:
            raise ValueError("gradient exceeds the clip norm; clip before averaging")
        total += g.values
    return total / len(clipped) + rng.normal(0.0, math.sqrt(var), size=dim)


def momentum_step(state: MomentumState, avg_gradient: np.ndarray, momentum: float) -> MomentumState:
    """buffer <- avg_gradient + momentum * buffer (zero-initialized buffer)."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if avg_gradient.shape != state.buffer.shape:
        raise ValueError("gradient length does not match the momentum buffer")
    return MomentumState(buffer=avg_gradient + momentum * state.buffer, step=state.step + 1)


def sgd_update(params: ModelParams, state: MomentumState, learning_rate: float) -> ModelParams:
    """params <- params - learning_rate * buffer."""
    if state.buffer.shape != params.values.shape:
        raise ValueError("momentum buffer length does not match the model")
    return params.with_values(params.values - learning_rate * state.buffer)


def calibrated_noise_variance(
    epsilon: float, delta: float, clip_norm: float, batch_size: int, hospitals: int
) -> float:
    """Per-hospital Gaussian variance 2 ln(1.25/delta) C^2 / (eps^2 m^2 K).

    This is the closed-form calibration for one round: each hospital's noise
    on its averaged gradient, sized so the K-hospital aggregate meets the
    per-round (epsilon, delta) guarantee.
    """
    if not epsilon > 0 or not clip_norm > 0 or batch_size < 1 or hospitals < 1:
        raise ValueError("epsilon, clip_norm must be positive; counts >= 1")
    if not 0.0 < delta < 1.25:
        raise ValueError("delta must lie in (0, 1.25) for the closed form")
    return (
        2.0 * math.log(1.25 / delta) * clip_norm**2
        / (epsilon**2 * batch_size**2 * hospitals)
    )


def gaussian_mechanism_variance(epsilon: float, delta: float, l2_sensitivity: float) -> float:
    """Classic Gaussian-mechanism variance 2 ln(1.25/delta) s^2 / eps^2."""
    if not epsilon > 0 or not l2_sensitivity > 0:
        raise ValueError("epsilon and l2_sensitivity must be positive")
    if not 0.0 < delta < 1.25:
        raise ValueError("delta must lie in (0, 1.25) for the closed form")
    return 2.0 * math.log(1.25 / delta) * l2_sensitivity**2 / epsilon**2


def hospital_view_epsilon(epsilon: float, hospitals: int) -> float:
    """Bound seen by a hospital that can subtract its own noise share.

    With K independent shares, removing one leaves (K-1)/K of the variance,
    weakening the guarantee to epsilon * sqrt(K / (K-1)).
    """
    if hospitals < 2:
        raise ValueError("the hospital-view bound needs at least two hospitals")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return epsilon * math.sqrt(hospitals / (hospitals - 1))
