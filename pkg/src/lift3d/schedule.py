"""Variance-preserving noise schedule over discrete timesteps.

Follows the scaled-linear beta schedule used by public latent-diffusion
checkpoints: beta ramps from 8.5e-4 to 1.2e-2 in sqrt-space over ``t_max``
steps.  Entry t=0 is the clean limit (signal 1, noise 0); timesteps 1..t_max
are the trained noise levels.  signal_t^2 + noise_t^2 = 1 at every step and
the log signal-to-noise ratio decreases strictly with t.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


class NoiseSchedule:
    def __init__(self, t_max: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        if t_max < 1:
            raise ValidationError("t_max must be >= 1")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValidationError("need 0 < beta_start <= beta_end < 1")
        self.t_max = int(t_max)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        ramp = np.linspace(beta_start**0.5, beta_end**0.5, t_max, dtype=np.float64) ** 2
        signal_sq = np.concatenate([[1.0], np.cumprod(1.0 - ramp)])  # index 0..t_max
        self._alpha = np.sqrt(signal_sq)
        self._sigma = np.sqrt(1.0 - signal_sq)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.t_max:
            raise ValidationError(f"timestep {t} outside [0, {self.t_max}]")
        return t

    def alpha(self, t: int) -> float:
        """Signal coefficient at step t."""
        return float(self._alpha[self._check_t(t)])

    def sigma(self, t: int) -> float:
        """Noise coefficient at step t."""
        return float(self._sigma[self._check_t(t)])

    def log_snr(self, t: int) -> float:
        """lambda_t = log(alpha_t^2 / sigma_t^2); +inf at t=0."""
        t = self._check_t(t)
        if t == 0:
            return float("inf")
        return float(2.0 * (np.log(self._alpha[t]) - np.log(self._sigma[t])))

    def weight(self, t: int, mode: str = "sigma2") -> float:
        """Per-timestep weight w(t) for the prior gradient."""
        if mode == "sigma2":
            return self.sigma(t) ** 2
        if mode == "one":
            return 1.0
        raise ValidationError(f"unknown weight mode {mode!r}")

    def add_noise(self, x0, t: int, eps):
        """Forward noising x_t = alpha_t * x0 + sigma_t * eps (exact)."""
        t = self._check_t(t)
        if getattr(x0, "shape", None) != getattr(eps, "shape", None):
            raise ValidationError(
                f"shape mismatch: x0 {getattr(x0, 'shape', None)} vs eps {getattr(eps, 'shape', None)}"
            )
        return self._alpha[t] * x0 + self._sigma[t] * eps


def add_noise(schedule: NoiseSchedule, x0, t: int, eps):
    return schedule.add_noise(x0, t, eps)
