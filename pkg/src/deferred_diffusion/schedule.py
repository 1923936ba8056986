"""Discrete DDPM noise schedules with v-parameterization helpers.

Steps are 1-based: ``tau = 1 .. N``.  ``alpha_bars[tau - 1]`` is the cumulative
product of the per-step ``alphas`` up to and including ``tau``.  All array
helpers accept numpy arrays or torch tensors; coefficients are plain floats
(or broadcastable arrays when ``tau`` is a batch of steps).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "rescale_zero_snr",
    "add_noise",
    "compute_v",
    "v_to_x0_eps",
    "ddpm_step",
    "sampling_timesteps",
    "save_schedule_text",
    "load_schedule_text",
]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        if a.ndim != 1 or a.shape != ab.shape or a.size == 0:
            raise ScheduleError("alphas and alpha_bars must be equal-length 1-D arrays")
        if np.any(a < 0) or np.any(a > 1) or np.any(ab < 0) or np.any(ab > 1):
            raise ScheduleError("schedule values must lie in [0, 1]")
        a.setflags(write=False)
        ab.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "alpha_bars", ab)

    @classmethod
    def from_alphas(cls, alphas) -> "NoiseSchedule":
        a = np.asarray(alphas, dtype=np.float64)
        return cls(a, np.cumprod(a))

    @property
    def num_steps(self) -> int:
        return int(self.alphas.size)

    @property
    def sqrt_alpha_bars(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars)

    @property
    def sqrt_one_minus_alpha_bars(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars)

    @property
    def has_zero_terminal_snr(self) -> bool:
        return bool(self.alpha_bars[-1] == 0.0)

    def alpha_bar(self, tau):
        """ᾱ at 1-based step(s) ``tau``; ``tau = 0`` maps to 1 (clean data)."""
        t = np.asarray(tau)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ScheduleError(f"step {tau} outside [0, {self.num_steps}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t]
        return float(out) if out.ndim == 0 else out

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return np.array_equal(self.alphas, other.alphas) and np.array_equal(
            self.alpha_bars, other.alpha_bars
        )

    __hash__ = None


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    """Linear-beta DDPM schedule, ``alpha = 1 - beta``."""
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if num_steps < 1:
        raise ScheduleError("num_steps must be >= 1")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ScheduleError("need 0 <= beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return NoiseSchedule.from_alphas(1.0 - betas)


def rescale_zero_snr(s: NoiseSchedule) -> NoiseSchedule:
    """Shift and scale sqrt(ᾱ) so the last step carries no signal.

    The first step keeps its value; the last becomes exactly zero.
    """
    sq = s.sqrt_alpha_bars
    first, last = sq[0], sq[-1]
    if first == last:
        raise ScheduleError("degenerate schedule: sqrt(alpha_bar) is constant")
    if last == 0.0:
        return s
    sq_new = (sq - last) * first / (first - last)
    sq_new[0] = first
    ab = sq_new**2
    alphas = np.empty_like(ab)
    alphas[0] = ab[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        alphas[1:] = np.where(ab[:-1] > 0, ab[1:] / ab[:-1], 0.0)
    return NoiseSchedule(alphas, ab)


def _coefs(s: NoiseSchedule, tau, like):
    """sqrt(ᾱ), sqrt(1-ᾱ) for ``tau``; arrays are shaped to broadcast over ``like``'s trailing dims."""
    t = np.asarray(tau)
    if t.size and (np.any(t < 1) or np.any(t > s.num_steps)):
        raise ScheduleError(f"step {tau} outside [1, {s.num_steps}]")
    ab = np.asarray(s.alpha_bars[t - 1])
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if ab.ndim == 0:
        return float(a), float(b)
    shape = ab.shape + (1,) * (like.ndim - ab.ndim)
    a, b = a.reshape(shape), b.reshape(shape)
    if not isinstance(like, np.ndarray):
        import torch

        a = torch.as_tensor(a, dtype=like.dtype, device=like.device)
        b = torch.as_tensor(b, dtype=like.dtype, device=like.device)
    return a, b


def _check_shapes(*arrays):
    shapes = {tuple(x.shape) for x in arrays}
    if len(shapes) != 1:
        raise ScheduleError(f"shape mismatch: {sorted(shapes)}")


def add_noise(x0, eps, tau, s: NoiseSchedule):
    """x_tau = sqrt(ᾱ) x0 + sqrt(1-ᾱ) eps."""
    _check_shapes(x0, eps)
    a, b = _coefs(s, tau, x0)
    return a * x0 + b * eps


def compute_v(x0, eps, tau, s: NoiseSchedule):
    """v = sqrt(ᾱ) eps - sqrt(1-ᾱ) x0."""
    _check_shapes(x0, eps)
    a, b = _coefs(s, tau, x0)
    return a * eps - b * x0


def v_to_x0_eps(x_tau, v, tau, s: NoiseSchedule):
    """Invert the (x0, eps) -> (x_tau, v) rotation."""
    _check_shapes(x_tau, v)
    a, b = _coefs(s, tau, x_tau)
    return a * x_tau - b * v, b * x_tau + a * v


def _clamp(x):
    return np.clip(x, -1.0, 1.0) if isinstance(x, np.ndarray) else x.clamp(-1.0, 1.0)


def _normal_like(x, rng):
    if isinstance(x, np.ndarray):
        return rng.standard_normal(x.shape)
    import torch

    return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)


def ddpm_step(x_tau, v_pred, tau: int, s: NoiseSchedule, rng, tau_prev: int | None = None):
    """One ancestral step from ``tau`` to ``tau_prev`` (default ``tau - 1``).

    ``rng`` is a ``numpy.random.Generator`` for numpy inputs or a
    ``torch.Generator`` for tensors.  Skipping steps uses the effective
    per-jump alpha ``ᾱ_tau / ᾱ_prev``.  Landing on step 0 returns the
    clamped x0 estimate with no noise.
    """
    tau = int(tau)
    tau_prev = tau - 1 if tau_prev is None else int(tau_prev)
    if not 0 <= tau_prev < tau <= s.num_steps:
        raise ScheduleError(f"invalid step pair ({tau} -> {tau_prev})")
    x0_hat, _ = v_to_x0_eps(x_tau, v_pred, tau, s)
    x0_hat = _clamp(x0_hat)
    if tau_prev == 0:
        return x0_hat
    ab_t = s.alpha_bar(tau)
    ab_p = s.alpha_bar(tau_prev)
    alpha_eff = ab_t / ab_p
    beta_eff = 1.0 - alpha_eff
    denom = 1.0 - ab_t
    if denom == 0.0:
        return x0_hat
    c_x0 = float(np.sqrt(ab_p) * beta_eff / denom)
    c_xt = float(np.sqrt(alpha_eff) * (1.0 - ab_p) / denom)
    std = float(np.sqrt((1.0 - ab_p) / denom * beta_eff))
    mean = c_x0 * x0_hat + c_xt * x_tau
    return mean + std * _normal_like(x_tau, rng)


def sampling_timesteps(s: NoiseSchedule, num_inference_steps: int) -> list[int]:
    """Descending, uniformly spaced steps from N down to 1 (both included)."""
    n = min(int(num_inference_steps), s.num_steps)
    if n < 1:
        raise ScheduleError("need at least one sampling step")
    steps = np.round(np.linspace(s.num_steps, 1, n)).astype(int)
    return [int(t) for t in dict.fromkeys(steps.tolist())]


def save_schedule_text(s: NoiseSchedule, path) -> None:
    """Write ``step alpha alpha_bar`` per line (repr precision, round-trips exactly)."""
    lines = ["# step alpha alpha_bar"]
    for i, (a, ab) in enumerate(zip(s.alphas, s.alpha_bars), start=1):
        lines.append(f"{i} {float(a)!r} {float(ab)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_schedule_text(path) -> NoiseSchedule:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        step, a, ab = line.split()
        if int(step) != len(rows) + 1:
            raise ScheduleError(f"schedule dump out of order at step {step}")
        rows.append((float(a), float(ab)))
    if not rows:
        raise ScheduleError("empty schedule dump")
    arr = np.array(rows)
    return NoiseSchedule(arr[:, 0], arr[:, 1])
