"""Diagonal state-space kernels: bilinear discretization, kernel materialization,
FFT causal convolution and the sequential recurrence used to check it.

Everything here is plain numpy and operates on a single channel. The batched,
differentiable version used inside the model lives in :mod:`adscribe.encoders`
and follows exactly the same formulas.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

_SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class ContinuousSsm:
    """x'(t) = A x(t) + B u(t), y(t) = D x(t) with diagonal complex A.

    The feed-through term is not stored; layers add the input back through a
    residual connection instead.
    """

    a_diag: np.ndarray
    b: np.ndarray
    d: np.ndarray
    log_step: float

    def __post_init__(self):
        a = np.asarray(self.a_diag, dtype=np.complex128).ravel()
        b = np.asarray(self.b, dtype=np.complex128).ravel()
        d = np.asarray(self.d, dtype=np.complex128).ravel()
        if not (a.shape == b.shape == d.shape) or a.size == 0:
            raise ValueError("a_diag, b and d must be non-empty vectors of equal length")
        # stability: Re(A) <= 0, step in (0, 1]
        a = np.minimum(a.real, 0.0) + 1j * a.imag
        object.__setattr__(self, "a_diag", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "log_step", float(min(self.log_step, 0.0)))

    @property
    def state_dim(self) -> int:
        return self.a_diag.size

    @property
    def step(self) -> float:
        return float(np.exp(self.log_step))


@dataclass(frozen=True)
class DiscreteSsm:
    a_bar: np.ndarray
    b_bar: np.ndarray
    d_bar: np.ndarray

    @property
    def state_dim(self) -> int:
        return np.size(self.a_bar)


@dataclass(frozen=True)
class KernelBank:
    taps: np.ndarray

    @property
    def length(self) -> int:
        return self.taps.size


def init_ssm(state_dim: int = 16, rng: np.random.Generator | None = None) -> ContinuousSsm:
    """Linear imaginary ladder for A, flat B and D, log-uniform step in [1e-3, 1e-1]."""
    rng = np.random.default_rng() if rng is None else rng
    r = np.arange(state_dim)
    a = -0.5 + 1j * np.pi * r
    b = np.ones(state_dim, dtype=np.complex128) / np.sqrt(state_dim)
    d = np.ones(state_dim, dtype=np.complex128) / np.sqrt(state_dim)
    log_step = rng.uniform(np.log(1e-3), np.log(1e-1))
    return ContinuousSsm(a, b, d, log_step)


def discretize(ssm: ContinuousSsm) -> DiscreteSsm:
    step = ssm.step
    half = step * ssm.a_diag / 2
    denom = 1.0 - half
    if np.any(np.abs(denom) < _SINGULAR_TOL):
        raise ValueError("bilinear transform is singular for this step size")
    return DiscreteSsm(a_bar=(1.0 + half) / denom, b_bar=step * ssm.b / denom, d_bar=ssm.d.copy())


def materialize_kernel(dssm: DiscreteSsm, length: int) -> KernelBank:
    """Taps K[i] = Re(sum_r D_r A_r^i B_r) for i < length.

    Powers come from a cumulative product over the time axis, so the state
    matrix is never multiplied out L-1 times.
    """
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    a_bar = np.atleast_1d(dssm.a_bar)
    steps = np.empty((length, a_bar.size), dtype=np.complex128)
    steps[0] = 1.0
    steps[1:] = a_bar
    powers = np.cumprod(steps, axis=0)
    taps = powers @ (np.atleast_1d(dssm.d_bar) * np.atleast_1d(dssm.b_bar))
    return KernelBank(taps=np.ascontiguousarray(taps.real))


def causal_convolve(kernel: KernelBank, u: np.ndarray) -> np.ndarray:
    """y[k] = sum_{i<=k} K[i] u[k-i] through a zero-padded length-2L FFT."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size != kernel.length:
        raise ValueError(f"input length {u.shape} does not match kernel length {kernel.length}")
    n = 2 * u.size
    spectrum = np.fft.rfft(kernel.taps, n) * np.fft.rfft(u, n)
    return np.fft.irfft(spectrum, n)[: u.size]


def recurrent_scan(dssm: DiscreteSsm, u: np.ndarray) -> np.ndarray:
    """Sequential x_k = A x_{k-1} + B u_k, y_k = Re(D x_k), starting from x_{-1} = 0."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size < 1:
        raise ValueError("recurrent_scan expects a non-empty 1-D input")
    a_bar = np.atleast_1d(dssm.a_bar)
    b_bar = np.atleast_1d(dssm.b_bar)
    d_bar = np.atleast_1d(dssm.d_bar)
    x = np.zeros(a_bar.size, dtype=np.complex128)
    y = np.empty(u.size)
    for k, uk in enumerate(u):
        x = a_bar * x + b_bar * uk
        y[k] = np.dot(d_bar, x).real
    return y


def random_stable_ssm(state_dim: int, rng: np.random.Generator) -> ContinuousSsm:
    """Random stable continuous system, used by property checks and the benchmark."""
    a = -rng.uniform(0.05, 1.0, state_dim) + 1j * rng.uniform(-np.pi * state_dim, np.pi * state_dim, state_dim)
    b = rng.normal(size=state_dim) + 1j * rng.normal(size=state_dim)
    d = rng.normal(size=state_dim) + 1j * rng.normal(size=state_dim)
    return ContinuousSsm(a, b, d, rng.uniform(np.log(1e-3), np.log(1e-1)))


def relative_error(y: np.ndarray, reference: np.ndarray) -> float:
    return float(np.max(np.abs(y - reference)) / (np.max(np.abs(reference)) + 1e-12))


def kernel_bench(length: int, state_dim: int, trials: int = 3, seed: int = 0) -> dict:
    """Time the FFT path against the recurrence on one random stable system.

    Returns microseconds per call (best of ``trials``) and the max relative error.
    """
    rng = np.random.default_rng(seed)
    dssm = discretize(random_stable_ssm(state_dim, rng))
    u = rng.normal(size=length)

    def best_of(fn):
        best = np.inf
        out = None
        for _ in range(max(trials, 1)):
            t0 = time.perf_counter()
            out = fn()
            best = min(best, time.perf_counter() - t0)
        return out, best * 1e6

    y_fft, fft_us = best_of(lambda: causal_convolve(materialize_kernel(dssm, length), u))
    y_rec, rec_us = best_of(lambda: recurrent_scan(dssm, u))
    return {"L": length, "fft_us": fft_us, "recurrence_us": rec_us, "max_rel_err": relative_error(y_fft, y_rec)}


def format_bench_table(rows: list[dict]) -> str:
    lines = [f"{'L':>8} {'fft_us':>12} {'recurrence_us':>14} {'max_rel_err':>12}"]
    for row in rows:
        lines.append(f"{row['L']:>8d} {row['fft_us']:>12.1f} {row['recurrence_us']:>14.1f} {row['max_rel_err']:>12.3e}")
    return "\n".join(lines)
