"""Differentiable mixed-radix FFT on real-valued torch tensors.

Complex numbers are carried as ``(re, im)`` pairs so autograd sees only
real arithmetic.  Even lengths recurse with a radix-2 decimation-in-time
butterfly; odd lengths fall back to a direct DFT matrix product.
"""

from __future__ import annotations

import functools

import numpy as np
import torch


@functools.lru_cache(maxsize=256)
def _twiddles(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(n // 2)
    ang = -2.0 * np.pi * k / n
    return np.cos(ang), np.sin(ang)


@functools.lru_cache(maxsize=256)
def _dft_matrix(n: int) -> tuple[np.ndarray, np.ndarray]:
    jk = np.outer(np.arange(n), np.arange(n)) % n  # reduce before scaling keeps angles exact
    ang = -2.0 * np.pi * jk / n
    return np.cos(ang), np.sin(ang)


def _const(a: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(a, dtype=like.dtype, device=like.device)


def fft_pair(re: torch.Tensor, im: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Complex DFT along the last axis: ``X[k] = sum_j x[j] exp(-2 pi i jk / n)``."""
    n = re.shape[-1]
    if n == 1:
        return re, im
    if n % 2:
        c, s = _dft_matrix(n)
        c, s = _const(c, re), _const(s, re)
        # (re + i im)(c + i s)
        return re @ c - im @ s, re @ s + im @ c
    er, ei = fft_pair(re[..., 0::2], im[..., 0::2])
    orr, oi = fft_pair(re[..., 1::2], im[..., 1::2])
    c, s = _twiddles(n)
    c, s = _const(c, re), _const(s, re)
    tr = orr * c - oi * s
    ti = orr * s + oi * c
    return torch.cat([er + tr, er - tr], dim=-1), torch.cat([ei + ti, ei - ti], dim=-1)


def rfft(x: torch.Tensor, dim: int = -1) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-negative-frequency half spectrum (``n // 2 + 1`` bins) of a real signal."""
    x = x.movedim(dim, -1)
    n = x.shape[-1]
    re, im = fft_pair(x, torch.zeros_like(x))
    m = n // 2 + 1
    return re[..., :m].movedim(-1, dim), im[..., :m].movedim(-1, dim)


def magnitude(re: torch.Tensor, im: torch.Tensor, eps: float = 1e-20) -> torch.Tensor:
    """``|re + i im|`` with a zero (not NaN) gradient at the origin."""
    p = re * re + im * im
    return torch.where(p > eps, torch.sqrt(p.clamp_min(eps)), torch.zeros_like(p))


def rfft_magnitude(x: torch.Tensor, dim: int = -1, length: int | None = None) -> torch.Tensor:
    """Magnitude spectrum along ``dim``, zero-padded or truncated to ``length`` bins."""
    re, im = rfft(x, dim=dim)
    mag = magnitude(re, im).movedim(dim, -1)
    n = x.shape[dim] if length is None else length
    m = mag.shape[-1]
    if m > n:
        mag = mag[..., :n]
    elif m < n:
        mag = torch.nn.functional.pad(mag, (0, n - m))
    return mag.movedim(-1, dim)
