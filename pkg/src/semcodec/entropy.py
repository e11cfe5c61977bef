"""Discretized Laplace entropy model and range-coded symbol layer.

Probabilities are unit-bin integrals of a Laplace density, floored at 2^-16
with a pass-through gradient.  The coding layer quantizes per-element CDFs to
16-bit frequency tables over a +/-64 window around round(mu); values outside
the window cost an escape symbol plus a raw 16-bit payload.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .rangecoder import MAX_TOTAL, RangeCoderError, RangeDecoder, RangeEncoder

SIGMA_MIN = 1e-3
P_MIN = float(2.0 ** -16)

WINDOW = 64
ALPHABET = 2 * WINDOW + 1
ESC_INDEX = ALPHABET
NUM_SYMBOLS = ALPHABET + 1
_FREQ_BUDGET = MAX_TOTAL - NUM_SYMBOLS


class _LowerBound(torch.autograd.Function):
    """clamp_min with a gradient that still pulls values up out of the clamp."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, bound: float):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad_out < 0)
        return grad_out * keep, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round halves away from zero (torch.round rounds halves to even)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


@dataclass(frozen=True)
class DistributionParams:
    """Per-element Laplace location/scale; scale is floored at SIGMA_MIN."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu/sigma shape mismatch")
        if bool((self.sigma < SIGMA_MIN * (1 - 1e-9)).any()):
            raise ValueError(f"sigma below floor {SIGMA_MIN}")

    def numel(self) -> int:
        return self.mu.numel()

    def flat(self) -> "DistributionParams":
        return DistributionParams(self.mu.reshape(-1), self.sigma.reshape(-1))


def scale_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """Map an unconstrained net output to a valid Laplace scale."""
    return torch.nn.functional.softplus(raw) + SIGMA_MIN


def laplace_bin_prob(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """P(x - 0.5 < X <= x + 0.5) for X ~ Laplace(mu, sigma), floored at P_MIN.

    Every exponent is clamped to <= 0 before exp so the unselected branch of
    each `where` stays finite (no inf * 0 = nan in backward) even at the
    sigma floor.
    """
    a = (x - mu) / sigma
    inv = 1.0 / sigma

    # tails: 0.5 * exp((0.5 - |a|)/sigma_units) * (1 - exp(-1/sigma))
    tail_exp = torch.clamp(0.5 * inv - torch.abs(a), max=0.0)
    p_tail = 0.5 * torch.exp(tail_exp) * (-torch.expm1(-inv))

    # straddling the mode: 1 - 0.5 e^{-(a+0.5)/s_u} - 0.5 e^{(a-0.5)/s_u}
    up = torch.clamp(-(a + 0.5 * inv), max=0.0)
    dn = torch.clamp(a - 0.5 * inv, max=0.0)
    p_mid = 1.0 - 0.5 * torch.exp(up) - 0.5 * torch.exp(dn)

    p = torch.where(torch.abs(a) >= 0.5 * inv, p_tail, p_mid)
    return lower_bound(p, P_MIN)


def rate_estimate(values: torch.Tensor, params: DistributionParams) -> torch.Tensor:
    """Total estimated bits: sum of -log2 p over all elements."""
    if values.shape != params.mu.shape:
        raise ValueError("values/params shape mismatch")
    p = laplace_bin_prob(values, params.mu, params.sigma)
    return -torch.log2(p).sum()


def quantize_tensor(
    y: torch.Tensor,
    mode: str,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """`round`: straight-through hard rounding; `noise`: additive U[-0.5, 0.5)."""
    if mode == "round":
        return y + (round_half_away(y) - y).detach()
    if mode == "noise":
        u = torch.empty_like(y).uniform_(-0.5, 0.5, generator=generator)
        return y + u
    raise ValueError(f"unknown quantization mode: {mode!r}")


@dataclass(frozen=True)
class LatentGrid:
    """A (C, h, w) latent tensor tagged with its stream kind."""

    values: torch.Tensor
    kind: str  # "motion" | "context"
    quantized: bool = False

    def __post_init__(self) -> None:
        if self.values.dim() != 3:
            raise ValueError("LatentGrid expects a (C, h, w) tensor")
        if self.kind not in ("motion", "context"):
            raise ValueError(f"unknown latent kind: {self.kind!r}")


def quantize(grid: LatentGrid, mode: str = "round") -> LatentGrid:
    return LatentGrid(quantize_tensor(grid.values, mode), grid.kind, quantized=True)


@dataclass(frozen=True)
class BitChunk:
    """One range-coded payload plus bookkeeping for rate checks."""

    payload: bytes
    symbol_count: int
    estimated_bits: float

    @property
    def bits(self) -> int:
        return 8 * len(self.payload)


def _freq_tables(mu: np.ndarray, sigma: np.ndarray):
    """Quantized per-element frequency tables (float64, deterministic).

    Returns (cum (N, NUM_SYMBOLS+1) int64, mu_q (N,) int64, total (N,) int64).
    """
    mu_t = torch.from_numpy(mu).to(torch.float64)
    sig_t = torch.from_numpy(sigma).to(torch.float64)
    mu_q = round_half_away(mu_t).to(torch.int64)
    offsets = torch.arange(-WINDOW, WINDOW + 1, dtype=torch.float64)
    grid = mu_q.to(torch.float64).unsqueeze(1) + offsets.unsqueeze(0)
    p = laplace_bin_prob(grid, mu_t.unsqueeze(1), sig_t.unsqueeze(1)).numpy()

    freq = 1 + np.floor(p * _FREQ_BUDGET).astype(np.int64)
    freq = np.concatenate([freq, np.ones((freq.shape[0], 1), dtype=np.int64)], axis=1)
    cum = np.zeros((freq.shape[0], NUM_SYMBOLS + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    total = cum[:, -1]
    if int(total.max(initial=0)) > MAX_TOTAL:
        raise RangeCoderError("frequency table overflow")
    return cum, mu_q.numpy(), total


def _as_flat_numpy(params: DistributionParams) -> tuple[np.ndarray, np.ndarray]:
    mu = params.mu.detach().reshape(-1).to(torch.float64).cpu().numpy()
    sigma = params.sigma.detach().reshape(-1).to(torch.float64).cpu().numpy()
    return mu, sigma


def range_encode(symbols: torch.Tensor | np.ndarray, params: DistributionParams) -> BitChunk:
    """Entropy-code integer symbols under the per-element Laplace model."""
    if isinstance(symbols, torch.Tensor):
        sym = symbols.detach().reshape(-1).cpu().numpy()
    else:
        sym = np.asarray(symbols).reshape(-1)
    if not np.all(sym == np.round(sym)):
        raise ValueError("range_encode expects integer-valued symbols")
    sym = sym.astype(np.int64)
    mu, sigma = _as_flat_numpy(params)
    if sym.shape[0] != mu.shape[0]:
        raise ValueError("symbol/parameter count mismatch")

    with torch.no_grad():
        est = float(rate_estimate(
            torch.from_numpy(sym.astype(np.float64)),
            DistributionParams(torch.from_numpy(mu), torch.from_numpy(sigma)),
        ))

    enc = RangeEncoder()
    for start in range(0, sym.shape[0], 8192):
        stop = min(start + 8192, sym.shape[0])
        cum, mu_q, total = _freq_tables(mu[start:stop], sigma[start:stop])
        delta = sym[start:stop] - mu_q
        idx = delta + WINDOW
        for i in range(stop - start):
            t = int(total[i])
            j = int(idx[i])
            if 0 <= j < ALPHABET:
                enc.encode(int(cum[i, j]), int(cum[i, j + 1]), t)
            else:
                d = int(delta[i])
                if not (-(1 << 15) <= d < (1 << 15)):
                    raise RangeCoderError(f"escape delta {d} exceeds 16-bit raw range")
                enc.encode(int(cum[i, ESC_INDEX]), int(cum[i, ESC_INDEX + 1]), t)
                raw = d & 0xFFFF
                enc.encode((raw >> 8) & 0xFF, ((raw >> 8) & 0xFF) + 1, 256)
                enc.encode(raw & 0xFF, (raw & 0xFF) + 1, 256)
    payload = enc.finish()
    return BitChunk(payload=payload, symbol_count=int(sym.shape[0]), estimated_bits=est)


def range_decode(payload: bytes, params: DistributionParams) -> np.ndarray:
    """Inverse of range_encode; returns int64 symbols shaped like params.mu."""
    mu, sigma = _as_flat_numpy(params)
    n = mu.shape[0]
    dec = RangeDecoder(payload)
    out = np.empty(n, dtype=np.int64)
    pos = 0
    for start in range(0, n, 8192):
        stop = min(start + 8192, n)
        cum, mu_q, total = _freq_tables(mu[start:stop], sigma[start:stop])
        for i in range(stop - start):
            t = int(total[i])
            v = dec.decode_freq(t)
            j = int(np.searchsorted(cum[i], v, side="right")) - 1
            dec.decode_update(int(cum[i, j]), int(cum[i, j + 1]), t)
            if j == ESC_INDEX:
                hi = dec.decode_freq(256)
                dec.decode_update(hi, hi + 1, 256)
                lo = dec.decode_freq(256)
                dec.decode_update(lo, lo + 1, 256)
                raw = (hi << 8) | lo
                d = raw - (1 << 16) if raw >= (1 << 15) else raw
                out[pos] = int(mu_q[i]) + d
            else:
                out[pos] = int(mu_q[i]) - WINDOW + j
            pos += 1
    return out.reshape(tuple(params.mu.shape))
