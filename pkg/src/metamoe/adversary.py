"""MMD alignment between pooled source encodings and target encodings.

Biased (V-statistic) estimate of squared MMD under a sum of RBF kernels::

    MMD^2 = mean k(s, s') + mean k(t, t') - 2 mean k(s, t)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from metamoe.numerics import KernelBank, default_bank, kernel_matrices


@dataclass(frozen=True)
class MmdConfig:
    bank: KernelBank = field(default_factory=default_bank)


def _check(S, T):
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    if S.shape[0] == 0 or T.shape[0] == 0:
        raise ValueError("MMD needs non-empty source and target batches")
    if S.shape[1] != T.shape[1]:
        raise ValueError(f"dimension mismatch: {S.shape[1]} vs {T.shape[1]}")
    return S, T


def mmd_squared(source_batch, target_batch, cfg: MmdConfig | None = None) -> float:
    S, T = _check(source_batch, target_batch)
    bank = (cfg or MmdConfig()).bank
    m, n = len(S), len(T)
    Kss, _ = kernel_matrices(S, S, bank)
    Ktt, _ = kernel_matrices(T, T, bank)
    Kst, _ = kernel_matrices(S, T, bank)
    return float(Kss.sum() / m**2 + Ktt.sum() / n**2 - 2.0 * Kst.sum() / (m * n))


def mmd_gradient(source_batch, target_batch, cfg: MmdConfig | None = None):
    """Return (MMD^2, d/d source rows, d/d target rows)."""
    S, T = _check(source_batch, target_batch)
    bank = (cfg or MmdConfig()).bank
    m, n = len(S), len(T)
    Kss, Gss = kernel_matrices(S, S, bank)
    Ktt, Gtt = kernel_matrices(T, T, bank)
    Kst, Gst = kernel_matrices(S, T, bank)
    value = Kss.sum() / m**2 + Ktt.sum() / n**2 - 2.0 * Kst.sum() / (m * n)

    gS = -(2.0 / m**2) * (Gss.sum(1)[:, None] * S - Gss @ S)
    gS += (2.0 / (m * n)) * (Gst.sum(1)[:, None] * S - Gst @ T)
    gT = -(2.0 / n**2) * (Gtt.sum(1)[:, None] * T - Gtt @ T)
    gT += (2.0 / (m * n)) * (Gst.sum(0)[:, None] * T - Gst.T @ S)
    return float(value), gS, gT
