"""Small numerical kernels shared by every other module.

Everything here is float64 and side-effect free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from metamoe.errors import NumericalError

PROB_FLOOR = 1e-12


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    """Counter-based (Philox) generator; extra ints select independent streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, streams)])))


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = v - np.max(v, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def logsumexp(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    mx = np.max(v, axis=axis, keepdims=True)
    out = mx + np.log(np.exp(v - mx).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def cross_entropy(p, label: int) -> float:
    """-log p[label], with p[label] floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class KernelBank:
    """Bandwidths of a sum of RBF kernels exp(-||a - b||^2 / (2 sigma))."""

    bandwidths: tuple[float, ...]

    def __post_init__(self):
        bw = tuple(float(s) for s in self.bandwidths)
        if not bw:
            raise ValueError("kernel bank must hold at least one bandwidth")
        if any(not np.isfinite(s) or s <= 0 for s in bw):
            raise ValueError(f"bandwidths must be positive and finite, got {bw}")
        object.__setattr__(self, "bandwidths", bw)

    def __len__(self):
        return len(self.bandwidths)

    @classmethod
    def log_spaced(cls, low: float = 1e-6, high: float = 1e6, count: int = 19) -> "KernelBank":
        return cls(tuple(np.logspace(np.log10(low), np.log10(high), count)))


def default_bank() -> KernelBank:
    return KernelBank.log_spaced()


def rbf_kernel_bank(h_i, h_j, bank: KernelBank) -> float:
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if h_i.shape != h_j.shape:
        raise ValueError(f"dimension mismatch: {h_i.shape} vs {h_j.shape}")
    sq = float(np.sum((h_i - h_j) ** 2))
    return float(sum(np.exp(-sq / (2.0 * s)) for s in bank.bandwidths))


def sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances.

    Computed from explicit differences: the |a|^2 + |b|^2 - 2ab expansion
    cancels badly, which the 1e-6 bandwidth kernels amplify.
    """
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_matrices(A: np.ndarray, B: np.ndarray, bank: KernelBank) -> tuple[np.ndarray, np.ndarray]:
    """Return (K, G): K = sum_n k_n(a, b) and G = sum_n k_n(a, b) / sigma_n.

    G is what the gradient needs: d k(a, b) / d a = -G(a, b) * (a - b).
    """
    D = sq_dists(A, B)
    K = np.zeros_like(D)
    G = np.zeros_like(D)
    for s in bank.bandwidths:
        k = np.exp(-D / (2.0 * s))
        K += k
        G += k / s
    return K, G


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, same shape as theta."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f(theta))
        flat[k] = orig - eps
        fm = float(f(theta))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {tuple(int(i) for i in np.unravel_index(k, theta.shape))}")
        grad[k] = (fp - fm) / (2.0 * eps)
    return grad.reshape(theta.shape)


def grad_close(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Relative agreement with an absolute floor, elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return bool(np.all(np.abs(a - n) <= rtol * np.maximum(np.abs(a), np.abs(n)) + atol))


def as_matrix(rows: Sequence[Sequence[float]]) -> np.ndarray:
    m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D array")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m
