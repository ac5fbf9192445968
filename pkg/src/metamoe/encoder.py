"""Shared encoders and per-source linear classifiers.

Two encoders are provided, both a single rectified hidden layer:

* ``MlpEncoder`` for dense feature vectors.
* ``TokenEncoder`` for token-id sequences. Each token is represented by the
  concatenated embeddings of a window of ``2 * radius + 1`` tokens around it;
  positions outside the sentence read a dedicated padding row.

Parameters live in a flat ``dict[str, np.ndarray]`` owned by the model so the
optimizer and checkpoint code can treat them uniformly. ``forward`` returns an
opaque cache that ``backward`` consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from metamoe.errors import ContractError
from metamoe.numerics import relu, softmax

PAD_ID = 0
UNK_ID = 1


@dataclass
class EncoderCache:
    kind: str
    inputs: np.ndarray  # dense rows for the MLP, window ids for tokens
    pre: np.ndarray  # pre-activation
    flat: np.ndarray | None = None  # concatenated window embeddings


@dataclass(frozen=True)
class MlpEncoder:
    d_in: int
    hidden: int
    kind: str = "mlp"

    def __post_init__(self):
        if self.d_in <= 0 or self.hidden <= 0:
            raise ValueError("d_in and hidden must be positive")

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {
            "enc.W1": rng.normal(0.0, 1.0 / np.sqrt(self.d_in), size=(self.hidden, self.d_in)),
            "enc.b1": np.zeros(self.hidden),
        }

    def count(self, inputs) -> int:
        return int(np.asarray(inputs).shape[0])

    def forward(self, params, inputs) -> tuple[np.ndarray, EncoderCache]:
        X = np.asarray(inputs, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.d_in:
            raise ValueError(f"expected inputs with {self.d_in} features, got shape {X.shape}")
        Z = X @ params["enc.W1"].T + params["enc.b1"]
        return relu(Z), EncoderCache(self.kind, X, Z)

    def backward(self, params, cache: EncoderCache | None, dH: np.ndarray) -> dict[str, np.ndarray]:
        _check_cache(cache, self.kind)
        dZ = dH * (cache.pre > 0)
        return {"enc.W1": dZ.T @ cache.inputs, "enc.b1": dZ.sum(0)}


@dataclass(frozen=True)
class TokenEncoder:
    vocab_size: int
    d_emb: int
    hidden: int
    radius: int = 2
    kind: str = "token"

    def __post_init__(self):
        if self.vocab_size <= UNK_ID or self.d_emb <= 0 or self.hidden <= 0 or self.radius < 0:
            raise ValueError("invalid token encoder dimensions")

    @property
    def window(self) -> int:
        return 2 * self.radius + 1

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        fan_in = self.window * self.d_emb
        return {
            "enc.emb": rng.normal(0.0, 1.0 / np.sqrt(self.d_emb), size=(self.vocab_size, self.d_emb)),
            "enc.W1": rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(self.hidden, fan_in)),
            "enc.b1": np.zeros(self.hidden),
        }

    def count(self, inputs) -> int:
        return int(sum(len(s) for s in inputs))

    def window_ids(self, sequences: Sequence[np.ndarray]) -> np.ndarray:
        rows = []
        offsets = np.arange(-self.radius, self.radius + 1)
        for seq in sequences:
            seq = np.asarray(seq, dtype=np.int64)
            if seq.size and (seq.min() < 0 or seq.max() >= self.vocab_size):
                raise ValueError(f"token id outside vocabulary of size {self.vocab_size}")
            padded = np.concatenate([np.full(self.radius, PAD_ID), seq, np.full(self.radius, PAD_ID)])
            pos = np.arange(len(seq))[:, None] + self.radius + offsets[None, :]
            rows.append(padded[pos])
        if not rows:
            return np.zeros((0, self.window), dtype=np.int64)
        return np.concatenate(rows, axis=0)

    def forward(self, params, inputs) -> tuple[np.ndarray, EncoderCache]:
        if isinstance(inputs, np.ndarray) and inputs.ndim == 1:
            inputs = [inputs]
        ids = self.window_ids(inputs)
        flat = params["enc.emb"][ids].reshape(len(ids), -1)
        Z = flat @ params["enc.W1"].T + params["enc.b1"]
        return relu(Z), EncoderCache(self.kind, ids, Z, flat)

    def backward(self, params, cache: EncoderCache | None, dH: np.ndarray) -> dict[str, np.ndarray]:
        _check_cache(cache, self.kind)
        dZ = dH * (cache.pre > 0)
        dflat = (dZ @ params["enc.W1"]).reshape(len(cache.inputs), self.window, self.d_emb)
        demb = np.zeros_like(params["enc.emb"])
        np.add.at(demb, cache.inputs, dflat)
        return {"enc.emb": demb, "enc.W1": dZ.T @ cache.flat, "enc.b1": dZ.sum(0)}


def _check_cache(cache, kind):
    if not isinstance(cache, EncoderCache):
        raise ContractError("backward called without a cached forward pass")
    if cache.kind != kind:
        raise ContractError(f"cache from a {cache.kind} encoder passed to a {kind} encoder")


def encode(x, params, encoder) -> np.ndarray:
    """E(x): hidden vector(s) for one input or a batch."""
    H, _ = encoder.forward(params, x)
    return H


def expert_logits(H: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if H.shape[-1] != W.shape[1]:
        raise ValueError(f"hidden size {H.shape[-1]} does not match classifier width {W.shape[1]}")
    S = H @ W.T
    return S if b is None else S + b


def expert_posterior(h, W, b=None) -> np.ndarray:
    """softmax(W h) for one hidden vector (or row-wise for a batch)."""
    return softmax(expert_logits(np.asarray(h, dtype=np.float64), np.asarray(W, dtype=np.float64), b))


def build_encoder(spec: dict):
    kind = spec["kind"]
    if kind == "mlp":
        return MlpEncoder(int(spec["d_in"]), int(spec["hidden"]))
    if kind == "token":
        return TokenEncoder(int(spec["vocab_size"]), int(spec["d_emb"]), int(spec["hidden"]), int(spec.get("radius", 2)))
    raise ValueError(f"unknown encoder kind {kind!r}")


def encoder_spec(encoder) -> dict:
    if isinstance(encoder, MlpEncoder):
        return {"kind": "mlp", "d_in": encoder.d_in, "hidden": encoder.hidden}
    return {
        "kind": "token",
        "vocab_size": encoder.vocab_size,
        "d_emb": encoder.d_emb,
        "hidden": encoder.hidden,
        "radius": encoder.radius,
    }
