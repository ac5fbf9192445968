"""Mixture-of-experts prediction and the training objective.

All losses are means: over the examples of a batch, then over the K
meta-targets. ``objective`` evaluates every component on one set of source
batches (plus an optional target batch) and back-propagates the weighted sum
into every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metamoe.adversary import MmdConfig, mmd_gradient
from metamoe.errors import ContractError
from metamoe.metric import DomainStats, compute_domain_stats, confidence_backward, confidence_forward, confidences_from_stats
from metamoe.model import MoEModel
from metamoe.numerics import log_softmax, logsumexp, softmax


@dataclass
class MixtureOutput:
    alpha: np.ndarray  # (n, K)
    expert_posteriors: np.ndarray  # (K, n, C)
    combined: np.ndarray  # (n, C)

    @property
    def predictions(self) -> np.ndarray:
        return self.combined.argmax(-1)


@dataclass
class LossBreakdown:
    moe: float
    mtl: float
    adv: float
    entropy: float
    total: float

    def as_dict(self) -> dict:
        return {"moe": self.moe, "mtl": self.mtl, "adv": self.adv, "entropy": self.entropy, "total": self.total}


def moe_posterior(alpha, experts) -> np.ndarray:
    """sum_i alpha_i * p_i."""
    alpha = np.asarray(alpha, dtype=np.float64)
    P = np.asarray(experts, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != alpha.shape[0]:
        raise ValueError(f"{alpha.shape[0]} weights for {P.shape[0] if P.ndim else 0} experts")
    return alpha @ P


def entropy_regularizer(alpha_all) -> float:
    """Mean entropy of per-example alpha vectors (one row per example)."""
    A = np.atleast_2d(np.asarray(alpha_all, dtype=np.float64))
    logA = np.log(np.where(A > 0, A, 1.0))
    return float(np.mean(-(A * logA).sum(1)))


def joint_loss(moe: float, mtl: float, adv: float, entropy: float, lam: float, gamma: float, eta: float) -> LossBreakdown:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if gamma < 0 or eta < 0:
        raise ValueError("gamma and eta must be non-negative")
    total = lam * moe + (1.0 - lam) * mtl + gamma * adv + eta * entropy
    return LossBreakdown(moe, mtl, adv, entropy, total)


def _logits(model: MoEModel, H: np.ndarray, i: int) -> np.ndarray:
    S = H @ model.W(i).T
    b = model.b(i)
    return S if b is None else S + b


def objective(
    model: MoEModel,
    batches,
    target_inputs=None,
    lam: float = 0.5,
    gamma: float = 0.0,
    eta: float = 0.0,
    mmd: MmdConfig | None = None,
    stop_grad_means: bool = False,
    need_grad: bool = True,
):
    """Joint loss over one batch per source; returns (LossBreakdown, grads).

    ``batches`` is a list of ``(inputs, labels)`` per source, with labels
    aligned to encoded rows (tokens for sequence data). The MoE term for
    meta-target t mixes the other K-1 experts with weights normalised over
    those K-1 sources; the entropy term uses weights over all K sources.
    """
    K = len(batches)
    if K != model.n_sources:
        raise ValueError(f"model has {model.n_sources} sources, got {K} batches")
    enc = model.encoder
    params = model.params
    C = model.n_classes

    Hs, caches, ys = [], [], []
    for inputs, labels in batches:
        H, cache = enc.forward(params, inputs)
        y = np.asarray(labels, dtype=np.int64)
        if len(y) != len(H):
            raise ValueError("labels are not aligned with encoded rows")
        Hs.append(H)
        caches.append(cache)
        ys.append(y)
    gH = [np.zeros_like(H) for H in Hs]
    gS = {}  # (t, l) -> grad wrt logits of expert l on batch t
    grads = model.zero_grads() if need_grad else None

    logP = {}
    w_mtl = 1.0 - lam

    # multi-task term: each source batch through its own expert
    mtl = 0.0
    for t in range(K):
        S = _logits(model, Hs[t], t)
        lp = log_softmax(S)
        logP[t, t] = lp
        n = len(ys[t])
        mtl += -lp[np.arange(n), ys[t]].mean() / K
        if need_grad and w_mtl:
            g = np.exp(lp)
            g[np.arange(n), ys[t]] -= 1.0
            gS[t, t] = g * (w_mtl / (n * K))

    moe = 0.0
    ent = 0.0
    use_metric = model.has_metric and K >= 2
    if use_metric:
        # confidences of each batch-t row against every source batch l
        E, conf_caches = {}, {}
        for t in range(K):
            cols = []
            for l in range(K):
                e, cc = confidence_forward(Hs[t], Hs[l], ys[l], model.U(l), model.confidence, stop_grad_means)
                cols.append(e)
                conf_caches[t, l] = cc
            E[t] = np.stack(cols, axis=1)

        for t in range(K):
            n = len(ys[t])
            rows = np.arange(n)
            others = [l for l in range(K) if l != t]
            gE = np.zeros((n, K))

            log_alpha = log_softmax(E[t][:, others])
            a = np.empty((n, len(others)))
            for j, l in enumerate(others):
                if (t, l) not in logP:
                    logP[t, l] = log_softmax(_logits(model, Hs[t], l))
                a[:, j] = log_alpha[:, j] + logP[t, l][rows, ys[t]]
            lq = logsumexp(a, axis=1)
            moe += -lq.mean() / K
            if need_grad and lam:
                scale = lam / (n * K)
                resp = np.exp(a - lq[:, None])
                gE[:, others] += (np.exp(log_alpha) - resp) * scale
                for j, l in enumerate(others):
                    g = -np.exp(logP[t, l])
                    g[rows, ys[t]] += 1.0
                    g *= (-resp[:, j] * scale)[:, None]
                    gS[t, l] = gS.get((t, l), 0.0) + g

            la_all = log_softmax(E[t])
            al_all = np.exp(la_all)
            h_ex = -(al_all * la_all).sum(1)
            ent += h_ex.mean() / K
            if need_grad and eta:
                gE += -al_all * (la_all + h_ex[:, None]) * (eta / (n * K))

            if need_grad and np.any(gE):
                for l in range(K):
                    gq, gsrc, gu = confidence_backward(gE[:, l], model.U(l), conf_caches[t, l], len(Hs[l]))
                    gH[t] += gq
                    gH[l] += gsrc
                    grads[model.u_key(l)] += gu

    adv = 0.0
    if target_inputs is not None:
        HT, cacheT = enc.forward(params, target_inputs)
        pooled = np.concatenate(Hs, axis=0)
        adv, g_src, g_tgt = mmd_gradient(pooled, HT, mmd)
        if need_grad and gamma:
            offset = 0
            for t in range(K):
                gH[t] += gamma * g_src[offset:offset + len(Hs[t])]
                offset += len(Hs[t])
            for k, v in enc.backward(params, cacheT, gamma * g_tgt).items():
                grads[k] += v

    breakdown = joint_loss(moe, mtl, adv, ent, lam, gamma, eta)
    if not need_grad:
        return breakdown, None

    for (t, l), g in gS.items():
        grads[f"clf.{l}.W"] += g.T @ Hs[t]
        if model.classifier_bias:
            grads[f"clf.{l}.b"] += g.sum(0)
        gH[t] += g @ model.W(l)
    for t in range(K):
        for k, v in enc.backward(params, caches[t], gH[t]).items():
            grads[k] += v
    return breakdown, grads


def moe_loss(batches, model: MoEModel, **kw) -> float:
    if len(batches) < 2:
        raise ContractError("the MoE loss needs at least two sources (one meta-target, one meta-source)")
    return objective(model, batches, lam=1.0, need_grad=False, **kw)[0].moe


def mtl_loss(batches, model: MoEModel) -> float:
    return objective(model, batches, lam=0.0, need_grad=False)[0].mtl


# ---------------------------------------------------------------------------
# inference


def source_statistics(model: MoEModel, datasets) -> list[DomainStats]:
    """Full-domain statistics of every source (inputs, labels) pair."""
    out = []
    for inputs, labels in datasets:
        H, _ = model.encoder.forward(model.params, inputs)
        if model.confidence == "mcd":
            out.append(compute_domain_stats(H, labels, model.n_classes))
        else:
            out.append(compute_domain_stats(H))
    return out


def predict(model: MoEModel, inputs, source_stats: list[DomainStats] | None = None, active=None) -> MixtureOutput:
    """Mixture prediction for a batch of target inputs.

    ``active`` restricts the mixture to a subset of sources (used for the
    held-out meta-target check); by default all K sources take part.
    """
    H, _ = model.encoder.forward(model.params, inputs)
    idx = list(range(model.n_sources)) if active is None else list(active)
    if not idx:
        raise ValueError("no active sources")
    experts = np.stack([softmax(_logits(model, H, i)) for i in idx])
    if model.has_metric and len(idx) > 1:
        stats = source_stats if source_stats is not None else model.source_stats
        if stats is None or len(stats) != model.n_sources:
            raise ContractError("prediction needs statistics for every source domain")
        E = np.stack([confidences_from_stats(H, stats[i], model.U(i), model.confidence) for i in idx], axis=1)
        alpha = softmax(E, axis=1)
    else:
        alpha = np.full((len(H), len(idx)), 1.0 / len(idx))
    combined = np.einsum("nk,knc->nc", alpha, experts)
    return MixtureOutput(alpha, experts, combined)
