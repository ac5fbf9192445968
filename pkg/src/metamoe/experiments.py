"""Synthetic comparison protocols shared by scripts/ and the acceptance tests.

Each study runs a list of seeds and returns per-seed numbers; callers do the
aggregation and the pass/fail decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from metamoe.adversary import mmd_squared
from metamoe.data import DomainDataset, SynthSpec, split, synthesize
from metamoe.trainer import TrainConfig, make_model, run

# Three domains laid out along a line, each rotating the class axis further,
# so the ends disagree on labels. A small encoder cannot cheaply learn the
# domain-dependent rule from pooled data, which is where routing pays off.
SYNTH = dict(K=3, per_domain_n=500, translation=8.0, max_angle=math.pi / 2)
TRAIN = dict(hidden=6, learning_rate=3e-3, patience=20)
# At six units training sometimes stalls on a plateau, which swamps the small
# effects of an outlier source, and the adversary competes with the
# classifiers for capacity. Those two studies use the default width.
WIDE_TRAIN = dict(TRAIN, hidden=64)


def task(seed: int, **overrides) -> tuple[list[DomainDataset], DomainDataset]:
    return synthesize(SynthSpec(seed=seed, **{**SYNTH, **overrides}))


def config(seed: int, **overrides) -> TrainConfig:
    return TrainConfig(seed=seed, **{**TRAIN, **overrides})


@dataclass
class SeedRow:
    seed: int
    moe: float
    uni_ms: float
    best_ss: float
    mean_alpha: list[float]


def compare_baselines(seeds, synth: dict | None = None, train: dict | None = None) -> list[SeedRow]:
    rows = []
    for seed in seeds:
        sources, target = task(seed, **(synth or {}))
        cfg = config(seed, **(train or {}))
        m = run(sources, cfg, evaluation=target)
        u = run(sources, replace(cfg, mode="uni-ms"), evaluation=target)
        b = run(sources, replace(cfg, mode="best-ss"), evaluation=target)
        rows.append(SeedRow(seed, m.accuracy, u.accuracy, b.accuracy, m.mean_alpha))
    return rows


@dataclass
class OutlierRow:
    seed: int
    multiple: int
    moe: float
    uni_ms: float
    outlier_alpha: float  # nan without an outlier


def outlier_study(seeds, multiples=(0, 1, 2, 3), train: dict | None = None) -> list[OutlierRow]:
    """Accuracy with one random-label source of multiple * per_domain_n rows."""
    train = WIDE_TRAIN if train is None else train
    rows = []
    for mult in multiples:
        for seed in seeds:
            extra = dict(outlier_domains=1, outlier_n=mult * SYNTH["per_domain_n"]) if mult else {}
            sources, target = task(seed, **extra)
            cfg = config(seed, **train)
            m = run(sources, cfg, evaluation=target)
            u = run(sources, replace(cfg, mode="uni-ms"), evaluation=target)
            a = m.mean_alpha[-1] if mult else float("nan")
            rows.append(OutlierRow(seed, mult, m.accuracy, u.accuracy, a))
    return rows


def pooled_mmd(model, sources, target) -> float:
    """MMD^2 between the pooled source encodings and the target encodings."""
    enc = model.encoder
    S = np.concatenate([enc.forward(model.params, s.inputs)[0] for s in sources])
    T = enc.forward(model.params, target.inputs)[0]
    return mmd_squared(S, T)


@dataclass
class AdversaryRow:
    seed: int
    mmd_init: float
    mmd_final: float
    moe: float
    moe_a: float


def adversarial_study(seeds, gamma: float = 1.0, train: dict | None = None) -> list[AdversaryRow]:
    rows = []
    for seed in seeds:
        sources, target = task(seed)
        cfg = config(seed, **(train if train is not None else WIDE_TRAIN))
        acfg = replace(cfg, adversarial=True, gamma=gamma)
        # same split and seed as inside fit, so this is the adversarial run's starting point
        train_parts = [split(s, cfg.val_fraction, cfg.seed * 1009 + i)[0] for i, s in enumerate(sources)]
        init = make_model(train_parts, acfg, with_metric=True)
        plain = run(sources, cfg, evaluation=target)
        adv = run(sources, acfg, target=target, evaluation=target)
        rows.append(AdversaryRow(
            seed,
            pooled_mmd(init, sources, target),
            pooled_mmd(adv.model, sources, target),
            plain.accuracy,
            adv.accuracy,
        ))
    return rows
