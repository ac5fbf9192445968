"""Meta-training loop, baselines and source-level cross-validation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from metamoe.adversary import MmdConfig
from metamoe.data import DomainDataset, concat, split
from metamoe.encoder import MlpEncoder, TokenEncoder
from metamoe.errors import ConfigError, NumericalError
from metamoe.model import MoEModel
from metamoe.moe import LossBreakdown, MixtureOutput, objective, predict, source_statistics
from metamoe.numerics import PROB_FLOOR, make_rng

log = logging.getLogger(__name__)

MODES = ("moe", "best-ss", "uni-ms")

# RNG stream ids, so that e.g. sampling target batches never shifts source batches
_INIT, _SOURCES, _TARGET, _SPLIT = 1, 2, 3, 4


@dataclass
class TrainConfig:
    mode: str = "moe"
    adversarial: bool = False
    batch_size: int = 32
    lam: float = 0.5
    gamma: float = 1.0
    eta: float = 0.01
    rank: int | None = None
    hidden: int = 64
    d_emb: int = 32
    radius: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    confidence: str | None = None  # None: mcd for binary classification, negdist otherwise
    shared_metric: bool = False
    stop_grad_means: bool = False
    classifier_bias: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.gamma < 0 or self.eta < 0 or self.weight_decay < 0:
            raise ConfigError("gamma, eta and weight_decay must be non-negative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")

    def as_dict(self) -> dict:
        return asdict(self)


def default_learning_rate(dataset: DomainDataset) -> float:
    """1e-4 for sparse (TF-IDF style) vectors, 1e-3 otherwise."""
    if dataset.task == "classification" and np.mean(np.asarray(dataset.inputs) == 0.0) > 0.5:
        return 1e-4
    return 1e-3


@dataclass(frozen=True)
class MetaPair:
    meta_target_index: int
    meta_source_indices: tuple[int, ...]


def build_meta_pairs(K: int) -> list[MetaPair]:
    if K < 2:
        raise ValueError("meta-training needs at least two sources")
    return [MetaPair(t, tuple(i for i in range(K) if i != t)) for t in range(K)]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam with decoupled weight decay, updating ``params`` in place."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        if weight_decay:
            p -= lr * weight_decay * p
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        p -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# batching


class _Cycler:
    """Endless shuffled mini-batches over one dataset."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.m, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.m]
        self.pos += len(idx)
        return idx


@dataclass
class TrainState:
    model: MoEModel
    adam: AdamState
    cyclers: list
    target_cycler: _Cycler | None
    epoch: int = 0


def steps_per_epoch(sources: Sequence[DomainDataset], batch_size: int) -> int:
    return -(-min(len(s) for s in sources) // batch_size)


def _resolve_confidence(cfg: TrainConfig, task: str, n_classes: int) -> str:
    if cfg.confidence is not None:
        if cfg.confidence == "mcd" and n_classes != 2:
            raise ConfigError("maximum cluster difference requires a binary task")
        return cfg.confidence
    return "mcd" if task == "classification" and n_classes == 2 else "negdist"


def make_model(sources: Sequence[DomainDataset], cfg: TrainConfig, with_metric: bool) -> MoEModel:
    first = sources[0]
    rng = make_rng(cfg.seed, _INIT)
    if first.task == "tagging":
        enc = TokenEncoder(len(first.vocab), cfg.d_emb, cfg.hidden, cfg.radius)
    else:
        enc = MlpEncoder(first.dim, cfg.hidden)
    confidence = _resolve_confidence(cfg, first.task, first.n_classes) if with_metric else None
    return MoEModel.create(
        enc,
        len(sources),
        first.n_classes,
        rng,
        confidence=confidence,
        rank=cfg.rank,
        shared_metric=cfg.shared_metric,
        classifier_bias=cfg.classifier_bias,
        task=first.task,
        source_names=[s.name for s in sources],
        label_set=list(first.label_set),
        vocab=first.vocab,
    )


def init_state(model: MoEModel, sources, target, cfg: TrainConfig) -> TrainState:
    cyclers = [_Cycler(len(s), cfg.batch_size, make_rng(cfg.seed, _SOURCES, i)) for i, s in enumerate(sources)]
    tc = _Cycler(len(target), cfg.batch_size, make_rng(cfg.seed, _TARGET)) if target is not None else None
    return TrainState(model, AdamState(), cyclers, tc)


def train_epoch(state: TrainState, sources: Sequence[DomainDataset], target: DomainDataset | None, cfg: TrainConfig) -> LossBreakdown:
    """One pass: ceil(min |S_i| / m) optimizer steps, each on K fresh batches.

    Returns the loss components averaged over the steps.
    """
    if cfg.adversarial and target is None:
        raise ConfigError("adversarial training needs unlabeled target data")
    model = state.model
    mmd = MmdConfig()
    gamma = cfg.gamma if cfg.adversarial else 0.0
    acc = np.zeros(5)
    n_steps = steps_per_epoch(sources, cfg.batch_size)
    for _ in range(n_steps):
        batches = [s.batch(c.next()) for s, c in zip(sources, state.cyclers)]
        tgt = None
        if cfg.adversarial:
            tgt = target.subset(state.target_cycler.next()).inputs
        lb, grads = objective(
            model, batches, tgt, lam=cfg.lam, gamma=gamma, eta=cfg.eta, mmd=mmd, stop_grad_means=cfg.stop_grad_means
        )
        if not np.isfinite(lb.total):
            raise NumericalError(f"non-finite loss at epoch {state.epoch + 1}: {lb}")
        adam_step(model.params, grads, state.adam, cfg.learning_rate, cfg.weight_decay)
        acc += [lb.moe, lb.mtl, lb.adv, lb.entropy, lb.total]
    state.epoch += 1
    return LossBreakdown(*(acc / n_steps))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    mixture: MixtureOutput
    labels: np.ndarray | None

    @property
    def predictions(self) -> np.ndarray:
        return self.mixture.predictions

    @property
    def nll(self) -> float:
        """Mean negative log mixture probability of the true labels."""
        if self.labels is None:
            return float("nan")
        p = self.mixture.combined[np.arange(len(self.labels)), self.labels]
        return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))

    def mean_alpha(self) -> np.ndarray:
        return self.mixture.alpha.mean(0)


def evaluate(model: MoEModel, dataset: DomainDataset, source_stats=None, active=None) -> EvalResult:
    """Accuracy (token-level for tagging) of the mixture prediction."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if (dataset.task == "tagging") != (model.task == "tagging"):
        raise ConfigError(f"{model.task} model cannot evaluate {dataset.task} data")
    out = predict(model, dataset.inputs, source_stats, active)
    labels = dataset.flat_labels() if dataset.labeled else None
    acc = float(np.mean(out.predictions == labels)) if labels is not None else float("nan")
    return EvalResult(acc, out, labels)


def _batches_of(dataset: DomainDataset):
    return dataset.inputs, dataset.flat_labels()


def heldout_metrics(model: MoEModel, train_parts, heldout_parts) -> tuple[float, float]:
    """Mean (accuracy, nll) over each source's held-out part.

    With a metric, source t is predicted by the mixture of the other
    sources (t acts as meta-target); otherwise by the model's own expert.
    """
    if model.has_metric and model.n_sources > 1:
        stats = source_statistics(model, [_batches_of(p) for p in train_parts])
        evs = [
            evaluate(model, h, stats, active=[i for i in range(model.n_sources) if i != t])
            for t, h in enumerate(heldout_parts)
        ]
    else:
        evs = [evaluate(model, h, active=[t]) for t, h in enumerate(heldout_parts)]
    return float(np.mean([e.accuracy for e in evs])), float(np.mean([e.nll for e in evs]))


@dataclass
class TrainResult:
    model: MoEModel
    history: list[dict]
    best_epoch: int
    best_score: float


def fit(
    sources: Sequence[DomainDataset],
    cfg: TrainConfig,
    target: DomainDataset | None = None,
    validation: DomainDataset | None = None,
    with_metric: bool = True,
    log_fn: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one model over ``sources`` with early stopping.

    Without a labeled ``validation`` set, each source is split and the
    held-out parts drive early stopping. The returned model holds the
    best-scoring parameters and full-domain statistics of its training data.
    """
    if cfg.adversarial and target is None:
        raise ConfigError("adversarial training needs unlabeled target data")
    if with_metric and len(sources) < 2:
        raise ConfigError("the mixture of experts needs at least two sources")
    if any(not s.labeled for s in sources):
        raise ValueError("source domains must be labeled")
    if validation is None:
        parts = [split(s, cfg.val_fraction, cfg.seed * 1009 + i) for i, s in enumerate(sources)]
        train_parts = [p[0] for p in parts]
        held = [p[1] for p in parts]
    else:
        train_parts, held = list(sources), None

    model = make_model(train_parts, cfg, with_metric)
    state = init_state(model, train_parts, target, cfg)

    def score():
        if held is None:
            stats = source_statistics(model, [_batches_of(p) for p in train_parts]) if model.has_metric else None
            ev = evaluate(model, validation, stats)
            return ev.accuracy, ev.nll
        return heldout_metrics(model, train_parts, held)

    # accuracy decides; held-out nll breaks the frequent accuracy ties
    best = ((-np.inf, np.inf), 0, {k: v.copy() for k, v in model.params.items()})
    history, stale = [], 0
    for epoch in range(1, cfg.max_epochs + 1):
        lb = train_epoch(state, train_parts, target, cfg)
        val, nll = score()
        rec = {"epoch": epoch, **lb.as_dict(), "val": val, "val_nll": nll, "lr": cfg.learning_rate}
        history.append(rec)
        if log_fn is not None:
            log_fn(rec)
        log.debug("epoch %d %s", epoch, rec)
        if val > best[0][0] or (val == best[0][0] and nll < best[0][1]):
            best = ((val, nll), epoch, {k: v.copy() for k, v in model.params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.params = best[2]
    if model.has_metric:
        model.source_stats = source_statistics(model, [_batches_of(p) for p in train_parts])
    return TrainResult(model, history, best[1], float(best[0][0]))


# ---------------------------------------------------------------------------
# baselines and full runs


@dataclass
class RunResult:
    mode: str
    model: MoEModel
    accuracy: float | None
    history: list[dict]
    per_source_accuracy: list[float] | None = None
    selected_source: int | None = None
    mean_alpha: list[float] | None = None
    best_epoch: int = 0


def train_baseline(
    mode: str,
    sources: Sequence[DomainDataset],
    target: DomainDataset | None,
    cfg: TrainConfig,
    evaluation: DomainDataset | None = None,
    log_fn=None,
) -> RunResult:
    """best-SS: one model per source, best target accuracy reported.
    uni-MS: one model on the concatenation of all sources.

    Baselines have a single expert, so only the cross-entropy (and, when
    adversarial, MMD) terms are trained.
    """
    if cfg.adversarial and target is None:
        raise ConfigError("adversarial training needs unlabeled target data")
    bcfg = replace(cfg, mode=mode, lam=0.0, eta=0.0)
    tgt = target.unlabeled() if target is not None else None
    if mode == "uni-ms" or len(sources) == 1:
        pooled = concat(sources, "+".join(s.name for s in sources)) if len(sources) > 1 else sources[0]
        res = fit([pooled], bcfg, tgt, with_metric=False, log_fn=log_fn)
        acc = evaluate(res.model, evaluation).accuracy if evaluation is not None and evaluation.labeled else None
        return RunResult(mode, res.model, acc, res.history, best_epoch=res.best_epoch)
    if mode != "best-ss":
        raise ConfigError(f"unknown baseline {mode!r}")
    runs = [fit([s], bcfg, tgt, with_metric=False, log_fn=log_fn) for s in sources]
    if evaluation is not None and evaluation.labeled:
        accs = [evaluate(r.model, evaluation).accuracy for r in runs]
        pick = int(np.argmax(accs))
        return RunResult(mode, runs[pick].model, accs[pick], runs[pick].history, accs, pick, best_epoch=runs[pick].best_epoch)
    pick = int(np.argmax([r.best_score for r in runs]))
    return RunResult(mode, runs[pick].model, None, runs[pick].history, None, pick, best_epoch=runs[pick].best_epoch)


def run(
    sources: Sequence[DomainDataset],
    cfg: TrainConfig,
    target: DomainDataset | None = None,
    evaluation: DomainDataset | None = None,
    validation: DomainDataset | None = None,
    log_fn=None,
) -> RunResult:
    """Train ``cfg.mode`` and score it on ``evaluation`` when labeled."""
    if cfg.mode != "moe":
        return train_baseline(cfg.mode, sources, target, cfg, evaluation, log_fn)
    tgt = target.unlabeled() if target is not None else None
    res = fit(sources, cfg, tgt, validation, with_metric=True, log_fn=log_fn)
    acc, alpha = None, None
    if evaluation is not None:
        ev = evaluate(res.model, evaluation)
        acc = ev.accuracy if evaluation.labeled else None
        alpha = ev.mean_alpha().tolist()
    return RunResult("moe", res.model, acc, res.history, mean_alpha=alpha, best_epoch=res.best_epoch)


@dataclass
class CVResult:
    best_index: int
    best_point: dict
    scores: list[float]


def cross_validate(sources: Sequence[DomainDataset], grid: Sequence[dict], cfg: TrainConfig) -> CVResult:
    """Pick the grid point with the best mean accuracy over pseudo-targets.

    Each source in turn is held out as a labeled pseudo-target and the model
    is trained on the remaining ones. Ties go to the earliest grid point.
    """
    if not grid:
        raise ValueError("empty hyper-parameter grid")
    if len(sources) < 2:
        raise ValueError("cross-validation over sources needs at least two sources")
    scores = []
    for point in grid:
        pcfg = replace(cfg, **point)
        accs = []
        for t, held in enumerate(sources):
            rest = [s for i, s in enumerate(sources) if i != t]
            # one remaining source cannot form a mixture: fall back to a single model
            mode_cfg = pcfg if len(rest) >= 2 or pcfg.mode != "moe" else replace(pcfg, mode="uni-ms")
            r = run(rest, mode_cfg, target=held if pcfg.adversarial else None, evaluation=held)
            accs.append(r.accuracy)
        scores.append(float(np.mean(accs)))
    best = int(np.argmax(scores))
    return CVResult(best, dict(grid[best]), scores)
