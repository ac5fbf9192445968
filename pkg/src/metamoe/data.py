"""Datasets: file formats, splitting and synthetic multi-domain generation.

Sparse vector format (one example per line)::

    # dim 5000                 optional header declaring the dimension
    +1 1:0.5 3:0.2             label, then 1-based ascending index:value pairs
    ? 2:1.0                    '?' marks an unlabeled example

Binary labels are written ``-1``/``+1`` and mapped to classes 0/1; other
integer labels are class indices.

Token/tag format: one ``token tag`` pair per line, a blank line between
sentences. Unlabeled files carry only the token column.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from metamoe.encoder import PAD_ID, UNK_ID
from metamoe.errors import ParseError
from metamoe.numerics import make_rng

log = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
TASKS = ("classification", "tagging")


@dataclass
class DomainDataset:
    """One domain: dense vectors or token-id sentences, labeled or not.

    For tagging, ``inputs`` is a list of int arrays and ``labels`` a list of
    tag-id arrays of the same lengths.
    """

    name: str
    inputs: np.ndarray | list
    labels: np.ndarray | list | None
    task: str = "classification"
    label_set: list[str] = field(default_factory=list)
    vocab: list[str] | None = None
    outlier: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.labels is not None and len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.inputs)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def n_classes(self) -> int:
        return len(self.label_set)

    @property
    def dim(self) -> int | None:
        return None if self.task == "tagging" else int(np.asarray(self.inputs).shape[1])

    def flat_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"dataset {self.name!r} is unlabeled")
        if self.task == "tagging":
            return np.concatenate([np.asarray(l, dtype=np.int64) for l in self.labels]) if len(self.labels) else np.zeros(0, np.int64)
        return np.asarray(self.labels, dtype=np.int64)

    def n_rows(self) -> int:
        """Rows after encoding: examples, or tokens for tagging."""
        return int(sum(len(s) for s in self.inputs)) if self.task == "tagging" else len(self)

    def subset(self, idx, name: str | None = None) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        if self.task == "tagging":
            inputs = [self.inputs[i] for i in idx]
            labels = None if self.labels is None else [self.labels[i] for i in idx]
        else:
            inputs = np.asarray(self.inputs)[idx]
            labels = None if self.labels is None else np.asarray(self.labels)[idx]
        return DomainDataset(name or self.name, inputs, labels, self.task, list(self.label_set), self.vocab, self.outlier)

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.name, self.inputs, None, self.task, list(self.label_set), self.vocab, self.outlier)

    def batch(self, idx):
        """(inputs, row-aligned labels) for the given example indices."""
        sub = self.subset(idx)
        return sub.inputs, (sub.flat_labels() if sub.labeled else None)


def concat(datasets: Sequence[DomainDataset], name: str) -> DomainDataset:
    first = datasets[0]
    if any(d.task != first.task for d in datasets):
        raise ValueError("cannot concatenate datasets of different tasks")
    labeled = all(d.labeled for d in datasets)
    if first.task == "tagging":
        inputs = [s for d in datasets for s in d.inputs]
        labels = [l for d in datasets for l in d.labels] if labeled else None
    else:
        inputs = np.concatenate([np.asarray(d.inputs) for d in datasets])
        labels = np.concatenate([np.asarray(d.labels) for d in datasets]) if labeled else None
    return DomainDataset(name, inputs, labels, first.task, list(first.label_set), first.vocab)


def fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# sparse vectors


def _parse_label(tok: str, path, lineno) -> int | None:
    if tok == "?":
        return None
    try:
        v = int(tok)
    except ValueError:
        raise ParseError(f"bad label {tok!r}", path, lineno) from None
    if v == -1:
        return 0
    if v < 0:
        raise ParseError(f"negative label {tok!r}", path, lineno)
    return v


def load_sparse(path, dim: int | None = None, n_classes: int | None = None, name: str | None = None) -> DomainDataset:
    path = Path(path)
    rows: list[tuple[np.ndarray, np.ndarray]] = []
    labels: list[int | None] = []
    declared = dim
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "dim":
                    file_dim = int(parts[1])
                    if declared is None:
                        declared = file_dim
                    elif file_dim > declared:
                        raise ParseError(f"file declares dim {file_dim} > {declared}", path, lineno)
                continue
            toks = line.split()
            labels.append(_parse_label(toks[0], path, lineno))
            idx, val = [], []
            for tok in toks[1:]:
                k, sep, v = tok.partition(":")
                if not sep:
                    raise ParseError(f"expected index:value, got {tok!r}", path, lineno)
                try:
                    k_i, v_f = int(k), float(v)
                except ValueError:
                    raise ParseError(f"bad feature {tok!r}", path, lineno) from None
                if k_i < 1 or (idx and k_i <= idx[-1]):
                    raise ParseError("indices must be 1-based and strictly ascending", path, lineno)
                if declared is not None and k_i > declared:
                    raise ParseError(f"index {k_i} beyond dimension {declared}", path, lineno)
                idx.append(k_i)
                val.append(v_f)
            rows.append((np.array(idx, dtype=np.int64) - 1, np.array(val)))
    if not rows:
        raise ParseError("no examples", path)
    known = [l is not None for l in labels]
    if any(known) and not all(known):
        raise ParseError("labeled and unlabeled examples mixed in one file", path)
    if declared is None:
        declared = max((int(i.max()) + 1 for i, _ in rows if i.size), default=1)
    X = np.zeros((len(rows), declared))
    for r, (i, v) in enumerate(rows):
        X[r, i] = v
    y = np.array(labels, dtype=np.int64) if all(known) else None
    C = n_classes or (max(2, int(y.max()) + 1) if y is not None else 2)
    if y is not None and y.max() >= C:
        raise ParseError(f"label {int(y.max())} outside {C} classes", path)
    log.debug("loaded %d examples of dim %d from %s", len(X), declared, path)
    return DomainDataset(name or path.stem, X, y, "classification", _class_names(C))


def _class_names(C: int) -> list[str]:
    return ["-1", "+1"] if C == 2 else [str(c) for c in range(C)]


def write_sparse(dataset: DomainDataset, path) -> None:
    X = np.asarray(dataset.inputs, dtype=np.float64)
    binary = dataset.n_classes == 2
    lines = [f"# dim {X.shape[1]}"]
    for r in range(len(X)):
        if dataset.labels is None:
            lab = "?"
        else:
            y = int(dataset.labels[r])
            lab = ("+1" if y == 1 else "-1") if binary else str(y)
        nz = np.flatnonzero(X[r])
        lines.append(" ".join([lab] + [f"{k + 1}:{float(X[r, k])!r}" for k in nz]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# token / tag sentences


def read_tagged(path) -> list[list[tuple[str, str | None]]]:
    """Raw sentences as lists of (token, tag-or-None)."""
    path = Path(path)
    sentences, current = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                if current:
                    sentences.append(current)
                    current = []
                continue
            if len(toks) > 2:
                raise ParseError(f"expected 'token tag', got {line.strip()!r}", path, lineno)
            current.append((toks[0], toks[1] if len(toks) == 2 else None))
    if current:
        sentences.append(current)
    if not sentences:
        raise ParseError("no sentences", path)
    return sentences


def build_vocab(sentence_lists) -> list[str]:
    vocab = [PAD_TOKEN, UNK_TOKEN]
    seen = set(vocab)
    for sentences in sentence_lists:
        for sent in sentences:
            for tok, _ in sent:
                if tok not in seen:
                    seen.add(tok)
                    vocab.append(tok)
    return vocab


def load_token_tagged(path, vocab: list[str] | None = None, label_set: list[str] | None = None, name: str | None = None) -> DomainDataset:
    path = Path(path)
    sentences = read_tagged(path)
    has_tag = [tag is not None for s in sentences for _, tag in s]
    if any(has_tag) and not all(has_tag):
        raise ParseError("tagged and untagged tokens mixed in one file", path)
    labeled = all(has_tag)
    if vocab is None:
        vocab = build_vocab([sentences])
    index = {t: i for i, t in enumerate(vocab)}
    fixed = label_set is not None
    tags = list(label_set) if fixed else []
    tag_index = {t: i for i, t in enumerate(tags)}
    inputs, labels = [], []
    for sent in sentences:
        inputs.append(np.array([index.get(tok, UNK_ID) for tok, _ in sent], dtype=np.int64))
        if labeled:
            ids = []
            for tok, tag in sent:
                if tag not in tag_index:
                    if fixed:
                        raise ParseError(f"unknown tag {tag!r}", path)
                    tag_index[tag] = len(tags)
                    tags.append(tag)
                ids.append(tag_index[tag])
            labels.append(np.array(ids, dtype=np.int64))
    if len(tags) < 2:
        tags = tags + [f"<tag{i}>" for i in range(len(tags), 2)]
    return DomainDataset(name or path.stem, inputs, labels if labeled else None, "tagging", tags, list(vocab))


def write_token_tagged(dataset: DomainDataset, path) -> None:
    if dataset.vocab is None:
        raise ValueError("tagging dataset without a vocabulary cannot be written")
    out = []
    for s, seq in enumerate(dataset.inputs):
        for j, tok in enumerate(seq):
            word = dataset.vocab[int(tok)]
            if dataset.labels is None:
                out.append(word)
            else:
                out.append(f"{word} {dataset.label_set[int(dataset.labels[s][j])]}")
        out.append("")
    Path(path).write_text("\n".join(out))


# ---------------------------------------------------------------------------
# splitting


def split(dataset: DomainDataset, fraction: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Seeded (train, held-out) split; ``fraction`` is the held-out share.

    Classification data is stratified by label.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(dataset)
    rng = make_rng(seed, 101)
    total = int(np.floor(fraction * n + 0.5))
    if dataset.task == "classification" and dataset.labeled:
        y = np.asarray(dataset.labels)
        classes = np.unique(y)
        sizes = np.array([np.sum(y == c) for c in classes])
        # floor per class, then hand the remainder to the largest fractional parts
        quota = np.floor(fraction * sizes).astype(np.int64)
        rest = fraction * sizes - quota
        order = np.lexsort((rng.permutation(len(classes)), -rest))
        quota[order[: max(0, total - int(quota.sum()))]] += 1
        held = []
        for c, q in zip(classes, quota):
            held.extend(rng.permutation(np.flatnonzero(y == c))[:q].tolist())
        held = np.array(sorted(held), dtype=np.int64)
    else:
        held = np.sort(rng.permutation(n)[:total])
    mask = np.zeros(n, dtype=bool)
    mask[held] = True
    if mask.all() or not mask.any():
        raise ValueError(f"fraction {fraction} leaves an empty part for {n} examples")
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(np.flatnonzero(mask), f"{dataset.name}-heldout")


# ---------------------------------------------------------------------------
# synthetic domains


@dataclass
class SynthSpec:
    """Synthetic multi-source task.

    Each regular domain rotates the class-conditional Gaussians by an angle
    proportional to ``domain_shift`` and translates them by
    ``domain_shift * translation``. The target draws from a half-space
    sub-region of every regular domain. Outlier domains reuse the regular
    domains' inputs but draw labels at random with probability ``outlier_noise``.
    """

    K: int = 3
    classes: int = 2
    dim: int = 10
    per_domain_n: int = 500
    domain_shift: float = 1.0
    outlier_domains: int = 0
    outlier_noise: float = 1.0
    outlier_n: int | None = None
    target_n: int | None = None
    separation: float = 3.0
    translation: float = 4.0
    max_angle: float = np.pi / 4
    outer_target: bool = True
    target_offset: float = 0.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two regular domains")
        if self.classes < 2 or self.dim < 2:
            raise ValueError("need at least two classes and two dimensions")
        if self.per_domain_n < 2 * self.classes:
            raise ValueError("per_domain_n must be at least 2 * classes")
        if self.outlier_domains < 0 or not 0.0 <= self.outlier_noise <= 1.0:
            raise ValueError("invalid outlier settings")
        if self.domain_shift < 0:
            raise ValueError("domain_shift must be non-negative")


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _plane_rotation(u, w, theta):
    """Rotation by theta in the plane spanned by orthonormal u, w."""
    dim = len(u)
    P = np.outer(u, u) + np.outer(w, w)
    return np.eye(dim) - P + np.cos(theta) * P + np.sin(theta) * (np.outer(w, u) - np.outer(u, w))


@dataclass
class _Domain:
    rotation: np.ndarray
    offset: np.ndarray
    region: np.ndarray  # normal of the target's half-space


def _domains(spec: SynthSpec, rng):
    C, D = spec.classes, spec.dim
    if C == 2:
        u = _unit(rng, D)
        means = np.stack([-u, u]) * spec.separation / 2.0
    else:
        means = np.stack([_unit(rng, D) for _ in range(C)]) * spec.separation / 2.0
    axis = means[-1] - means[0]
    axis /= np.linalg.norm(axis)
    w = rng.normal(size=D)
    w -= (w @ axis) * axis
    w /= np.linalg.norm(w)
    line = _unit(rng, D)
    out = []
    for i in range(spec.K):
        # position along a line and boundary angle move together
        frac = 2.0 * i / (spec.K - 1) - 1.0
        R = _plane_rotation(axis, w, spec.domain_shift * spec.max_angle * frac)
        offset = spec.domain_shift * spec.translation * frac * line
        if spec.outer_target and frac != 0.0:
            region = np.sign(frac) * line
        else:
            region = rng.normal(size=D)
            region -= (region @ line) * line
            region /= np.linalg.norm(region)
        out.append(_Domain(R, offset, region))
    return means, out


def _draw(rng, means, dom: _Domain, n, noise):
    y = rng.integers(0, len(means), size=n)
    z = means[y] + noise * rng.normal(size=(n, means.shape[1]))
    return z @ dom.rotation.T + dom.offset, y


def synthesize(spec: SynthSpec) -> tuple[list[DomainDataset], DomainDataset]:
    """Regular source domains, then outlier domains, plus a labeled target.

    Callers that need an unlabeled target use ``target.unlabeled()``.
    """
    rng = make_rng(spec.seed, 7)
    means, doms = _domains(spec, rng)
    names = _class_names(spec.classes)
    sources = []
    for i, dom in enumerate(doms):
        X, y = _draw(rng, means, dom, spec.per_domain_n, spec.noise)
        sources.append(DomainDataset(f"source_{i}", X, y, "classification", list(names)))

    n_out = spec.outlier_n or spec.per_domain_n
    for j in range(spec.outlier_domains):
        which = rng.integers(0, spec.K, size=n_out)
        X = np.empty((n_out, spec.dim))
        y = np.empty(n_out, dtype=np.int64)
        for i, dom in enumerate(doms):
            sel = np.flatnonzero(which == i)
            X[sel], y[sel] = _draw(rng, means, dom, len(sel), spec.noise)
        flip = rng.random(n_out) < spec.outlier_noise
        y[flip] = rng.integers(0, spec.classes, size=int(flip.sum()))
        sources.append(DomainDataset(f"outlier_{j}", X, y, "classification", list(names), outlier=True))

    n_t = spec.target_n or spec.per_domain_n
    parts_X, parts_y = [], []
    counts = np.bincount(rng.integers(0, spec.K, size=n_t), minlength=spec.K)
    for dom, need in zip(doms, counts):
        got_X, got_y, have = [], [], 0
        while have < need:
            X, y = _draw(rng, means, dom, 2 * need + 8, spec.noise)
            keep = (X - dom.offset) @ dom.region >= 0.0
            got_X.append(X[keep] + spec.target_offset * dom.region)
            got_y.append(y[keep])
            have += int(keep.sum())
        parts_X.append(np.concatenate(got_X)[:need])
        parts_y.append(np.concatenate(got_y)[:need])
    order = rng.permutation(n_t)
    target = DomainDataset("target", np.concatenate(parts_X)[order], np.concatenate(parts_y)[order], "classification", list(names))
    return sources, target


def synthesize_tagging(K: int = 3, n_sentences: int = 60, vocab_size: int = 30, n_tags: int = 3, length=(4, 9), seed: int = 0):
    """Toy tagging domains: each domain maps words to tags with its own table.

    Domains share most of the mapping and disagree on a domain-specific
    slice of the vocabulary. Returns (sources, target); the target mixes
    sentences generated under every source's table.
    """
    rng = make_rng(seed, 13)
    words = [f"w{i}" for i in range(vocab_size)]
    vocab = [PAD_TOKEN, UNK_TOKEN] + words
    base = rng.integers(0, n_tags, size=vocab_size)
    tables = []
    for _ in range(K):
        t = base.copy()
        flip = rng.random(vocab_size) < 0.3
        t[flip] = rng.integers(0, n_tags, size=int(flip.sum()))
        tables.append(t)
    tag_names = [f"T{k}" for k in range(n_tags)]

    def sentences(table, lo_word, n):
        ins, labs = [], []
        for _ in range(n):
            L = int(rng.integers(length[0], length[1] + 1))
            w = rng.integers(0, vocab_size, size=L)
            if lo_word is not None:
                w = np.where(rng.random(L) < 0.5, lo_word + rng.integers(0, vocab_size // K, size=L), w)
            ins.append(w + 2)
            labs.append(table[w])
        return ins, labs

    sources = []
    for i in range(K):
        ins, labs = sentences(tables[i], i * (vocab_size // K), n_sentences)
        sources.append(DomainDataset(f"source_{i}", ins, labs, "tagging", list(tag_names), list(vocab)))
    t_in, t_lab = [], []
    for i in range(K):
        ins, labs = sentences(tables[i], i * (vocab_size // K), n_sentences // K)
        t_in += ins
        t_lab += labs
    target = DomainDataset("target", t_in, t_lab, "tagging", list(tag_names), list(vocab))
    return sources, target
