"""Model container and checkpoint format.

A checkpoint is a NumPy ``.npz`` archive:

``meta``                 JSON document (UTF-8 bytes as a uint8 array) holding
                         ``format_version``, encoder spec, task, class and
                         source names, vocabulary, confidence kind, rank and
                         the training config used
``param/<name>``         every parameter tensor, named as in ``MoEModel.params``
``stats/<i>/mean``       full-domain mean encoding of source ``i``
``stats/<i>/class_means``  per-class means (only when available)
``stats/<i>/count``      number of encodings aggregated

Parameter names: ``enc.W1``, ``enc.b1``, ``enc.emb`` (token encoder only),
``clf.<i>.W`` / ``clf.<i>.b`` per source classifier, and ``metric.<i>.U`` (or
``metric.shared.U``) for the metric factors. Baseline models carry no
``metric.*`` entries.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metamoe.encoder import MlpEncoder, TokenEncoder, build_encoder, encoder_spec
from metamoe.metric import DomainStats

FORMAT_VERSION = 1


@dataclass
class MoEModel:
    encoder: MlpEncoder | TokenEncoder
    n_sources: int
    n_classes: int
    params: dict[str, np.ndarray]
    confidence: str | None = None  # None: no metric (single-expert baselines)
    rank: int = 0
    shared_metric: bool = False
    classifier_bias: bool = False
    task: str = "classification"
    source_names: list[str] = field(default_factory=list)
    label_set: list[str] = field(default_factory=list)
    vocab: list[str] | None = None
    source_stats: list[DomainStats] | None = None

    @classmethod
    def create(
        cls,
        encoder,
        n_sources: int,
        n_classes: int,
        rng: np.random.Generator,
        confidence: str | None = "mcd",
        rank: int | None = None,
        shared_metric: bool = False,
        classifier_bias: bool = False,
        **meta,
    ) -> "MoEModel":
        if n_sources < 1 or n_classes < 2:
            raise ValueError("need at least one source and two classes")
        h = encoder.hidden
        params = encoder.init_params(rng)
        for i in range(n_sources):
            params[f"clf.{i}.W"] = rng.normal(0.0, 1.0 / np.sqrt(h), size=(n_classes, h))
            if classifier_bias:
                params[f"clf.{i}.b"] = np.zeros(n_classes)
        r = 0
        if confidence is not None:
            r = min(h, 64) if rank is None else int(rank)
            if not 1 <= r <= h:
                raise ValueError(f"rank must be in [1, {h}], got {r}")
            for key in ["shared"] if shared_metric else [str(i) for i in range(n_sources)]:
                params[f"metric.{key}.U"] = rng.normal(0.0, 0.1 / np.sqrt(h), size=(h, r))
        return cls(encoder, n_sources, n_classes, params, confidence, r, shared_metric, classifier_bias, **meta)

    @property
    def has_metric(self) -> bool:
        return self.confidence is not None

    def u_key(self, i: int) -> str:
        return "metric.shared.U" if self.shared_metric else f"metric.{i}.U"

    def U(self, i: int) -> np.ndarray:
        return self.params[self.u_key(i)]

    def W(self, i: int) -> np.ndarray:
        return self.params[f"clf.{i}.W"]

    def b(self, i: int) -> np.ndarray | None:
        return self.params.get(f"clf.{i}.b")

    def copy(self) -> "MoEModel":
        return copy.deepcopy(self)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- persistence -----------------------------------------------------

    def meta(self, config: dict | None = None) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "encoder": encoder_spec(self.encoder),
            "n_sources": self.n_sources,
            "n_classes": self.n_classes,
            "confidence": self.confidence,
            "rank": self.rank,
            "shared_metric": self.shared_metric,
            "classifier_bias": self.classifier_bias,
            "task": self.task,
            "source_names": list(self.source_names),
            "label_set": list(self.label_set),
            "vocab": self.vocab,
            "config": config or {},
        }

    def save(self, path, config: dict | None = None) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        for i, st in enumerate(self.source_stats or []):
            arrays[f"stats/{i}/mean"] = st.mean
            arrays[f"stats/{i}/count"] = np.array(st.support_count)
            if st.class_means is not None:
                arrays[f"stats/{i}/class_means"] = st.class_means
        blob = json.dumps(self.meta(config), sort_keys=True).encode("utf-8")
        arrays["meta"] = np.frombuffer(blob, dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> tuple["MoEModel", dict]:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
            params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
            stats = []
            i = 0
            while f"stats/{i}/mean" in z.files:
                cm = z[f"stats/{i}/class_means"].copy() if f"stats/{i}/class_means" in z.files else None
                stats.append(DomainStats(z[f"stats/{i}/mean"].copy(), cm, int(z[f"stats/{i}/count"])))
                i += 1
        model = cls(
            build_encoder(meta["encoder"]),
            meta["n_sources"],
            meta["n_classes"],
            params,
            meta["confidence"],
            meta["rank"],
            meta["shared_metric"],
            meta["classifier_bias"],
            meta["task"],
            meta["source_names"],
            meta["label_set"],
            meta["vocab"],
            stats or None,
        )
        return model, meta.get("config", {})
