"""Top-K evaluation, the MIPS baseline and the four-way retriever comparison."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from carfl.data import Dataset
from carfl.model import (
    AdapterParams,
    ModelParams,
    PrecomputedEncoder,
    forward,
    hidden_states,
    init_model,
    topk_batch,
)


@dataclass(eq=False)
class EmbeddingIndex:
    """Per-class reference vectors searched by raw inner product.

    ``adapter`` is the adapter the rows were built with; queries are encoded
    through the same one.
    """

    doc_vectors: np.ndarray
    adapter: Optional[AdapterParams] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.doc_vectors)):
            raise ValueError("index rows must be finite")

    @property
    def n_classes(self) -> int:
        return self.doc_vectors.shape[0]


def _pooled(enc, adapter: Optional[AdapterParams], data: Dataset) -> np.ndarray:
    if isinstance(enc, PrecomputedEncoder):
        return enc.lookup(data.ids)
    if adapter is None:
        adapter = AdapterParams.identity(enc.d_emb)
    shell = ModelParams(adapter, init_model(1, 1, 1, 0).classifier)
    return hidden_states(shell, enc, data.features)


def build_index(enc, adapter: Optional[AdapterParams], train: Dataset) -> EmbeddingIndex:
    """Row ``c`` is the mean pooled hidden state of the class-``c`` training samples."""
    h = _pooled(enc, adapter, train)
    rows = np.empty((train.n_classes, h.shape[1]))
    for c in range(train.n_classes):
        members = train.labels == c
        if not members.any():
            raise ValueError(f"class {c} has no training samples")
        rows[c] = h[members].mean(axis=0)
    return EmbeddingIndex(rows, adapter)


def mips_scores(index: EmbeddingIndex, queries: np.ndarray) -> np.ndarray:
    return np.asarray(queries) @ index.doc_vectors.T


def mips_retrieve(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[int]:
    """Labels by descending inner product with ``query``; ties go to the lower label."""
    if not 1 <= k <= index.n_classes:
        raise ValueError(f"K={k} outside [1, {index.n_classes}]")
    scores = mips_scores(index, np.asarray(query)[None, :])
    return [int(i) for i in topk_batch(scores, k)[0]]


def scores_for(model_or_index, enc, data: Dataset) -> np.ndarray:
    if isinstance(model_or_index, EmbeddingIndex):
        return mips_scores(model_or_index, _pooled(enc, model_or_index.adapter, data))
    return forward(model_or_index, enc, enc.inputs(data.features, data.ids))


def evaluate(model_or_index, enc, data: Dataset, ks: Sequence[int] = (1,)) -> dict[int, float]:
    """Fraction of samples whose label is among the top-K, for each K."""
    if len(data) == 0:
        raise ValueError("evaluation set is empty")
    scores = scores_for(model_or_index, enc, data)
    order = topk_batch(scores, max(ks))
    hits = order == data.labels[:, None]
    return {k: float(hits[:, :k].any(axis=1).mean()) for k in ks}


@dataclass
class Comparison:
    frozen_mips: float
    soft_mips: float
    classifier_only: float
    combined: float

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("MIPS (frozen encoder)", self.frozen_mips),
            ("soft embeddings + MIPS", self.soft_mips),
            ("classifier head only", self.classifier_only),
            ("soft embeddings + classifier", self.combined),
        ]


def four_way_comparison(train: Dataset, test: Dataset, enc, epochs: int, lr: float,
                        seed: int = 0, batch_size: int = 4, pre_classifier: bool = False,
                        lr_joint: Optional[float] = None) -> Comparison:
    """Top-1 of MIPS, trained-adapter MIPS, classifier-only and adapter+classifier.

    The trained-adapter MIPS row reuses the adapter of the joint run with its
    classifier thrown away.
    """
    from carfl.federation import FedConfig, run_centralized

    frozen = evaluate(build_index(enc, None, train), enc, test)[1]
    d_hidden = enc.d_hidden
    n_classes = train.n_classes

    def train_mode(mode, rate):
        init = init_model(getattr(enc, "d_emb", 1), d_hidden, n_classes, seed,
                          mode=mode, pre_classifier=pre_classifier)
        if epochs == 0:
            return init
        cfg = FedConfig(m=1, T=epochs, E=1, lr=rate, batch_size=batch_size, seed=seed,
                        parallel=False)
        return run_centralized(cfg, enc, train, test, init).model

    cls_only = train_mode("classifier_only", lr)
    joint = train_mode("adapter_and_classifier", lr if lr_joint is None else lr_joint)
    soft = evaluate(build_index(enc, joint.adapter, train), enc, test)[1]
    return Comparison(
        frozen_mips=frozen,
        soft_mips=soft,
        classifier_only=evaluate(cls_only, enc, test)[1],
        combined=evaluate(joint, enc, test)[1],
    )


def accuracy_table(rows: Sequence[tuple[str, float]]) -> str:
    width = max(len(name) for name, _ in rows)
    lines = [f"{'method'.ljust(width)}  top-1 (%)", "-" * (width + 11)]
    lines += [f"{name.ljust(width)}  {100 * acc:8.2f}" for name, acc in rows]
    return "\n".join(lines)
