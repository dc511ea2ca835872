"""Retriever forward/backward pass.

Pipeline per sample::

    raw features -> tokens (seq_len x d_emb) -> adapter -> frozen encoder
    -> pooled hidden state -> classifier -> logits

Only the adapter matrix and the classifier are trainable. Gradients are
derived by hand; everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from carfl.rng import Stream, derive_seed

SEQ_LEN = 8
POOLINGS = ("mean", "eos")
MODES = ("adapter_and_classifier", "classifier_only")

_forward_calls = 0


def encoder_forward_count() -> int:
    """Number of :func:`encoder_forward` evaluations in this process."""
    return _forward_calls


def reset_encoder_forward_count() -> None:
    global _forward_calls
    _forward_calls = 0


@dataclass(frozen=True, eq=False)
class TokenFeatures:
    """Token rows of one sample ``(seq_len, d_emb)`` or a batch ``(B, seq_len, d_emb)``."""

    tokens: np.ndarray

    def __post_init__(self):
        if self.tokens.ndim not in (2, 3) or self.tokens.shape[-2] < 1:
            raise ValueError(f"bad token array shape {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("token features must be finite")

    @property
    def eos_index(self) -> int:
        return self.tokens.shape[-2] - 1


@dataclass(frozen=True, eq=False)
class SyntheticEncoder:
    """Seeded stand-in for a frozen transformer stack.

    ``layers`` holds ``depth`` affine maps applied rowwise, each followed by
    tanh. ``offsets`` are the per-position vectors added to the raw feature
    vector to form the token rows.
    """

    d_emb: int
    d_hidden: int
    seed: int
    depth: int
    pooling: str
    offsets: np.ndarray
    layers: tuple

    @classmethod
    def create(cls, d_emb: int, d_hidden: int, seed: int, depth: int = 2,
               pooling: str = "mean", seq_len: int = SEQ_LEN) -> "SyntheticEncoder":
        if pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
        if min(d_emb, d_hidden, depth, seq_len) < 1:
            raise ValueError("encoder dimensions must be positive")
        rng = Stream(derive_seed(seed, "encoder"))
        offsets = rng.uniform_range(-0.5, 0.5, (seq_len, d_emb))
        layers = []
        fan_in = d_emb
        for _ in range(depth):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform_range(-bound, bound, (d_hidden, fan_in))
            b = rng.uniform_range(-bound, bound, (d_hidden,))
            w.setflags(write=False)
            b.setflags(write=False)
            layers.append((w, b))
            fan_in = d_hidden
        offsets.setflags(write=False)
        return cls(d_emb, d_hidden, seed, depth, pooling, offsets, tuple(layers))

    @property
    def seq_len(self) -> int:
        return self.offsets.shape[0]

    def inputs(self, features: np.ndarray, ids: np.ndarray) -> np.ndarray:
        return features

    def fingerprint(self) -> bytes:
        parts = [self.offsets.tobytes()]
        for w, b in self.layers:
            parts += [w.tobytes(), b.tobytes()]
        return b"".join(parts)


@dataclass(frozen=True, eq=False)
class PrecomputedEncoder:
    """Table of pooled hidden states keyed by sample id (row index)."""

    table: np.ndarray

    def __post_init__(self):
        if self.table.ndim != 2:
            raise ValueError("hidden-state table must be 2-D")
        self.table.setflags(write=False)

    @property
    def d_hidden(self) -> int:
        return self.table.shape[1]

    def inputs(self, features: np.ndarray, ids: np.ndarray) -> np.ndarray:
        return ids

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.table)):
            raise KeyError(f"sample id outside table of {len(self.table)} rows")
        return self.table[ids]

    def fingerprint(self) -> bytes:
        return self.table.tobytes()


@dataclass(eq=False)
class AdapterParams:
    weight: np.ndarray

    @classmethod
    def identity(cls, d_emb: int) -> "AdapterParams":
        return cls(np.eye(d_emb))


@dataclass(eq=False)
class ClassifierParams:
    out_w: np.ndarray
    out_b: np.ndarray
    pre_w: Optional[np.ndarray] = None
    pre_b: Optional[np.ndarray] = None
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if (self.pre_w is None) != (self.pre_b is None):
            raise ValueError("pre-classifier needs both weight and bias")

    @property
    def has_pre(self) -> bool:
        return self.pre_w is not None

    @property
    def n_classes(self) -> int:
        return self.out_w.shape[0]


TENSOR_ORDER = ("adapter", "pre_w", "pre_b", "out_w", "out_b")


@dataclass(eq=False)
class ModelParams:
    """Trainable parameters: adapter matrix plus classifier head."""

    adapter: AdapterParams
    classifier: ClassifierParams
    mode: str = "adapter_and_classifier"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def named_tensors(self) -> dict[str, np.ndarray]:
        """All parameter tensors in canonical order (frozen ones included)."""
        c = self.classifier
        named = {"adapter": self.adapter.weight}
        if c.has_pre:
            named["pre_w"] = c.pre_w
            named["pre_b"] = c.pre_b
        named["out_w"] = c.out_w
        named["out_b"] = c.out_b
        return named

    def trainable_names(self) -> list[str]:
        names = list(self.named_tensors())
        if self.mode == "classifier_only":
            names.remove("adapter")
        return names

    def trainable(self) -> list[np.ndarray]:
        named = self.named_tensors()
        return [named[k] for k in self.trainable_names()]

    def with_tensors(self, named: dict[str, np.ndarray]) -> "ModelParams":
        """Copy with the given tensors replaced; missing names are kept."""
        cur = self.named_tensors()
        cur.update(named)
        c = self.classifier
        cls = ClassifierParams(cur["out_w"], cur["out_b"], cur.get("pre_w"),
                               cur.get("pre_b"), c.dropout)
        return ModelParams(AdapterParams(cur["adapter"]), cls, self.mode)

    def with_trainable(self, tensors: list[np.ndarray]) -> "ModelParams":
        return self.with_tensors(dict(zip(self.trainable_names(), tensors)))

    def copy(self) -> "ModelParams":
        return self.with_tensors({k: v.copy() for k, v in self.named_tensors().items()})

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.named_tensors().items()}


@dataclass(eq=False)
class Gradients:
    d_adapter: np.ndarray
    d_classifier: dict[str, np.ndarray] = field(default_factory=dict)

    def named(self) -> dict[str, np.ndarray]:
        return {"adapter": self.d_adapter, **self.d_classifier}

    def for_model(self, model: ModelParams) -> list[np.ndarray]:
        named = self.named()
        return [named[k] for k in model.trainable_names()]

    def norm(self, model: ModelParams) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.for_model(model))))


def init_model(d_emb: int, d_hidden: int, n_classes: int, seed: int,
               mode: str = "adapter_and_classifier", pre_classifier: bool = False,
               dropout: Optional[float] = None) -> ModelParams:
    """Identity adapter plus a uniformly initialised classifier head."""
    if dropout is None:
        dropout = 0.1 if pre_classifier else 0.0
    rng = Stream(derive_seed(seed, "classifier-init"))
    bound = 1.0 / np.sqrt(d_hidden)
    pre_w = pre_b = None
    if pre_classifier:
        pre_w = rng.uniform_range(-bound, bound, (d_hidden, d_hidden))
        pre_b = rng.uniform_range(-bound, bound, (d_hidden,))
    out_w = rng.uniform_range(-bound, bound, (n_classes, d_hidden))
    out_b = rng.uniform_range(-bound, bound, (n_classes,))
    cls = ClassifierParams(out_w, out_b, pre_w, pre_b, dropout)
    return ModelParams(AdapterParams.identity(d_emb), cls, mode)


def encode_tokens(x: np.ndarray, enc: SyntheticEncoder) -> TokenFeatures:
    """Expand raw feature vectors into ``seq_len`` token rows.

    Row ``t`` is ``x + offsets[t]``. Accepts a single vector or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != enc.d_emb or x.ndim not in (1, 2):
        raise ValueError(f"expected feature dimension {enc.d_emb}, got shape {x.shape}")
    return TokenFeatures(x[..., None, :] + enc.offsets)


def adapter_apply(adapter: AdapterParams, tf: TokenFeatures) -> TokenFeatures:
    w = adapter.weight
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[1] != tf.tokens.shape[-1]:
        raise ValueError(f"adapter {w.shape} does not match token width {tf.tokens.shape[-1]}")
    return TokenFeatures(tf.tokens @ w.T)


def _encoder_layers(enc: SyntheticEncoder, soft: np.ndarray) -> list[np.ndarray]:
    global _forward_calls
    _forward_calls += 1
    acts = [soft]
    a = soft
    for w, b in enc.layers:
        a = np.tanh(a @ w.T + b)
        acts.append(a)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite encoder activation")
    return acts


def _pool(enc: SyntheticEncoder, top: np.ndarray) -> np.ndarray:
    if enc.pooling == "eos":
        return top[..., -1, :]
    return top.mean(axis=-2)


def encoder_forward(enc: SyntheticEncoder, soft: TokenFeatures) -> np.ndarray:
    """Apply the frozen network rowwise and pool to ``d_hidden``."""
    if not isinstance(enc, SyntheticEncoder):
        raise TypeError("encoder_forward needs a synthetic encoder")
    if soft.tokens.shape[-1] != enc.d_emb:
        raise ValueError("token width does not match encoder")
    return _pool(enc, _encoder_layers(enc, soft.tokens)[-1])


def hidden_states(model: ModelParams, enc, inputs: np.ndarray) -> np.ndarray:
    """Pooled hidden states for a batch of encoder inputs (features or ids)."""
    if isinstance(enc, PrecomputedEncoder):
        return enc.lookup(inputs)
    tf = adapter_apply(model.adapter, encode_tokens(inputs, enc))
    return encoder_forward(enc, tf)


def _dropout_mask(rate: float, shape, rng: Optional[Stream]) -> np.ndarray:
    if rng is None:
        raise ValueError("training with dropout needs an rng stream")
    keep = rng.uniform(int(np.prod(shape))).reshape(shape) >= rate
    return keep / (1.0 - rate)


def _classifier(cls: ClassifierParams, h: np.ndarray, training: bool,
                rng: Optional[Stream]):
    if h.shape[-1] != cls.out_w.shape[1] and not cls.has_pre:
        raise ValueError(f"hidden width {h.shape[-1]} does not match classifier")
    cache = {"h": h}
    z = h
    if cls.has_pre:
        if h.shape[-1] != cls.pre_w.shape[1]:
            raise ValueError(f"hidden width {h.shape[-1]} does not match pre-classifier")
        act = np.tanh(h @ cls.pre_w.T + cls.pre_b)
        cache["act"] = act
        if training and cls.dropout > 0.0:
            mask = _dropout_mask(cls.dropout, act.shape, rng)
            cache["mask"] = mask
            act = act * mask
        z = act
    cache["z"] = z
    return z @ cls.out_w.T + cls.out_b, cache


def classifier_forward(cls: ClassifierParams, h: np.ndarray, training: bool = False,
                       rng: Optional[Stream] = None) -> np.ndarray:
    """Logits ``out(dropout(tanh(pre(h))))``, or ``out(h)`` without a pre-classifier."""
    return _classifier(cls, np.asarray(h, dtype=np.float64), training, rng)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(model: ModelParams, enc, inputs: np.ndarray, training: bool = False,
            rng: Optional[Stream] = None) -> np.ndarray:
    return classifier_forward(model.classifier, hidden_states(model, enc, inputs),
                              training, rng)


def loss_and_gradients(model: ModelParams, enc, inputs: np.ndarray, labels,
                       rng: Optional[Stream] = None,
                       training: bool = True) -> tuple[float, Gradients]:
    """Mean cross-entropy over the batch and its exact gradient.

    ``inputs`` are raw feature rows for a synthetic encoder or sample ids for
    a precomputed one. ``rng`` feeds the dropout masks and may be omitted when
    no dropout is active.
    """
    loss, grads, _ = loss_grad_logits(model, enc, inputs, labels, rng, training)
    return loss, grads


def loss_grad_logits(model: ModelParams, enc, inputs: np.ndarray, labels,
                     rng: Optional[Stream] = None, training: bool = True):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    cls = model.classifier
    if labels.min() < 0 or labels.max() >= cls.n_classes:
        raise ValueError(f"label outside [0, {cls.n_classes})")
    precomputed = isinstance(enc, PrecomputedEncoder)
    if precomputed and model.mode != "classifier_only":
        raise ValueError("precomputed hidden states only support classifier-only training")
    n = len(labels)

    if precomputed:
        h = enc.lookup(inputs)
    else:
        tokens = encode_tokens(inputs, enc).tokens
        soft = tokens @ model.adapter.weight.T
        acts = _encoder_layers(enc, soft)
        h = _pool(enc, acts[-1])

    logits, cache = _classifier(cls, h, training, rng)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))

    d_logits = np.exp(logp)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    grads = {"out_w": d_logits.T @ cache["z"], "out_b": d_logits.sum(axis=0)}
    d_z = d_logits @ cls.out_w
    if cls.has_pre:
        if "mask" in cache:
            d_z = d_z * cache["mask"]
        d_pre = d_z * (1.0 - cache["act"] ** 2)
        grads["pre_w"] = d_pre.T @ h
        grads["pre_b"] = d_pre.sum(axis=0)
        d_h = d_pre @ cls.pre_w
    else:
        d_h = d_z

    d_adapter = np.zeros_like(model.adapter.weight)
    if model.mode == "adapter_and_classifier":
        top = acts[-1]
        d_top = np.zeros_like(top)
        if enc.pooling == "eos":
            d_top[:, -1, :] = d_h
        else:
            d_top[:] = d_h[:, None, :] / top.shape[1]
        d_a = d_top
        for (w, _), a in zip(reversed(enc.layers), reversed(acts[1:])):
            d_a = (d_a * (1.0 - a * a)) @ w
        d_adapter = d_a.reshape(-1, enc.d_emb).T @ tokens.reshape(-1, enc.d_emb)

    ordered = {k: grads[k] for k in TENSOR_ORDER[1:] if k in grads}
    return loss, Gradients(d_adapter, ordered), logits


def retrieve_topk(logits, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, descending; ties go to the lower index."""
    logits = np.asarray(logits)
    if not 1 <= k <= logits.shape[-1]:
        raise ValueError(f"K={k} outside [1, {logits.shape[-1]}]")
    return [int(i) for i in np.argsort(-logits, kind="stable")[:k]]


def topk_batch(logits: np.ndarray, k: int) -> np.ndarray:
    if not 1 <= k <= logits.shape[-1]:
        raise ValueError(f"K={k} outside [1, {logits.shape[-1]}]")
    return np.argsort(-logits, axis=-1, kind="stable")[:, :k]


def sgd_step(model: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """``theta - lr * g`` over the trainable tensors."""
    g = grads.for_model(model)
    return model.with_trainable([p - lr * d for p, d in zip(model.trainable(), g)])


def set_mode(model: ModelParams, mode: str) -> ModelParams:
    return replace(model, mode=mode)
