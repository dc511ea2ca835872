"""FedAvg over simulated clients, plus the matched centralized baseline.

Every random stream a client uses is derived from ``(seed, purpose, client,
counter)`` so results do not depend on scheduling: clients can run in worker
processes or one after another and produce the same bits.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import multiprocessing as mp
import numpy as np
from threadpoolctl import threadpool_limits

from carfl import dp as dpmod
from carfl.data import Dataset
from carfl.model import (
    ModelParams,
    PrecomputedEncoder,
    forward,
    loss_grad_logits,
    sgd_step,
)
from carfl.rng import Stream, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    m: int = 2
    T: int = 5
    E: int = 2
    batch_size: int = 4
    lr: float = 1e-3
    aggregation: str = "proportional"
    partition: str = "even"
    proportions: tuple = ()
    seed: int = 0
    parallel: bool = True
    steps_per_round: int = 0
    dp: dpmod.DpConfig = field(default_factory=dpmod.DpConfig)
    keep_trace: bool = False

    def __post_init__(self):
        if self.m < 1 or self.T < 1 or self.E < 1 or self.batch_size < 1:
            raise ValueError("m, T, E and batch_size must all be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.aggregation not in ("proportional", "uniform"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.partition not in ("even", "proportions"):
            raise ValueError(f"unknown partition scheme {self.partition!r}")
        if self.steps_per_round < 0:
            raise ValueError("steps_per_round must be >= 0")


@dataclass
class ClientState:
    cid: int
    shard: Dataset
    lr: float
    dp_cfg: dpmod.DpConfig
    dp_state: dpmod.DpState
    seed: int

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ValueError(f"client {self.cid} has an empty shard")


@dataclass
class ClientRound:
    cid: int
    loss: float
    accuracy: float
    delta_norm: float
    clipped: bool
    C: float
    compute_ms: float
    grad_norms: list = field(default_factory=list)
    clip_events: int = 0
    dp_steps: int = 0


@dataclass
class RoundRecord:
    round: int
    clients: list
    val_loss: float
    val_accuracy: float
    wall_ms: float = 0.0
    distributed_ms: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "round": self.round,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "clients": [
                {k: v for k, v in asdict(c).items()
                 if k not in ("grad_norms",) and (timing or k != "compute_ms")}
                for c in self.clients
            ],
        }
        if timing:
            out["wall_ms"] = self.wall_ms
            out["distributed_ms"] = self.distributed_ms
        return out


@dataclass
class TrainResult:
    model: ModelParams
    records: list
    clients: list
    wall_ms: float
    models: list = field(default_factory=list)


def partition(n: int, m: int, scheme: str = "even", proportions: Sequence[float] = (),
              seed: int = 0) -> list[np.ndarray]:
    """Disjoint index shards covering ``range(n)``, each sorted ascending.

    Sizes are ``floor(p_i * n)`` with the remainder handed out one at a time
    by largest fractional part (lower client index on ties).
    """
    if m < 1 or m > n:
        raise ValueError(f"cannot split {n} samples across {m} clients")
    if scheme == "even":
        props = np.full(m, 1.0 / m)
    else:
        props = np.asarray(proportions, dtype=np.float64)
        if len(props) != m:
            raise ValueError(f"{len(props)} proportions given for {m} clients")
        if abs(props.sum() - 1.0) > 1e-9 or np.any(props < 0):
            raise ValueError(f"proportions must be >= 0 and sum to 1, got {props.sum()!r}")
    raw = props * n
    sizes = np.floor(raw + 1e-9).astype(int)
    frac = raw - sizes
    for i in sorted(range(m), key=lambda i: (-frac[i], i))[: n - sizes.sum()]:
        sizes[i] += 1
    perm = Stream(derive_seed(seed, "partition")).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [np.sort(perm[bounds[i]:bounds[i + 1]]) for i in range(m)]


def aggregation_weights(sizes: Sequence[int], scheme: str) -> list[float]:
    if scheme == "uniform":
        return [1.0 / len(sizes)] * len(sizes)
    total = float(sum(sizes))
    return [s / total for s in sizes]


def aggregate(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Weighted coordinate-wise average of the trainable tensors.

    Terms are summed in list order (ascending client id); frozen tensors are
    taken from the first model untouched.
    """
    if not models or len(models) != len(weights):
        raise ValueError("need one weight per model")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ValueError(f"aggregation weights sum to {sum(weights)!r}, not 1")
    names = models[0].trainable_names()
    ref = models[0].named_tensors()
    for mdl in models[1:]:
        other = mdl.named_tensors()
        if mdl.trainable_names() != names or any(other[k].shape != ref[k].shape for k in names):
            raise ValueError("cannot aggregate models with different shapes")
    out = {}
    for k in names:
        acc = weights[0] * models[0].named_tensors()[k]
        for mdl, w in zip(models[1:], weights[1:]):
            acc = acc + w * mdl.named_tensors()[k]
        out[k] = acc
    return models[0].with_tensors(out)


def make_clients(train: Dataset, cfg: FedConfig) -> list[ClientState]:
    shards = partition(len(train), cfg.m, cfg.partition, cfg.proportions, cfg.seed)
    return [
        ClientState(i, train.subset(idx), cfg.lr, cfg.dp,
                    dpmod.init_dp(cfg.dp, cfg.m), derive_seed(cfg.seed, "client", i))
        for i, idx in enumerate(shards)
    ]


def _epoch_batches(client: ClientState, epoch: int, batch_size: int):
    perm = Stream(derive_seed(client.seed, "shuffle", epoch)).permutation(len(client.shard))
    for start in range(0, len(perm), batch_size):
        yield perm[start:start + batch_size]


def _sgd_batches(client: ClientState, round_index: int, E: int, batch_size: int,
                 steps: int):
    """(stream key, batch indices) pairs for one round of local training."""
    if steps:
        for s in range(steps):
            perm = Stream(derive_seed(client.seed, "step", round_index, s)).permutation(
                len(client.shard))
            yield ("step", round_index, s), perm[:batch_size]
        return
    for e in range(E):
        epoch = round_index * E + e
        for b, idx in enumerate(_epoch_batches(client, epoch, batch_size)):
            yield ("epoch", epoch, b), idx


def local_update(client: ClientState, global_model: ModelParams, enc, cfg: FedConfig,
                 round_index: int) -> tuple[ModelParams, ClientRound, ClientState]:
    """Local SGD from the broadcast model, then DP at the communication boundary.

    Returns the model sent back to the aggregator, the round statistics and
    the client's updated state (only the DP state changes).
    """
    t0 = time.perf_counter()
    shard = client.shard
    model = global_model
    state = client.dp_state
    active = dpmod.dp_active(client.dp_cfg, round_index)
    per_iter = active and client.dp_cfg.per_iteration
    losses, correct, seen, gnorms = [], 0, 0, []
    clip_events = dp_steps = 0
    C_used = state.C
    dropout_rng = None
    for key, idx in _sgd_batches(client, round_index, cfg.E, cfg.batch_size,
                                 cfg.steps_per_round):
        if key[0] == "step":
            dropout_rng = Stream(derive_seed(client.seed, "dropout", *key))
        elif dropout_rng is None or key[2] == 0:
            dropout_rng = Stream(derive_seed(client.seed, "dropout", *key[:2]))
        inputs = enc.inputs(shard.features[idx], shard.ids[idx])
        labels = shard.labels[idx]
        loss, grads, logits = loss_grad_logits(model, enc, inputs, labels, dropout_rng)
        losses.append(loss)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        seen += len(labels)
        gnorms.append(grads.norm(model))
        stepped = sgd_step(model, grads, client.lr)
        if per_iter:
            prev = model.trainable()
            delta = [a - b for a, b in zip(stepped.trainable(), prev)]
            noise_rng = Stream(derive_seed(client.seed, "noise", *key))
            new, clipped = dpmod.dp_transform(prev, delta, state, client.dp_cfg, noise_rng)
            clip_events += clipped
            dp_steps += 1
            if client.dp_cfg.mode == "adaptive":
                state = dpmod.adapt_threshold(state, client.dp_cfg, dpmod.flat_norm(delta))
            stepped = model.with_trainable(new)
        model = stepped

    g_prev = global_model.trainable()
    delta = [a - b for a, b in zip(model.trainable(), g_prev)]
    delta_norm = dpmod.flat_norm(delta)
    clipped = False
    if active and not per_iter:
        noise_rng = Stream(derive_seed(client.seed, "noise", "round", round_index))
        new, clipped = dpmod.dp_transform(g_prev, delta, state, client.dp_cfg, noise_rng)
        clip_events += clipped
        dp_steps += 1
        if client.dp_cfg.mode == "adaptive":
            state = dpmod.adapt_threshold(state, client.dp_cfg, delta_norm)
        model = global_model.with_trainable(new)
    elif per_iter:
        clipped = clip_events > 0

    stats = ClientRound(
        cid=client.cid,
        loss=float(np.mean(losses)),
        accuracy=correct / seen,
        delta_norm=delta_norm,
        clipped=bool(clipped),
        C=C_used,
        compute_ms=(time.perf_counter() - t0) * 1e3,
        grad_norms=gnorms,
        clip_events=clip_events,
        dp_steps=dp_steps,
    )
    return model, stats, replace(client, dp_state=state)


def evaluate_model(model: ModelParams, enc, data: Dataset) -> tuple[float, float]:
    """(mean cross-entropy, top-1 accuracy) in eval mode."""
    if len(data) == 0:
        return float("nan"), float("nan")
    logits = forward(model, enc, enc.inputs(data.features, data.ids))
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(len(data)), data.labels]))
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return loss, acc


_worker_enc = None


def _init_worker(enc) -> None:
    global _worker_enc
    _worker_enc = enc
    threadpool_limits(1)


def _worker_update(client, model, cfg, round_index):
    return local_update(client, model, _worker_enc, cfg, round_index)


class ClientPool:
    """Runs one round of local updates, in worker processes or inline."""

    def __init__(self, enc, parallel: bool, n_workers: int):
        self.enc = enc
        self.executor = None
        if parallel and n_workers > 1:
            ctx = mp.get_context("fork")
            self.executor = ProcessPoolExecutor(n_workers, mp_context=ctx,
                                                initializer=_init_worker, initargs=(enc,))

    def run(self, clients, model, cfg, round_index):
        if self.executor is None:
            with threadpool_limits(1):
                return [local_update(c, model, self.enc, cfg, round_index) for c in clients]
        futures = [self.executor.submit(_worker_update, c, model, cfg, round_index)
                   for c in clients]
        return [f.result() for f in futures]

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_training(cfg: FedConfig, enc, train: Dataset, val: Dataset,
                 init: ModelParams, on_record=None) -> TrainResult:
    """T rounds of broadcast, local update, aggregate, validate."""
    _check_encoder(enc, init)
    clients = make_clients(train, cfg)
    weights = aggregation_weights([len(c.shard) for c in clients], cfg.aggregation)
    fingerprint = enc.fingerprint()
    model = init
    records, models = [], [init] if cfg.keep_trace else []
    t_start = time.perf_counter()
    with ClientPool(enc, cfg.parallel, cfg.m) as pool:
        for t in range(cfg.T):
            r0 = time.perf_counter()
            try:
                results = pool.run(clients, model, cfg, t)
            except Exception as exc:
                raise RuntimeError(f"round {t}: client update failed: {exc}") from exc
            a0 = time.perf_counter()
            model = aggregate([r[0] for r in results], weights)
            agg_ms = (time.perf_counter() - a0) * 1e3
            clients = [r[2] for r in results]
            if enc.fingerprint() != fingerprint:
                raise RuntimeError("frozen encoder changed during training")
            val_loss, val_acc = evaluate_model(model, enc, val)
            stats = [r[1] for r in results]
            rec = RoundRecord(t, stats, val_loss, val_acc,
                              wall_ms=(time.perf_counter() - r0) * 1e3,
                              distributed_ms=max(s.compute_ms for s in stats) + agg_ms)
            records.append(rec)
            if cfg.keep_trace:
                models.append(model)
            if on_record is not None:
                on_record(rec)
            log.info("round %d val_loss=%.4f val_acc=%.4f", t, val_loss, val_acc)
    return TrainResult(model, records, clients, (time.perf_counter() - t_start) * 1e3, models)


def run_centralized(cfg: FedConfig, enc, train: Dataset, val: Dataset,
                    init: ModelParams, epochs: Optional[int] = None,
                    on_record=None) -> TrainResult:
    """Plain SGD over the whole training set, one record per epoch.

    Uses the batching and seeding rules of client 0 in a one-client
    federation, so ``run_training`` with ``m=1`` and DP off reproduces it
    bit for bit.
    """
    _check_encoder(enc, init)
    epochs = cfg.T * cfg.E if epochs is None else epochs
    one = replace(cfg, m=1, T=epochs, E=1, dp=dpmod.DpConfig(), partition="even")
    client = make_clients(train, one)[0]
    model = init
    records = []
    t_start = time.perf_counter()
    with threadpool_limits(1):
        for k in range(epochs):
            r0 = time.perf_counter()
            model, stats, client = local_update(client, model, enc, one, k)
            val_loss, val_acc = evaluate_model(model, enc, val)
            wall = (time.perf_counter() - r0) * 1e3
            rec = RoundRecord(k, [stats], val_loss, val_acc, wall, stats.compute_ms)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return TrainResult(model, records, [client], (time.perf_counter() - t_start) * 1e3)


def _check_encoder(enc, model: ModelParams) -> None:
    if isinstance(enc, PrecomputedEncoder) and model.mode != "classifier_only":
        raise ValueError("precomputed hidden states require classifier-only mode")
