"""Builds dataset, encoder and initial model from a :class:`RunConfig`.

Everything is a pure function of the config, so the aggregator and every
networked client reconstruct identical objects from the same settings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from carfl.config import ConfigError, RunConfig
from carfl.data import Dataset, HiddenStateFileError, gen_synthetic, load_hidden_states, split_holdout
from carfl.federation import FedConfig
from carfl.model import ModelParams, PrecomputedEncoder, SyntheticEncoder, hidden_states, init_model


class DataError(RuntimeError):
    pass


@dataclass
class Setup:
    enc: object
    data: Dataset
    train: Dataset
    val: Dataset
    init: ModelParams
    fed: FedConfig


def load_dataset(rc: RunConfig) -> Dataset:
    if rc["data.source"] == "file":
        try:
            return load_hidden_states(rc["data.path"])
        except OSError as exc:
            raise DataError(f"cannot read {rc['data.path']}: {exc}") from None
        except HiddenStateFileError as exc:
            raise DataError(f"{rc['data.path']}: {exc}") from None
    return gen_synthetic(rc["data.n_per_class"], rc["data.n_classes"], rc["data.dim"],
                         rc["data.spread"], rc["data.seed"])


def synthetic_encoder(rc: RunConfig, d_emb: int) -> SyntheticEncoder:
    return SyntheticEncoder.create(d_emb, rc["encoder.d_hidden"], rc["encoder.seed"],
                                   depth=rc["encoder.depth"], pooling=rc["encoder.pooling"])


def precompute(enc: SyntheticEncoder, data: Dataset) -> Dataset:
    """Pooled hidden states of ``data`` under the frozen encoder (identity adapter)."""
    shell = init_model(enc.d_emb, enc.d_hidden, data.n_classes, 0)
    return Dataset(hidden_states(shell, enc, data.features), data.labels, data.n_classes)


def build_setup(rc: RunConfig) -> Setup:
    rc.validate()
    fed = rc.fed_config()
    data = load_dataset(rc)
    if rc["encoder.kind"] == "precomputed":
        if rc["data.source"] == "synthetic":
            data = precompute(synthetic_encoder(rc, data.dim), data)
        enc = PrecomputedEncoder(np.array(data.features))
        d_emb = 1
    else:
        enc = synthetic_encoder(rc, data.dim)
        d_emb = data.dim
    train, val = split_holdout(data, rc["data.holdout"], rc["data.seed"])
    if len(train) < fed.m:
        raise ConfigError(f"{len(train)} training samples cannot feed {fed.m} clients")
    init = init_model(d_emb, enc.d_hidden, data.n_classes, rc["model.seed"],
                      mode=rc["model.mode"], pre_classifier=rc["model.pre_classifier"],
                      dropout=rc["model.dropout"] if rc["model.pre_classifier"] else 0.0)
    return Setup(enc, data, train, val, init, fed)
