"""Shared corpus/feature builders for model-level tests."""

from dataclasses import dataclass

import numpy as np

from codex_ensemble.data import apply_vocab, build_code_vocab, label_matrix, stratified_split
from codex_ensemble.features import FeatureConfig, FeatureSpace
from codex_ensemble.models import ModelConfig
from codex_ensemble.nn import TrainConfig
from codex_ensemble.synth import GeneratorSpec, generate_corpus

SPLITS = ("train", "dev", "test")


@dataclass
class Prepared:
    spec: GeneratorSpec
    tables: dict
    vocab: object
    space: FeatureSpace
    episodes: dict
    F: dict
    Y: dict
    P: dict


def prepare(spec: GeneratorSpec, ratios=(0.7, 0.1, 0.2), dim=32, split_seed=0) -> Prepared:
    eps, tables = generate_corpus(spec)
    vocab = build_code_vocab(eps, 3)
    eps, _ = apply_vocab(eps, vocab)
    parts = dict(zip(SPLITS, stratified_split(eps, ratios, split_seed)))
    space = FeatureSpace.fit(parts["train"], FeatureConfig(dim_per_sentence=dim))
    F = {k: space.transform(v) for k, v in parts.items()}
    Y, P = {}, {}
    for k, v in parts.items():
        Y[k], P[k] = label_matrix(v, vocab)
    return Prepared(spec, tables, vocab, space, parts, F, Y, P)


def small_config(seed=0, **kw) -> ModelConfig:
    base = dict(hidden={"lab": (32,), "medications": (32,), "radiology": (32, 32), "admission": (8,)},
                confidence_hidden=(16,),
                train=TrainConfig(seed=seed, max_epochs=60, batch_size=128))
    base.update(kw)
    return ModelConfig(**base)


def args(d: Prepared):
    """(train_fs, Y_train, dev_fs, Y_dev) in the order model functions take them."""
    return d.F["train"], d.Y["train"], d.F["dev"], d.Y["dev"]


def finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))
