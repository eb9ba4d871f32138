"""Seeded train-and-score runs on the synthetic benchmark."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import SynthSpec, gen_synthetic
from .model import ModelConfig, TgmModel, stack_config
from .train import TrainPlan, evaluate, fit, split_indices

DESK_EPOCHS = 20


def synthetic_split(seed: int, spec: SynthSpec = None):
    """Generate the dataset for ``seed`` and split it 80/20 by video index."""
    spec = replace(spec or SynthSpec(), seed=seed)
    videos = gen_synthetic(spec)
    train_idx, val_idx = split_indices(len(videos), seed)
    return [videos[i] for i in train_idx], [videos[i] for i in val_idx]


def train_and_score(config: ModelConfig, seed: int, epochs: int = DESK_EPOCHS,
                    spec: SynthSpec = None, split=None) -> float:
    """Validation per-frame mAP after training ``config`` with one seed.

    The seed drives data generation, the split, initialization and the
    shuffling order.  Learning-rate decay keeps the every-10-epochs rule.
    """
    train, val = split if split is not None else synthetic_split(seed, spec)
    model = TgmModel(config, seed=seed)
    model.set_prior_bias(train)
    fit(model, train, val, TrainPlan(epochs=epochs, seed=seed))
    return evaluate(model, val)["map"]


def baseline_config(num_classes=5, d=16) -> ModelConfig:
    """Per-frame classifier with no temporal layers."""
    return ModelConfig(num_classes=num_classes, d=d)


def tgm_config(source="learned_gaussian_mixture", L=5, n_layers=3, num_classes=5, d=16,
               channels=8, M=8, form="tgm_channel_combine_1x1") -> ModelConfig:
    return stack_config(num_classes, d, n_layers, form, source, channels, L, M)


def conv1d_config(L, n_layers=3, num_classes=5, d=16, channels=8) -> ModelConfig:
    """Standard 1-D convolutions in place of the TGM layers of :func:`tgm_config`."""
    return stack_config(num_classes, d, n_layers, "conv1d_standard", "unconstrained_free",
                        channels, L, 1)


def median_score(config_fn, seeds, **kwargs) -> tuple:
    scores = [train_and_score(config_fn(), s, **kwargs) for s in seeds]
    return float(np.median(scores)), scores
