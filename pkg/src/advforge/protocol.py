"""The six-model assessment protocol: train a cohort, craft adversarial sets
with ensembles of several sizes, measure transfer on the held-out model."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .analysis import evaluate_transfer
from .attacks import AdversarialSet, AttackConfig, craft_adversaries, extract_adversarial_set
from .data import LabeledDataset
from .models import Model, ModelSpec, build_model
from .training import TrainConfig, TrainReport, train


def derive_seed(base_seed: int, index: int) -> int:
    """Stable per-model seed from a cohort seed."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def train_cohort(train_ds: LabeledDataset, val_ds: LabeledDataset, spec: ModelSpec,
                 cfg: TrainConfig, count: int, base_seed: int,
                 id_prefix: str = "model") -> tuple[list[Model], list[TrainReport]]:
    """Train ``count`` models differing only in their derived seeds."""
    models, reports = [], []
    for i in range(count):
        seed = derive_seed(base_seed, i)
        model = build_model(spec, seed=seed, model_id=f"{id_prefix}-{i}")
        report = train(model, train_ds, val_ds, replace(cfg, seed=seed))
        models.append(model)
        reports.append(report)
    return models, reports


def craft_set(models: list[Model], images: np.ndarray, labels: np.ndarray,
              cfg: AttackConfig) -> AdversarialSet:
    """Craft candidates against the ensemble, keep those fooling every member."""
    candidates, _ = craft_adversaries(models, images, labels, cfg)
    return extract_adversarial_set(models, images, candidates, labels, cfg)


def transfer_suite(models: list[Model], holdout_idx: int, images: np.ndarray,
                   labels: np.ndarray, cfg: AttackConfig,
                   sizes: tuple[int, ...] = (1, 3, 5)) -> dict[int, AdversarialSet]:
    """Adversarial sets from the first k non-holdout models, for each size k."""
    pool = [m for i, m in enumerate(models) if i != holdout_idx]
    if max(sizes) > len(pool):
        raise ValueError(f"need {max(sizes)} crafting models, have {len(pool)}")
    return {size: craft_set(pool[:size], images, labels, cfg) for size in sizes}


def transfer_report(holdout: Model, sets: dict[int, AdversarialSet]) -> list[dict]:
    entries = []
    for size in sorted(sets):
        entry = evaluate_transfer(holdout, holdout.model_id, sets[size])
        entry["ensemble_size"] = size
        entries.append(entry)
    return entries
