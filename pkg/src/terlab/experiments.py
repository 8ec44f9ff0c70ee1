"""Experiment recipes shared by the command line and the acceptance suite:
data preparation, pretraining, fine-tuning, end-to-end training and
antenna-type classification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import Paradigm, TerMode, TrainConfig
from .model import MultiModalModel
from .sim import StationSample, TokenizedStation, TokenStats, split_dataset, tokenize_station
from .train import (
    History,
    classification_accuracy,
    evaluate_matching,
    pretrain,
    train_classifier,
    train_matching,
)

DEFAULT_RATIOS = (0.7, 0.15, 0.15)


@dataclass
class Splits:
    train: list[TokenizedStation]
    val: list[TokenizedStation]
    test: list[TokenizedStation]
    stats: TokenStats

    @property
    def visual_width(self) -> int:
        return self.train[0].visual[0].shape[1]


def prepare(stations: Sequence[StationSample], split_seed: int = 0, ratios=DEFAULT_RATIOS) -> Splits:
    """Split by station, fit token statistics on train, tokenize everything."""
    train, val, test = split_dataset(stations, ratios, split_seed)
    stats = TokenStats.fit(train)
    tok = lambda part: [tokenize_station(st, stats) for st in part]
    return Splits(tok(train), tok(val), tok(test), stats)


def new_model(cfg: TrainConfig, splits: Splits) -> MultiModalModel:
    return MultiModalModel(cfg, splits.visual_width)


@dataclass
class PretrainResult:
    model: MultiModalModel
    history: History


def run_pretrain(cfg: TrainConfig, splits: Splits, on_epoch: Callable | None = None) -> PretrainResult:
    model = new_model(cfg, splits)
    history = pretrain(model, splits.train, splits.val, cfg, on_epoch)
    return PretrainResult(model, history)


@dataclass
class MatchingResult:
    model: MultiModalModel
    history: History
    metrics: dict[str, dict[int, float]]
    pretrain_history: History | None = None


def finetune(model: MultiModalModel, cfg: TrainConfig, splits: Splits,
             on_epoch: Callable | None = None) -> MatchingResult:
    """Supervised matching on top of an already pretrained model."""
    history = train_matching(model, splits.train, splits.val, cfg, use_tel=False, on_epoch=on_epoch)
    metrics = evaluate_matching(model, splits.test, cfg.match_temperature)
    return MatchingResult(model, history, metrics)


def run_pretrain_sft(cfg: TrainConfig, splits: Splits, pretrained: PretrainResult | None = None) -> MatchingResult:
    pre = pretrained or run_pretrain(cfg, splits)
    result = finetune(pre.model, cfg, splits)
    result.pretrain_history = pre.history
    return result


def run_end2end(cfg: TrainConfig, splits: Splits, on_epoch: Callable | None = None) -> MatchingResult:
    """Matching objective from a fresh model, with the entropy loss when enabled."""
    model = new_model(cfg, splits)
    history = train_matching(model, splits.train, splits.val, cfg,
                             use_tel=cfg.ter_mode is TerMode.ETE_PLUS_TEL, on_epoch=on_epoch)
    metrics = evaluate_matching(model, splits.test, cfg.match_temperature)
    return MatchingResult(model, history, metrics)


def run_matching(cfg: TrainConfig, splits: Splits) -> MatchingResult:
    if cfg.paradigm is Paradigm.END2END:
        return run_end2end(cfg, splits)
    return run_pretrain_sft(cfg, splits)


def majority_baseline(train: Sequence[TokenizedStation], test: Sequence[TokenizedStation]) -> float:
    """Accuracy of always predicting the most frequent training class."""
    counts = np.bincount([lab for ts in train for lab in ts.labels], minlength=4)
    top = int(np.argmax(counts))
    labels = [lab for ts in test for lab in ts.labels]
    return sum(lab == top for lab in labels) / len(labels)


def run_classify(cfg: TrainConfig, splits: Splits) -> tuple[MultiModalModel, float]:
    model = new_model(cfg, splits)
    train_classifier(model, splits.train, cfg)
    return model, classification_accuracy(model, splits.test)


def first_epoch_reaching(curve: Sequence[float], target: float) -> int | None:
    """1-based number of epochs needed for ``curve`` to reach ``target``."""
    for i, v in enumerate(curve):
        if v >= target - 1e-12:
            return i + 1
    return None


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = [float(v) for v in values]
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, math.sqrt(var)
