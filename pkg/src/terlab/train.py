"""Training loops: contrastive pretraining, matching fine-tuning / end-to-end
training, and antenna-type classification."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import TerMode, TrainConfig
from .evaluation import matching_metrics
from .model import MultiModalModel
from .objectives import cross_entropy, info_nce, matching_loss, matching_scores
from .optim import lr_at, make_optimizer
from .sim import TokenizedStation, substream
from .ter import entropy_summary, mean_token_entropy, total_loss

log = logging.getLogger(__name__)

STREAM_BATCH = 11
STAGE_PRETRAIN, STAGE_SFT, STAGE_CLASSIFY = 1, 2, 3
EVAL_CHUNK = 16


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    entropy: list[dict] = field(default_factory=list)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) < 2:
        # a lone tail item has no contrastive negatives; fold it into the previous batch
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _log_entropy(history: History, epoch: int, step: int, feats, model: MultiModalModel) -> None:
    idx = 0 if model.cfg.tel_features == "pre" else 1
    for m, pair in feats.items():
        mean_h, first_h = entropy_summary(pair[idx])
        history.entropy.append({"epoch": epoch, "step": step, "modality": m,
                                "mean_entropy": mean_h, "first_token_entropy": first_h})


def _with_tel(model: MultiModalModel, task: Tensor, feats, use_tel: bool) -> tuple[Tensor, float]:
    cfg = model.cfg
    if use_tel and cfg.ter_mode is TerMode.ETE_PLUS_TEL:
        tel = mean_token_entropy(model.entropy_features(feats))
        return total_loss(task, tel, cfg.lam), tel.item()
    with ad.no_grad():
        tel_val = mean_token_entropy(model.entropy_features(feats)).item()
    return task, tel_val


# ---------------------------------------------------------------------------
# Evaluation


def embed_stations(model: MultiModalModel, stations: Sequence[TokenizedStation]):
    """Per-station (antenna embeddings, signal embeddings) as arrays, no tape."""
    out = []
    for c in range(0, len(stations), EVAL_CHUNK):
        chunk = stations[c : c + EVAL_CHUNK]
        vis = [v for ts in chunk for v in ts.visual]
        geo = [g for ts in chunk for g in ts.geometry]
        sig = [s for ts in chunk for s in ts.signal]
        va, _ = model.embed_antennas(vis, geo)
        vs, _ = model.embed_signals(sig)
        ia = js = 0
        for ts in chunk:
            m, n = len(ts.visual), len(ts.signal)
            out.append((va.data[ia : ia + m], vs.data[js : js + n]))
            ia += m
            js += n
    return out


def evaluate_matching(model: MultiModalModel, stations: Sequence[TokenizedStation],
                      temperature: float, ks=(1, 3)) -> dict[str, dict[int, float]]:
    per_station = []
    for ts, (va, vs) in zip(stations, embed_stations(model, stations)):
        scores = matching_scores(Tensor(va), Tensor(vs), temperature).data
        per_station.append((scores, ts.station.pairs, ts.station.generations))
    return matching_metrics(per_station, ks)


# ---------------------------------------------------------------------------
# Contrastive pretraining


def pretrain(model: MultiModalModel, train: Sequence[TokenizedStation],
             val: Sequence[TokenizedStation], cfg: TrainConfig | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> History:
    """Symmetric InfoNCE between fused antenna embeddings and signal embeddings,
    plus ``lambda * TEL`` when ``ter_mode`` is EtePlusTel."""
    cfg = cfg or model.cfg
    items = [(si, a, s) for si, ts in enumerate(train) for a, s in ts.station.pairs]
    if len(items) < 2:
        raise ValueError("pretraining needs at least two affiliated pairs")
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.weight_decay)
    rng = substream(cfg.seed, STREAM_BATCH, STAGE_PRETRAIN)
    history = History()
    for epoch in range(cfg.total_epochs):
        batches = _batches(len(items), cfg.batch_size, rng)
        losses, tasks, tels = [], [], []
        for bi, idx in enumerate(batches):
            lr = lr_at(epoch + bi / len(batches), cfg)
            picked = [items[i] for i in idx]
            with Tape():
                va, feats = model.embed_antennas([train[si].visual[a] for si, a, _ in picked],
                                                 [train[si].geometry[a] for si, a, _ in picked])
                vs, feats_s = model.embed_signals([train[si].signal[s] for si, _, s in picked])
                feats.update(feats_s)
                task = info_nce(va, vs, cfg.temperature)
                loss, tel_val = _with_tel(model, task, feats, use_tel=True)
                grads = ad.backward(loss)
            opt.step(grads, lr)
            _log_entropy(history, epoch, bi, feats, model)
            losses.append(loss.item())
            tasks.append(task.item())
            tels.append(tel_val)
        metrics = evaluate_matching(model, val, cfg.temperature) if val else None
        row = {
            "epoch": epoch,
            "loss": math.fsum(losses) / len(losses),
            "task_loss": math.fsum(tasks) / len(tasks),
            "tel": math.fsum(tels) / len(tels),
            "lr": lr,
            "val_acc1": metrics["overall"][1] if metrics else float("nan"),
            "val_acc3": metrics["overall"][3] if metrics else float("nan"),
        }
        history.epochs.append(row)
        log.info("pretrain epoch %d loss %.4f acc@1 %.3f", epoch, row["loss"], row["val_acc1"])
        if on_epoch:
            on_epoch(row)
    return history


# ---------------------------------------------------------------------------
# Matching: supervised fine-tuning or end-to-end


def train_matching(model: MultiModalModel, train: Sequence[TokenizedStation],
                   val: Sequence[TokenizedStation], cfg: TrainConfig | None = None,
                   use_tel: bool = False,
                   on_epoch: Callable[[dict], None] | None = None) -> History:
    """Balanced-BCE matching over whole stations. With ``use_tel`` the entropy
    loss is added as in pretraining (used for end-to-end runs)."""
    cfg = cfg or model.cfg
    frozen = set(model.parameters()) - model.head_names() if cfg.freeze_encoders else ()
    opt = make_optimizer(cfg.sft_optimizer, model.parameters(), cfg.weight_decay, frozen)
    rng = substream(cfg.seed, STREAM_BATCH, STAGE_SFT)
    history = History()
    for epoch in range(cfg.total_epochs):
        batches = _batches(len(train), cfg.sft_stations_per_batch, rng)
        losses = []
        for bi, idx in enumerate(batches):
            lr = lr_at(epoch + bi / len(batches), cfg)
            chunk = [train[i] for i in idx]
            with Tape():
                va, feats = model.embed_antennas([v for ts in chunk for v in ts.visual],
                                                 [g for ts in chunk for g in ts.geometry])
                vs, feats_s = model.embed_signals([s for ts in chunk for s in ts.signal])
                feats.update(feats_s)
                task = None
                ia = js = 0
                for ts in chunk:
                    m, n = len(ts.visual), len(ts.signal)
                    scores = matching_scores(ad.gather_rows(va, np.arange(ia, ia + m)),
                                             ad.gather_rows(vs, np.arange(js, js + n)),
                                             cfg.match_temperature)
                    term = matching_loss(scores, ts.station.pairs, ts.station.station_id)
                    task = term if task is None else task + term
                    ia += m
                    js += n
                task = task * (1.0 / len(chunk))
                loss, _ = _with_tel(model, task, feats, use_tel)
                grads = ad.backward(loss)
            opt.step(grads, lr)
            _log_entropy(history, epoch, bi, feats, model)
            losses.append(loss.item())
        metrics = evaluate_matching(model, val, cfg.match_temperature) if val else None
        row = {
            "epoch": epoch,
            "loss": math.fsum(losses) / len(losses),
            "lr": lr,
            "val_acc1": metrics["overall"][1] if metrics else float("nan"),
            "val_acc3": metrics["overall"][3] if metrics else float("nan"),
        }
        history.epochs.append(row)
        log.info("matching epoch %d loss %.4f acc@1 %.3f", epoch, row["loss"], row["val_acc1"])
        if on_epoch:
            on_epoch(row)
    return history


# ---------------------------------------------------------------------------
# Antenna-type classification


def _antenna_items(stations: Sequence[TokenizedStation]):
    return [(ts.visual[a], ts.geometry[a], ts.labels[a]) for ts in stations for a in range(len(ts.visual))]


def classification_accuracy(model: MultiModalModel, stations: Sequence[TokenizedStation]) -> float:
    items = _antenna_items(stations)
    correct = 0
    for c in range(0, len(items), 64):
        chunk = items[c : c + 64]
        logits, _ = model.classify_logits([v for v, _, _ in chunk], [g for _, g, _ in chunk])
        pred = logits.data.argmax(axis=1)
        correct += int(sum(p == lab for p, (_, _, lab) in zip(pred, chunk)))
    return correct / len(items)


def train_classifier(model: MultiModalModel, train: Sequence[TokenizedStation],
                     cfg: TrainConfig | None = None) -> History:
    cfg = cfg or model.cfg
    items = _antenna_items(train)
    opt = make_optimizer(cfg.sft_optimizer, model.parameters(), cfg.weight_decay)
    rng = substream(cfg.seed, STREAM_BATCH, STAGE_CLASSIFY)
    history = History()
    for epoch in range(cfg.total_epochs):
        batches = _batches(len(items), cfg.batch_size, rng)
        losses = []
        for bi, idx in enumerate(batches):
            lr = lr_at(epoch + bi / len(batches), cfg)
            chunk = [items[i] for i in idx]
            with Tape():
                logits, _ = model.classify_logits([v for v, _, _ in chunk], [g for _, g, _ in chunk])
                loss = cross_entropy(logits, [lab for _, _, lab in chunk])
                grads = ad.backward(loss)
            opt.step(grads, lr)
            losses.append(loss.item())
        history.epochs.append({"epoch": epoch, "loss": math.fsum(losses) / len(losses), "lr": lr})
    return history
