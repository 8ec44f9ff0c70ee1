import math

import numpy as np
import pytest

from terlab import autodiff as ad
from terlab import sim
from terlab.config import TrainConfig
from terlab.model import MultiModalModel
from terlab.objectives import info_nce
from terlab.train import (
    classification_accuracy,
    evaluate_matching,
    pretrain,
    train_classifier,
    train_matching,
)

TINY = dict(dim=16, layers=1, heads=2, fusion_layers=1, batch_size=8, warmup_epochs=1)


def _cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


def _model(cfg):
    return MultiModalModel(cfg, sim.SimConfig().visual_dim)


def test_lambda_zero_matches_ete_only(small_tokenized):
    data = small_tokenized[:8]
    a = pretrain(_model(_cfg(ter_mode="EteOnly", total_epochs=2)), data, [], None)
    b = pretrain(_model(_cfg(ter_mode="EtePlusTel", lam=0.0, total_epochs=2)), data, [], None)
    for ra, rb in zip(a.epochs, b.epochs):
        assert ra["loss"] == rb["loss"]
        assert ra["task_loss"] == rb["task_loss"]


def test_off_equals_gated_off_ete(small_tokenized):
    ts = small_tokenized[:3]
    vis = [v for t in ts for v in t.visual]
    geo = [g for t in ts for g in t.geometry]
    sig = [s for t in ts for s in t.signal]
    off = _model(_cfg(ter_mode="Off"))
    ete = _model(_cfg(ter_mode="EteOnly"))
    assert all(ete.groups[f"ete_{m}"]["gamma"].data[0, 0] == 0.0 for m in "vgs")
    assert off.embed_antennas(vis, geo)[0].data.tobytes() == ete.embed_antennas(vis, geo)[0].data.tobytes()
    assert off.embed_signals(sig)[0].data.tobytes() == ete.embed_signals(sig)[0].data.tobytes()


def test_ete_is_active_once_gamma_moves(small_tokenized):
    ts = small_tokenized[:2]
    sig = [s for t in ts for s in t.signal]
    model = _model(_cfg(ter_mode="EteOnly"))
    before = model.embed_signals(sig)[0].data
    model.groups["ete_s"]["gamma"] = ad.parameter([[0.5]])
    assert not np.allclose(model.embed_signals(sig)[0].data, before)


@pytest.mark.parametrize("seed", range(3))
def test_untrained_infonce_near_log_batch(small_tokenized, seed):
    # unit temperature keeps untrained logits close to uniform
    cfg = TrainConfig(ter_mode="Off", temperature=1.0, seed=seed)
    model = _model(cfg)
    items = [(t, a, s) for t in small_tokenized for a, s in t.station.pairs][:16]
    va, _ = model.embed_antennas([t.visual[a] for t, a, _ in items], [t.geometry[a] for t, a, _ in items])
    vs, _ = model.embed_signals([t.signal[s] for t, _, s in items])
    loss = info_nce(va, vs, cfg.temperature).item()
    assert abs(loss - math.log(16)) <= 0.2 * math.log(16)


def test_pretrain_is_deterministic(small_tokenized):
    runs = []
    for _ in range(2):
        cfg = _cfg(total_epochs=2, seed=4)
        m = _model(cfg)
        h = pretrain(m, small_tokenized[:10], small_tokenized[10:14], cfg)
        runs.append((h.epochs, h.entropy, {k: v.tobytes() for k, v in m.state_dict().items()}))
    assert runs[0] == runs[1]


def test_pretrain_logs_entropy_within_bounds(small_tokenized):
    cfg = _cfg(total_epochs=1, warmup_epochs=0)
    h = pretrain(_model(cfg), small_tokenized[:6], [], cfg)
    assert {r["modality"] for r in h.entropy} == {"V", "G", "S"}
    for r in h.entropy:
        assert 0.0 <= r["first_token_entropy"] <= math.log(cfg.dim) + 1e-12
        assert 0.0 <= r["mean_entropy"] <= math.log(cfg.dim) + 1e-12


def test_tel_lowers_entropy(small_tokenized):
    ends = {}
    for lam in (0.0, 1.0):
        cfg = _cfg(ter_mode="EtePlusTel", lam=lam, total_epochs=4)
        ends[lam] = pretrain(_model(cfg), small_tokenized[:10], [], cfg).epochs[-1]["tel"]
    assert ends[1.0] < ends[0.0]


def test_matching_overfits_tiny_train_split(small_tokenized):
    train = small_tokenized[:4]
    cfg = _cfg(ter_mode="Off", total_epochs=60, warmup_epochs=2, peak_lr=1e-2,
               sft_stations_per_batch=2, weight_decay=0.0)
    model = _model(cfg)
    train_matching(model, train, [], cfg)
    assert evaluate_matching(model, train, cfg.match_temperature)["overall"][1] >= 0.95


def test_freeze_encoders_only_moves_heads(small_tokenized):
    cfg = _cfg(total_epochs=1, warmup_epochs=0, freeze_encoders=True)
    model = _model(cfg)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train_matching(model, small_tokenized[:4], [], cfg)
    after = model.state_dict()
    heads = model.head_names()
    assert any(not np.array_equal(before[k], after[k]) for k in heads)
    assert all(np.array_equal(before[k], after[k]) for k in before if k not in heads)


def test_classifier_overfits_tiny_split(small_tokenized):
    train = small_tokenized[:3]
    cfg = _cfg(ter_mode="Off", total_epochs=40, warmup_epochs=2, peak_lr=3e-3, weight_decay=0.0)
    model = _model(cfg)
    train_classifier(model, train, cfg)
    assert classification_accuracy(model, train) >= 0.95


def test_state_dict_round_trip(small_tokenized):
    cfg = _cfg(total_epochs=1, warmup_epochs=0)
    a, b = _model(cfg), _model(cfg.replace(seed=9))
    pretrain(a, small_tokenized[:4], [], cfg)
    b.load_state_dict(a.state_dict())
    sig = small_tokenized[0].signal
    assert a.embed_signals(sig)[0].data.tobytes() == b.embed_signals(sig)[0].data.tobytes()
