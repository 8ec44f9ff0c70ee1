"""The multi-modal antenna/signal model.

Antenna side: visual pseudo-patches and geometry tokens each pass through
their own encoder and ETE layer, then get fused by self-attention and pooled.
Signal side: probe tokens pass through a signal encoder and ETE layer, then
get pooled. Linear heads map both sides into a shared embedding space.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TerMode, TrainConfig
from .encoder import (
    EncoderConfig,
    TokenBatch,
    _xavier,
    encode,
    fuse_self_attention,
    init_encoder,
    init_fusion,
    pool,
)
from .errors import ShapeError
from .sim import GEOMETRY_WIDTH, SIGNAL_WIDTH, substream
from .ter import ete_forward, init_ete

STREAM_INIT = 10
N_CLASSES = 4
MAX_TOKENS = 64


def _linear(rng, fan_in: int, fan_out: int) -> dict[str, Tensor]:
    return {"w": ad.parameter(_xavier(rng, fan_in, fan_out)),
            "b": ad.parameter(np.zeros((1, fan_out)))}


def _apply(p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    return x @ p["w"] + p["b"]


def _pack(arrays: Sequence[np.ndarray], width: int) -> tuple[Tensor, tuple[int, ...]]:
    lengths = tuple(a.shape[0] for a in arrays)
    data = np.concatenate(arrays, axis=0) if arrays else np.zeros((0, width))
    if data.shape[1] != width:
        raise ShapeError(f"token width {data.shape[1]} != expected {width}")
    return Tensor(data), lengths


class MultiModalModel:
    """Parameters live in named groups; :meth:`parameters` flattens them as
    ``group.name`` for optimizers and checkpoints."""

    def __init__(self, cfg: TrainConfig, visual_width: int, seed: int | None = None):
        self.cfg = cfg
        self.visual_width = visual_width
        d = cfg.dim
        base = dict(layers=cfg.layers, heads=cfg.heads, dim=d, ffn_mult=cfg.ffn_mult,
                    max_tokens=MAX_TOKENS, use_cls=cfg.use_cls)
        self.visual_cfg = EncoderConfig(positional=True, **base)
        self.set_cfg = EncoderConfig(positional=False, **base)
        self.fusion_cfg = EncoderConfig(**{**base, "layers": cfg.fusion_layers,
                                           "max_tokens": 2 * MAX_TOKENS + 1})
        rng = substream(cfg.seed if seed is None else seed, STREAM_INIT)
        g: dict[str, dict[str, Tensor]] = {}
        g["in_v"] = _linear(rng, visual_width, d)
        g["in_g"] = _linear(rng, GEOMETRY_WIDTH, d)
        g["in_s"] = _linear(rng, SIGNAL_WIDTH, d)
        g["enc_v"] = init_encoder(self.visual_cfg, rng)
        g["enc_g"] = init_encoder(self.set_cfg, rng)
        g["enc_s"] = init_encoder(self.set_cfg, rng)
        g["fusion"] = init_fusion(self.fusion_cfg, rng)
        for m in ("v", "g", "s"):
            g[f"ete_{m}"] = init_ete(d, rng)
        g["proj_v"] = _linear(rng, d, d)
        g["proj_s"] = _linear(rng, d, d)
        g["cls_head"] = _linear(rng, d, N_CLASSES)
        self.groups = g

    # -- parameter plumbing --------------------------------------------------

    def parameters(self, groups: Sequence[str] | None = None) -> dict[str, Tensor]:
        out = {}
        for gname, params in self.groups.items():
            if groups is not None and gname not in groups:
                continue
            for pname, t in params.items():
                out[f"{gname}.{pname}"] = t
        return out

    def head_names(self) -> set[str]:
        return set(self.parameters(["proj_v", "proj_s", "cls_head"]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise ShapeError(f"checkpoint lacks {sorted(missing)[:5]}")
        for k, arr in state.items():
            if k not in params:
                if strict:
                    raise ShapeError(f"unexpected checkpoint entry {k!r}")
                continue
            if params[k].shape != arr.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {params[k].shape}")
            new = np.array(arr, dtype=np.float64)
            new.setflags(write=False)
            params[k].data = new

    # -- forward -------------------------------------------------------------

    @property
    def ete_on(self) -> bool:
        return self.cfg.ter_mode is not TerMode.OFF

    def _modality(self, arrays, width, m: str, enc_cfg) -> tuple[TokenBatch, TokenBatch]:
        """Returns (encoder output F, post-ETE output)."""
        x, lengths = _pack(arrays, width)
        x = _apply(self.groups[f"in_{m}"], x)
        F = encode(TokenBatch(x, lengths), enc_cfg, self.groups[f"enc_{m}"])
        if not self.ete_on:
            return F, F
        out = ete_forward(F.x, self.groups[f"ete_{m}"])
        return F, TokenBatch(out, F.lengths, F.has_cls)

    def antenna_tokens(self, visual: Sequence[np.ndarray], geometry: Sequence[np.ndarray] | None):
        """Fused antenna token batch plus per-modality features ``{"V": (F, F~), "G": ...}``."""
        Fv, Fv_t = self._modality(visual, self.visual_width, "v", self.visual_cfg)
        feats = {"V": (Fv, Fv_t)}
        if geometry is None or not self.cfg.use_geometry:
            return Fv_t, feats
        Fg, Fg_t = self._modality(geometry, GEOMETRY_WIDTH, "g", self.set_cfg)
        feats["G"] = (Fg, Fg_t)
        return fuse_self_attention(Fv_t, Fg_t, self.fusion_cfg, self.groups["fusion"]), feats

    def embed_antennas(self, visual, geometry):
        fused, feats = self.antenna_tokens(visual, geometry)
        pooled = pool(fused, self.cfg.pool_mode)
        return _apply(self.groups["proj_v"], pooled), feats

    def embed_signals(self, signals: Sequence[np.ndarray]):
        Fs, Fs_t = self._modality(signals, SIGNAL_WIDTH, "s", self.set_cfg)
        pooled = pool(Fs_t, self.cfg.pool_mode)
        return _apply(self.groups["proj_s"], pooled), {"S": (Fs, Fs_t)}

    def classify_logits(self, visual, geometry):
        fused, feats = self.antenna_tokens(visual, geometry)
        return _apply(self.groups["cls_head"], pool(fused, self.cfg.pool_mode)), feats

    def entropy_features(self, feats: Mapping[str, tuple[TokenBatch, TokenBatch]]) -> list[Tensor]:
        """The matrices the entropy loss sees: encoder outputs or ETE outputs."""
        idx = 0 if self.cfg.tel_features == "pre" else 1
        return [pair[idx].x for pair in feats.values()]
