import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terlab import autodiff as ad
from terlab.autodiff import Tensor
from terlab.encoder import (
    EncoderConfig,
    PoolMode,
    TokenBatch,
    encode,
    fuse_self_attention,
    init_encoder,
    init_fusion,
    load_checkpoint,
    pool,
    save_checkpoint,
)
from terlab.errors import ConfigError, DataError, ShapeError, UsageError

from gradcheck import analytic, fd_entry, rel_err


def _tokens(rng, rows, dim=8):
    return Tensor(rng.normal(size=(rows, dim)))


def test_config_rejects_indivisible_dim():
    with pytest.raises(ConfigError):
        EncoderConfig(dim=10, heads=4)


def test_config_rejects_zero_heads():
    with pytest.raises(ConfigError):
        EncoderConfig(heads=0)


def test_zero_layer_encoder_is_identity_plus_cls():
    rng = np.random.default_rng(0)
    cfg = EncoderConfig(layers=0, heads=2, dim=8, use_cls=True)
    params = init_encoder(cfg, rng)
    x = _tokens(rng, 5)
    out = encode(TokenBatch.single(x), cfg, params)
    assert out.x.shape == (6, 8)
    assert np.array_equal(out.x.data[0], params["cls"].data[0])
    assert np.array_equal(out.x.data[1:], x.data)


def test_zero_layer_without_cls_is_exact_identity():
    rng = np.random.default_rng(1)
    cfg = EncoderConfig(layers=0, heads=2, dim=8, use_cls=False)
    x = _tokens(rng, 4)
    assert np.array_equal(encode(TokenBatch.single(x), cfg, init_encoder(cfg, rng)).x.data, x.data)


@pytest.mark.parametrize("layers,use_cls,positional", [(1, False, False), (2, True, False), (2, True, True)])
def test_encode_preserves_shape(layers, use_cls, positional):
    rng = np.random.default_rng(2)
    cfg = EncoderConfig(layers=layers, heads=2, dim=8, use_cls=use_cls, positional=positional)
    params = init_encoder(cfg, rng)
    batch = TokenBatch(_tokens(rng, 9), (4, 2, 3))
    out = encode(batch, cfg, params)
    extra = 1 if use_cls else 0
    assert out.lengths == tuple(t + extra for t in (4, 2, 3))
    assert out.x.shape == (9 + 3 * extra, 8)
    assert out.has_cls == use_cls


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_encode_is_permutation_equivariant(seed, rows):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(layers=2, heads=2, dim=8, use_cls=False)
    params = init_encoder(cfg, rng)
    x = rng.normal(size=(rows, 8))
    perm = rng.permutation(rows)
    out = encode(TokenBatch.single(Tensor(x)), cfg, params).x.data
    out_p = encode(TokenBatch.single(Tensor(x[perm])), cfg, params).x.data
    assert np.allclose(out_p, out[perm], rtol=0, atol=1e-12)


def test_packed_items_do_not_interact():
    rng = np.random.default_rng(3)
    cfg = EncoderConfig(layers=2, heads=2, dim=8, use_cls=True, positional=True)
    params = init_encoder(cfg, rng)
    a, b = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    packed = encode(TokenBatch(Tensor(np.vstack([a, b])), (3, 5)), cfg, params).x.data
    alone_a = encode(TokenBatch.single(Tensor(a)), cfg, params).x.data
    alone_b = encode(TokenBatch.single(Tensor(b)), cfg, params).x.data
    assert np.allclose(packed[:4], alone_a, rtol=0, atol=1e-12)
    assert np.allclose(packed[4:], alone_b, rtol=0, atol=1e-12)


def test_encode_width_mismatch():
    cfg = EncoderConfig(layers=1, heads=2, dim=8)
    with pytest.raises(ShapeError):
        encode(TokenBatch.single(Tensor(np.ones((3, 6)))), cfg, init_encoder(cfg, np.random.default_rng(0)))


def test_encode_too_many_tokens():
    cfg = EncoderConfig(layers=1, heads=2, dim=8, max_tokens=4, use_cls=True)
    with pytest.raises(ShapeError, match="max_tokens"):
        encode(TokenBatch.single(Tensor(np.ones((4, 8)))), cfg, init_encoder(cfg, np.random.default_rng(0)))


def test_encode_empty_sequence():
    cfg = EncoderConfig(layers=1, heads=2, dim=8)
    with pytest.raises(UsageError):
        encode(TokenBatch(Tensor(np.ones((2, 8))), (2, 0)), cfg, init_encoder(cfg, np.random.default_rng(0)))


def test_attention_weight_gradient_matches_fd():
    rng = np.random.default_rng(4)
    cfg = EncoderConfig(layers=1, heads=2, dim=8, use_cls=True)
    params = init_encoder(cfg, rng)
    x = _tokens(rng, 4)
    w = params["layer0.w_qkv"]
    loss = lambda: ad.mean_all(encode(TokenBatch.single(x), cfg, params).x)
    (grad,) = analytic(loss, [w])
    for index in [(0, 0), (3, 5), (7, 12), (2, 20), (5, 23)]:
        assert rel_err(grad[index], fd_entry(loss, w, index)) < 1e-4


def test_pool_single_token_tlf():
    v = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(pool(TokenBatch.single(Tensor(v)), "TLF").data, v)


def test_pool_identical_rows_tlf():
    v = np.array([0.5, 1.5, -2.5])
    out = pool(TokenBatch.single(Tensor(np.tile(v, (3, 1)))), PoolMode.TLF).data
    assert np.allclose(out[0], v, rtol=1e-15, atol=0)


def test_pool_cls_plus_tlf():
    a = np.array([2.0, 0.0])
    body = np.array([[1.0, 4.0], [3.0, -2.0]])
    batch = TokenBatch.single(Tensor(np.vstack([a, body])), has_cls=True)
    b = body.mean(axis=0)
    assert np.allclose(pool(batch, "CLS_PLUS_TLF").data[0], (a + b) / 2, rtol=0, atol=1e-15)
    assert np.array_equal(pool(batch, "CLS").data[0], a)
    assert np.allclose(pool(batch, "TLF").data[0], b, rtol=0, atol=1e-15)


def test_pool_cls_without_cls_token():
    with pytest.raises(UsageError):
        pool(TokenBatch.single(Tensor(np.ones((2, 3)))), "CLS")


def test_pool_tlf_needs_body_tokens():
    with pytest.raises(UsageError):
        pool(TokenBatch.single(Tensor(np.ones((1, 3))), has_cls=True), "TLF")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pool_tlf_is_order_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    a = pool(TokenBatch.single(Tensor(x)), "TLF").data
    b = pool(TokenBatch.single(Tensor(x[perm])), "TLF").data
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def _zero_fusion(cfg, rng):
    params = init_fusion(cfg, rng)
    params["type_emb"] = ad.parameter(np.zeros_like(params["type_emb"].data))
    return params


def test_fusion_zero_layers_zero_types_is_concatenation():
    rng = np.random.default_rng(5)
    cfg = EncoderConfig(layers=0, heads=2, dim=8, use_cls=False)
    v, g = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    out = fuse_self_attention(TokenBatch.single(Tensor(v)), TokenBatch.single(Tensor(g)), cfg, _zero_fusion(cfg, rng))
    assert np.array_equal(out.x.data, np.vstack([v, g]))


def test_fusion_interleaves_items_in_a_batch():
    rng = np.random.default_rng(6)
    cfg = EncoderConfig(layers=0, heads=2, dim=8, use_cls=False)
    v, g = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
    out = fuse_self_attention(TokenBatch(Tensor(v), (2, 3)), TokenBatch(Tensor(g), (1, 2)), cfg, _zero_fusion(cfg, rng))
    assert out.lengths == (3, 5)
    assert np.array_equal(out.x.data, np.vstack([v[:2], g[:1], v[2:], g[1:]]))


def test_fusion_with_empty_geometry_equals_tagged_visual():
    rng = np.random.default_rng(7)
    cfg = EncoderConfig(layers=1, heads=2, dim=8, use_cls=True)
    params = init_fusion(cfg, rng)
    v = rng.normal(size=(4, 8))
    empty = TokenBatch(Tensor(np.zeros((0, 8))), (0,))
    fused = fuse_self_attention(TokenBatch.single(Tensor(v)), empty, cfg, params).x.data
    tagged = Tensor(v + params["type_emb"].data[0])
    direct = encode(TokenBatch.single(tagged), cfg, params).x.data
    assert np.allclose(fused, direct, rtol=0, atol=1e-12)


def test_fusion_token_count_with_cls():
    rng = np.random.default_rng(8)
    cfg = EncoderConfig(layers=1, heads=2, dim=8, use_cls=True)
    out = fuse_self_attention(TokenBatch.single(_tokens(rng, 6)), TokenBatch.single(_tokens(rng, 5)),
                              cfg, init_fusion(cfg, rng))
    assert out.x.rows == 6 + 5 + 1


def test_fusion_width_mismatch():
    rng = np.random.default_rng(9)
    cfg = EncoderConfig(layers=1, heads=2, dim=8)
    with pytest.raises(ShapeError):
        fuse_self_attention(TokenBatch.single(_tokens(rng, 2)), TokenBatch.single(_tokens(rng, 2, dim=4)),
                            cfg, init_fusion(cfg, rng))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    params = init_encoder(EncoderConfig(layers=1, heads=2, dim=8, positional=True), rng)
    path = tmp_path / "enc.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name, t in params.items():
        assert loaded[name].tobytes() == t.data.tobytes()
    assert path.read_bytes()[:8] == b"TERLAB01"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"w": np.ones((3, 3))})
    data = path.read_bytes()
    for cut in (10, 20, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(DataError):
            load_checkpoint(path)
