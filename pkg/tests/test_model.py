import numpy as np
import pytest

from memdepth import tensor as T
from memdepth.config import ArchConfig
from memdepth.model import (attend_memory, carry_shapes, cross_attend, decode, depth_forward, encode,
                            encode_pyramid, init_params, multihead_attention, positional_encoding,
                            self_attend_memory, zero_carry)
from memdepth.tensor import Tensor, finite_diff_check

from oracles import attention_loops


def _image(rng, h=16, w=16):
    return Tensor(rng.uniform(0, 1, (3, h, w)))


def test_encode_shape_default_config():
    cfg = ArchConfig()
    params = init_params(cfg, seed=0)
    q = encode(Tensor(np.random.default_rng(0).uniform(0, 1, (3, 64, 64))), params, cfg)
    assert q.shape == (32, 8, 8)


def test_encode_zero_image_gives_zero_features(tiny_cfg, tiny_params):
    q = encode(Tensor(np.zeros((3, 16, 16))), tiny_params, tiny_cfg)
    assert not q.data.any()


def test_encode_is_deterministic(tiny_cfg, rng):
    img = _image(rng)
    a = encode(img, init_params(tiny_cfg, seed=5), tiny_cfg)
    b = encode(img, init_params(tiny_cfg, seed=5), tiny_cfg)
    assert a.data.tobytes() == b.data.tobytes()


def test_encode_rejects_indivisible_extents(tiny_cfg, tiny_params):
    with pytest.raises(T.ShapeError, match="divisible"):
        encode(Tensor(np.zeros((3, 20, 16))), tiny_params, tiny_cfg)


def test_param_count_is_function_of_config(tiny_cfg):
    a = init_params(tiny_cfg, seed=1)
    b = init_params(tiny_cfg, seed=2)
    assert a.count() == b.count() and a.names() == b.names()
    assert a.checksum() != b.checksum()
    assert init_params(ArchConfig(token_channels=16, heads=4), seed=1).count() != a.count()


def test_positional_encoding_shapes_and_zero_input():
    cfg = ArchConfig()
    params = init_params(cfg, seed=0)
    pe = positional_encoding(Tensor(np.zeros((4, 2, 64, 64))), params, cfg)
    assert pe.shape == (4, 32, 8, 8)
    assert not pe.data.any()
    with pytest.raises(T.ShapeError):
        positional_encoding(Tensor(np.zeros((4, 2, 60, 64))), params, cfg)


def test_positional_encoding_gradient(tiny_cfg, tiny_params, rng):
    disp = rng.normal(size=(2, 2, 16, 16))
    readout = rng.normal(size=(2, tiny_cfg.token_channels, 2, 2))
    report = finite_diff_check(
        lambda d: T.sum_(positional_encoding(d, tiny_params, tiny_cfg) * readout), Tensor(disp), tol=1e-4)
    assert report.passed, report


def test_single_token_self_attention_is_value_then_output(tiny_cfg, tiny_params, rng):
    c = tiny_cfg.token_channels
    v = rng.normal(size=(1, c, 1, 1))
    out = self_attend_memory(Tensor(v), Tensor(rng.normal(size=v.shape)), tiny_params, tiny_cfg)
    expected = v.reshape(1, c) @ tiny_params["sa.wv"].data @ tiny_params["sa.wo"].data
    assert np.max(np.abs(out.data.reshape(1, c) - expected)) <= 1e-12


def test_identical_tokens_give_identical_outputs(tiny_cfg, tiny_params, rng):
    tok = rng.normal(size=(1, tiny_cfg.token_channels, 1, 1))
    vis = np.concatenate([tok, tok])
    out = self_attend_memory(Tensor(vis), Tensor(np.zeros_like(vis)), tiny_params, tiny_cfg).data
    np.testing.assert_array_equal(out[0], out[1])


@pytest.mark.parametrize("seed", range(3))
def test_multihead_attention_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    q_in, k_in = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    v_in = rng.normal(size=(2, 4))
    ws = [rng.normal(size=(4, 4)) for _ in range(4)]
    weights = []
    out = multihead_attention(Tensor(q_in), Tensor(k_in), Tensor(v_in), *map(Tensor, ws), heads=2,
                              weights_out=weights)
    ref, ref_w = attention_loops(q_in, k_in, v_in, *ws, heads=2)
    assert np.max(np.abs(out.data - ref)) <= 1e-12
    assert np.max(np.abs(weights[0] - ref_w)) <= 1e-12


def test_self_attention_two_token_oracle(rng):
    cfg = ArchConfig(token_channels=4, heads=2, memory_length=2)
    params = init_params(cfg, seed=9)
    vis = rng.normal(size=(2, 4, 1, 1))
    pos = rng.normal(size=(2, 4, 1, 1))
    out = self_attend_memory(Tensor(vis), Tensor(pos), params, cfg).data.reshape(2, 4)
    qk = (vis + pos).reshape(2, 4)
    ref, _ = attention_loops(qk, qk, vis.reshape(2, 4), params["sa.wq"].data, params["sa.wk"].data,
                             params["sa.wv"].data, params["sa.wo"].data, 2)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_cross_attention_oracle_and_residual(rng):
    cfg = ArchConfig(token_channels=4, heads=2)
    params = init_params(cfg, seed=4)
    mem = rng.normal(size=(2, 4, 2, 2))
    feat = rng.normal(size=(4, 3, 3))
    out = cross_attend(Tensor(mem), Tensor(feat), params, cfg).data
    q = feat.reshape(4, 9).T
    kv = mem.transpose(0, 2, 3, 1).reshape(8, 4)
    ref, _ = attention_loops(q, kv, kv, params["ca.wq"].data, params["ca.wk"].data,
                             params["ca.wv"].data, params["ca.wo"].data, 2)
    assert np.max(np.abs(out - (feat + ref.T.reshape(4, 3, 3)))) <= 1e-12


def test_cross_attention_zero_value_is_identity(tiny_cfg, tiny_params, rng):
    feat = rng.normal(size=(tiny_cfg.token_channels, 2, 2))
    out = cross_attend(Tensor(np.zeros((1, tiny_cfg.token_channels, 1, 1))), Tensor(feat),
                       tiny_params, tiny_cfg)
    np.testing.assert_array_equal(out.data, feat)


def test_cross_attention_single_key_ignores_key_content(tiny_cfg, tiny_params, rng):
    c = tiny_cfg.token_channels
    feat = Tensor(rng.normal(size=(c, 2, 2)))
    mem = rng.normal(size=(1, c, 1, 1))
    a = cross_attend(Tensor(mem), feat, tiny_params, tiny_cfg).data
    expected = feat.data + (mem.reshape(1, c) @ tiny_params["ca.wv"].data
                            @ tiny_params["ca.wo"].data).reshape(c, 1, 1)
    assert np.max(np.abs(a - expected)) <= 1e-12


def test_cross_attention_channel_mismatch(tiny_cfg, tiny_params):
    with pytest.raises(T.ShapeError, match="channel mismatch"):
        cross_attend(Tensor(np.zeros((1, 4, 1, 1))), Tensor(np.zeros((8, 2, 2))), tiny_params, tiny_cfg)


def test_attention_rows_sum_to_one(tiny_cfg, tiny_params, rng):
    weights = []
    vis = Tensor(rng.normal(size=(2, tiny_cfg.token_channels, 2, 2)))
    self_attend_memory(vis, Tensor(rng.normal(size=vis.shape)), tiny_params, tiny_cfg, weights)
    cross_attend(vis, Tensor(rng.normal(size=(tiny_cfg.token_channels, 2, 2))), tiny_params, tiny_cfg, weights)
    for w in weights:
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) <= 1e-6


def test_self_attention_is_permutation_equivariant(tiny_cfg, tiny_params, rng):
    vis = rng.normal(size=(3, tiny_cfg.token_channels, 2, 2))
    pos = rng.normal(size=vis.shape)
    c = tiny_cfg.token_channels

    def flat(a):
        return a.transpose(0, 2, 3, 1).reshape(-1, c)

    perm = rng.permutation(12)
    out = flat(self_attend_memory(Tensor(vis), Tensor(pos), tiny_params, tiny_cfg).data)
    # permute the flattened sequence: build tensors whose flattened order is permuted
    pv = flat(vis)[perm].reshape(12, 1, 1, c).transpose(0, 3, 1, 2)
    pp = flat(pos)[perm].reshape(12, 1, 1, c).transpose(0, 3, 1, 2)
    out_p = flat(self_attend_memory(Tensor(pv), Tensor(pp), tiny_params, tiny_cfg).data)
    inv = np.argsort(perm)
    assert np.max(np.abs(out_p[inv] - out)) <= 1e-12


def test_decode_shapes_and_range(tiny_cfg, tiny_params, rng):
    img = _image(rng)
    pyr = encode_pyramid(img, tiny_params, tiny_cfg)
    q = pyr[-1].reshape(pyr[-1].shape[1:])
    carry = zero_carry(tiny_cfg, 16, 16)
    depth, new_carry = decode(q, pyr, Tensor(rng.normal(size=(2, 16, 16))), carry, tiny_params, tiny_cfg)
    assert depth.shape == (16, 16)
    assert [c.shape for c in new_carry] == carry_shapes(tiny_cfg, 16, 16)
    assert (depth.data > 0).all() and (depth.data < tiny_cfg.max_depth).all()
    with pytest.raises(T.ShapeError, match="flow shape"):
        decode(q, pyr, Tensor(np.zeros((2, 8, 8))), carry, tiny_params, tiny_cfg)
    with pytest.raises(T.ShapeError, match="carry shapes"):
        decode(q, pyr, Tensor(np.zeros((2, 16, 16))), carry[:1], tiny_params, tiny_cfg)


def test_default_depth_map_shape():
    cfg = ArchConfig()
    params = init_params(cfg, seed=0, dtype=np.float32)
    img = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 64, 64)).astype(np.float32))
    flow = Tensor(np.zeros((2, 64, 64), dtype=np.float32))
    res = depth_forward(img, params, cfg, None, flow, zero_carry(cfg, 64, 64, np.float32))
    assert res.depth.shape == (64, 64)
    assert [c.shape for c in res.carry] == carry_shapes(cfg, 64, 64)


def _full_forward(cfg, params, img, vis, disp, flow, carry):
    attended = attend_memory(vis, disp, params, cfg)
    return depth_forward(img, params, cfg, attended, flow, carry).depth


@pytest.mark.parametrize("seed", range(10))
def test_depth_gradient_wrt_memory_tokens(tiny_cfg, tiny_params, seed):
    rng = np.random.default_rng(seed)
    img = _image(rng)
    flow = Tensor(rng.normal(size=(2, 16, 16)))
    carry = [Tensor(rng.uniform(0, 1, s)) for s in carry_shapes(tiny_cfg, 16, 16)]
    vis = rng.normal(size=(2, tiny_cfg.token_channels, 2, 2))
    disp = rng.normal(size=(2, 2, 16, 16))
    readout = rng.normal(size=(16, 16))
    coords = [tuple(int(i) for i in rng.integers(0, s)) for s in [vis.shape] * 12]
    r1 = finite_diff_check(lambda v: T.sum_(_full_forward(tiny_cfg, tiny_params, img, v, Tensor(disp), flow,
                                                          carry) * readout), Tensor(vis), coords=coords)
    coords = [tuple(int(i) for i in rng.integers(0, s)) for s in [disp.shape] * 12]
    r2 = finite_diff_check(lambda d: T.sum_(_full_forward(tiny_cfg, tiny_params, img, Tensor(vis), d, flow,
                                                          carry) * readout), Tensor(disp), coords=coords)
    assert r1.passed, r1
    assert r2.passed, r2


@pytest.mark.parametrize("seed", range(10))
def test_memory_attention_block_gradient(tiny_cfg, tiny_params, seed):
    rng = np.random.default_rng(seed)
    vis = rng.normal(size=(2, tiny_cfg.token_channels, 2, 2))
    disp = rng.normal(size=(2, 2, 16, 16))
    feat = Tensor(rng.normal(size=(tiny_cfg.token_channels, 2, 2)))
    readout = rng.normal(size=feat.shape)

    def block(v):
        return T.sum_(cross_attend(attend_memory(v, Tensor(disp), tiny_params, tiny_cfg), feat,
                                   tiny_params, tiny_cfg) * readout)

    report = finite_diff_check(block, Tensor(vis), tol=1e-4)
    assert report.passed, report


def test_full_forward_gradient_wrt_every_parameter(tiny_cfg, tiny_params):
    rng = np.random.default_rng(11)
    img = _image(rng)
    flow = Tensor(rng.normal(size=(2, 16, 16)))
    carry = [Tensor(rng.uniform(0, 1, s)) for s in carry_shapes(tiny_cfg, 16, 16)]
    vis = Tensor(rng.normal(size=(2, tiny_cfg.token_channels, 2, 2)))
    disp = Tensor(rng.normal(size=(2, 2, 16, 16)))
    readout = rng.normal(size=(16, 16))
    for name in tiny_params.names():
        leaf = tiny_params[name]
        coords = [tuple(int(i) for i in rng.integers(0, s)) for s in [leaf.shape] * 4]

        def fn(p, name=name):
            swapped = tiny_params.replace(name, p)
            return T.sum_(_full_forward(tiny_cfg, swapped, img, vis, disp, flow, carry) * readout)

        report = finite_diff_check(fn, Tensor(leaf.data.copy()), coords=coords)
        assert report.passed, f"{name}: {report}"
