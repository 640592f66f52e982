"""Transformer block tests against independent plain-numpy recomputation."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import erf

from k3m.nn import layers as L
from k3m.nn.gradcheck import grad_check
from k3m.nn.params import ParamStore, load_checkpoint, save_checkpoint
from k3m.nn.tensor import Tensor, backward, constant, tsum


# --- independent oracle: no autodiff, plain numpy -------------------------


def np_layer_norm(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def np_mha(xq, xkv, mask, p, n_heads):
    lq, lk = xq.shape[0], xkv.shape[0]
    inner = p["wq"].shape[1]
    dh = inner // n_heads
    q = (xq @ p["wq"] + p["bq"]).reshape(lq, n_heads, dh).transpose(1, 0, 2)
    k = (xkv @ p["wk"]).reshape(lk, n_heads, dh).transpose(1, 0, 2)
    v = (xkv @ p["wv"] + p["bv"]).reshape(lk, n_heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    scores = scores + np.where(mask, 0.0, -1e9)[None, None, :]
    e = np.exp(scores - scores.max(-1, keepdims=True))
    attn = e / e.sum(-1, keepdims=True)
    if not mask.any():
        attn = attn * 0.0
    ctx = (attn @ v).transpose(1, 0, 2).reshape(lq, inner)
    return ctx @ p["wo"] + p["bo"]


def np_transformer_layer(x, mask, params, n_heads):
    att = np_mha(x, x, mask, {k[5:]: v for k, v in params.items() if k.startswith("attn.")},
                 n_heads)
    x = np_layer_norm(x + att, params["ln1.g"], params["ln1.b"])
    hidden = np_gelu(x @ params["ffn.w1"] + params["ffn.b1"])
    ff = hidden @ params["ffn.w2"] + params["ffn.b2"]
    return np_layer_norm(x + ff, params["ln2.g"], params["ln2.b"])


def build_layer_store(prefix, d, n_heads, ffn_mult=2, seed=0, dtype=np.float64):
    store = ParamStore(dtype=dtype)
    rng = np.random.default_rng(seed)
    L.init_transformer_layer(store, prefix, d, n_heads, ffn_mult, rng)
    # Move off the tiny-sigma init so every path carries signal.
    scale_rng = np.random.default_rng(seed + 1)
    for _, t in store.items():
        t.data[...] = scale_rng.normal(0, 0.5, size=t.data.shape)
    return store


def raw_params(store, prefix):
    return {
        name[len(prefix) + 1 :]: np.array(store.get(name).data)
        for name in store.names()
        if name.startswith(prefix + ".")
    }


class TestLayerNorm:
    def test_pre_affine_statistics(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((6, 32)))
        normed = L.normalize(x)
        npt.assert_allclose(normed.data.mean(-1), 0.0, atol=1e-6)
        npt.assert_allclose(normed.data.var(-1), 1.0, atol=1e-4)

    def test_affine_matches_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 8))
        g = rng.standard_normal(8)
        b = rng.standard_normal(8)
        out = L.layer_norm(Tensor(x), Tensor(g), Tensor(b))
        npt.assert_allclose(out.data, np_layer_norm(x, g, b), atol=1e-12)


class TestSelfAttention:
    def test_single_position_attends_to_itself_with_weight_one(self):
        store = build_layer_store("layer", 4, 2)
        trace = []
        x = Tensor(np.random.default_rng(2).standard_normal((1, 4)))
        L.transformer_layer(store, "layer", x, np.array([True]), 2, trace=trace)
        _, attn = trace[0]
        npt.assert_array_equal(attn, np.ones_like(attn))

    def test_all_masked_but_one_key_concentrates_attention(self):
        store = build_layer_store("layer", 4, 2)
        trace = []
        x = Tensor(np.random.default_rng(3).standard_normal((5, 4)))
        mask = np.array([False, False, True, False, False])
        L.transformer_layer(store, "layer", x, mask, 2, trace=trace)
        _, attn = trace[0]
        npt.assert_array_equal(attn[:, :, 2], np.ones(attn.shape[:2]))
        assert attn[:, :, [0, 1, 3, 4]].sum() == 0.0

    def test_attention_rows_sum_to_one(self):
        store = build_layer_store("layer", 8, 4)
        rng = np.random.default_rng(4)
        for _ in range(20):
            trace = []
            x = Tensor(rng.standard_normal((7, 8)) * 3)
            mask = np.ones(7, dtype=bool)
            mask[rng.integers(0, 7)] = False
            L.transformer_layer(store, "layer", x, mask, 4, trace=trace)
            _, attn = trace[0]
            npt.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)

    def test_micro_layer_matches_numpy_oracle(self):
        # d=2, one head: compare the full layer against the closed-form pass.
        store = build_layer_store("layer", 2, 1, seed=7)
        x = np.array([[1.0, 0.0], [0.25, -1.5], [2.0, 0.5]])
        mask = np.array([True, True, False])
        ours = L.transformer_layer(store, "layer", Tensor(x), mask, 1)
        expected = np_transformer_layer(x, mask, raw_params(store, "layer"), 1)
        npt.assert_allclose(ours.data, expected, atol=1e-12)

    def test_pad_embedding_never_influences_valid_outputs(self):
        store = build_layer_store("layer", 4, 2, seed=8)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((5, 4))
        mask = np.array([True, True, True, False, False])
        base = L.transformer_layer(store, "layer", Tensor(x), mask, 2).data[:3]
        poked = x.copy()
        poked[3:] += 17.0  # arbitrary large perturbation of pad rows
        out = L.transformer_layer(store, "layer", Tensor(poked), mask, 2).data[:3]
        npt.assert_array_equal(out, base)

    def test_fully_masked_input_stays_finite(self):
        store = build_layer_store("layer", 4, 2, seed=10)
        x = Tensor(np.random.default_rng(11).standard_normal((3, 4)))
        out = L.transformer_layer(store, "layer", x, np.zeros(3, dtype=bool), 2)
        assert np.isfinite(out.data).all()

    def test_gradients_match_finite_differences(self):
        store = build_layer_store("layer", 4, 2, seed=12)
        x = constant(np.random.default_rng(13).standard_normal((5, 4)))
        mask = np.array([True, True, True, True, False])

        def forward():
            return tsum(L.transformer_layer(store, "layer", x, mask, 2) ** 2.0)

        assert grad_check(forward, store, eps=1e-4, n_samples=60, seed=0) < 1e-5

    def test_shape_mismatch_raises(self):
        store = build_layer_store("layer", 4, 2)
        with pytest.raises(ValueError):
            L.transformer_layer(store, "layer", Tensor(np.zeros((3, 6))), np.ones(3, bool), 2)


def build_co_store(d_text, d_img, inner, seed=0, dtype=np.float64):
    store = ParamStore(dtype=dtype)
    rng = np.random.default_rng(seed)
    L.init_co_attention_layer(store, "co", d_text, d_img, inner, 2, rng)
    scale_rng = np.random.default_rng(seed + 1)
    for _, t in store.items():
        t.data[...] = scale_rng.normal(0, 0.5, size=t.data.shape)
    return store


class TestCoAttention:
    def test_single_source_position_gets_weight_one(self):
        store = build_co_store(4, 4, 4)
        rng = np.random.default_rng(14)
        x = Tensor(rng.standard_normal((3, 4)))
        y = Tensor(rng.standard_normal((1, 4)))
        trace = []
        L.co_attention_layer(store, "co", x, y, np.ones(3, bool), np.ones(1, bool), 2, trace)
        name, attn = trace[0]
        assert name == "co.text.cross"
        npt.assert_array_equal(attn, np.ones_like(attn))

    def test_identical_streams_and_parameters_are_symmetric(self):
        # Same widths, same parameter values in both streams, x == y.
        store = build_co_store(4, 4, 4, seed=15)
        for name in store.names():
            if ".text." in name:
                twin = name.replace(".text.", ".image.")
                store.get(twin).data[...] = store.get(name).data
        x = np.random.default_rng(16).standard_normal((3, 4))
        out_x, out_y = L.co_attention_layer(
            store, "co", Tensor(x), Tensor(x.copy()), np.ones(3, bool), np.ones(3, bool), 2
        )
        npt.assert_array_equal(out_x.data, out_y.data)

    def test_micro_cross_attention_matches_numpy_oracle(self):
        store = build_co_store(2, 2, 2, seed=17)
        x = np.array([[0.5, -1.0], [1.5, 0.25]])
        y = np.array([[2.0, 1.0], [-0.5, 0.75], [0.0, -2.0]])
        x_mask = np.ones(2, bool)
        y_mask = np.array([True, True, False])
        out_x, out_y = L.co_attention_layer(
            store, "co", Tensor(x), Tensor(y), x_mask, y_mask, 1
        )
        p = raw_params(store, "co")

        def stream(q_in, kv_in, kv_mask, side):
            sp = {k[len(side) + 1 :]: v for k, v in p.items() if k.startswith(side + ".")}
            att = np_mha(q_in, kv_in, kv_mask,
                         {k[6:]: v for k, v in sp.items() if k.startswith("cross.")}, 1)
            h = np_layer_norm(q_in + att, sp["ln1.g"], sp["ln1.b"])
            ff = np_gelu(h @ sp["ffn.w1"] + sp["ffn.b1"]) @ sp["ffn.w2"] + sp["ffn.b2"]
            return np_layer_norm(h + ff, sp["ln2.g"], sp["ln2.b"])

        npt.assert_allclose(out_x.data, stream(x, y, y_mask, "text"), atol=1e-12)
        npt.assert_allclose(out_y.data, stream(y, x, x_mask, "image"), atol=1e-12)

    def test_fully_padded_source_reads_null_slot(self):
        store = build_co_store(4, 6, 4, seed=18)
        x = Tensor(np.random.default_rng(19).standard_normal((3, 4)))
        y = Tensor(np.zeros((2, 6)))
        trace = []
        out_x, out_y = L.co_attention_layer(
            store, "co", x, y, np.ones(3, bool), np.zeros(2, bool), 2, trace
        )
        assert np.isfinite(out_x.data).all() and np.isfinite(out_y.data).all()
        text_attn = dict(trace)["co.text.cross"]
        assert text_attn.shape[-1] == 1  # only the learned null slot is visible
        npt.assert_array_equal(text_attn, np.ones_like(text_attn))

    def test_gradients_match_finite_differences(self):
        store = build_co_store(4, 6, 4, seed=20)
        rng = np.random.default_rng(21)
        x = constant(rng.standard_normal((3, 4)))
        y = constant(rng.standard_normal((2, 6)))

        def forward():
            ox, oy = L.co_attention_layer(
                store, "co", x, y, np.ones(3, bool), np.ones(2, bool), 2
            )
            return tsum(ox * ox) + tsum(oy * oy)

        assert grad_check(forward, store, eps=1e-4, n_samples=60, seed=0) < 1e-5


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        store = ParamStore(dtype=np.float32)
        rng = np.random.default_rng(22)
        store.create("a.weight", rng.standard_normal((7, 3)))
        store.create("b.bias", rng.standard_normal(5))
        path = tmp_path / "ckpt.bin"
        save_checkpoint(store, path, meta={"note": "x"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"note": "x"}
        assert loaded.names() == store.names()
        for name in store.names():
            npt.assert_array_equal(loaded.get(name).data, store.get(name).data)

    def test_truncated_checkpoint_rejected(self, tmp_path):
        store = ParamStore(dtype=np.float32)
        store.create("w", np.ones((4, 4)))
        path = tmp_path / "ckpt.bin"
        save_checkpoint(store, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        from k3m.nn.params import CheckpointError

        with pytest.raises(CheckpointError):
            load_checkpoint(path)
