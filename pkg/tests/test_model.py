import math
import struct

import numpy as np
import pytest

from mlattn.attention import Mechanism, ReweightLengths, similarity_attention_oracle
from mlattn.length import FixedLength, RatioPredictor
from mlattn.model import (MlaConfig, ToyModel, build_model, decode_forced, dump_config, encode,
                          greedy_decode, load_config, load_weights, parse_config, positional_encoding,
                          resolve_target_length, save_weights)
from mlattn.numerics import ConfigError, Rng, ShapeError, max_rel_error


def toy(esa="relu", dsa="relu", dca="cosformer", **kw):
    kw.setdefault("length_predictor", FixedLength(10))
    return MlaConfig.create(esa, dsa, dca, **kw)


def reference_encoder(model, src):
    """Independent per-layer loop: pre-norm softmax self-attention then ReLU FFN."""
    cfg, p = model.cfg, model.params
    h, dk = cfg.heads, cfg.d_model // cfg.heads
    x = src.copy()

    def norm(v, pre):
        out = np.empty_like(v)
        for r, row in enumerate(v):
            mu = sum(row) / len(row)
            var = sum((a - mu) ** 2 for a in row) / len(row)
            out[r] = [(a - mu) / math.sqrt(var + 1e-5) for a in row]
        return out * p[pre + ".g"] + p[pre + ".b"]

    for l in range(cfg.layers_enc):
        z = norm(x, f"enc.{l}.ln1")
        q, k, v = (z @ p[f"enc.{l}.sa.{w}"] for w in ("wq", "wk", "wv"))
        heads = np.zeros_like(q)
        for hd in range(h):
            cols = slice(hd * dk, (hd + 1) * dk)
            for i in range(len(z)):
                s = [float(q[i, cols] @ k[j, cols]) / math.sqrt(dk) for j in range(len(z))]
                top = max(s)
                w = [math.exp(a - top) for a in s]
                heads[i, cols] = sum(wj * v[j, cols] for j, wj in enumerate(w)) / sum(w)
        x = x + heads @ p[f"enc.{l}.sa.wo"]
        z = norm(x, f"enc.{l}.ln2")
        x = x + np.maximum(z @ p[f"enc.{l}.ffn.w1"] + p[f"enc.{l}.ffn.b1"], 0) @ p[f"enc.{l}.ffn.w2"] \
            + p[f"enc.{l}.ffn.b2"]
    return x


def test_build_is_deterministic_and_seed_sensitive():
    a, b, c = build_model(toy(), 3), build_model(toy(), 3), build_model(toy(), 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_weights_do_not_depend_on_mechanisms():
    a = build_model(toy("softmax", "softmax", "softmax"), 5)
    b = build_model(toy("cosformer", "relu", "cosformer"), 5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_changing_encoder_depth_keeps_decoder_weights():
    a = build_model(toy(layers_enc=1), 5)
    b = build_model(toy(layers_enc=3), 5)
    dec = [k for k in a.params if k.startswith("dec.")]
    assert dec and all(np.array_equal(a.params[k], b.params[k]) for k in dec)


def test_shapes():
    m = build_model(toy(), 1)
    for l in range(2):
        assert m.params[f"enc.{l}.sa.wo"].shape == (32, 32)
        assert m.params[f"dec.{l}.ca.wo"].shape == (32, 32)
    assert m.params["dec.0.ffn.w1"].shape == (32, 64)


def test_cosformer_decoder_needs_length_source():
    with pytest.raises(ConfigError):
        build_model(toy(dca="cosformer", length_predictor=None), 1)
    with pytest.raises(ConfigError):
        build_model(toy(dsa="cosformer", dca="relu", length_predictor=None), 1)
    build_model(toy(esa="cosformer", dsa="relu", dca="relu", length_predictor=None), 1)
    with pytest.raises(ConfigError):
        MlaConfig.create("relu", "relu", "relu", d_model=30, heads=4)


def test_zero_layer_encoder_is_identity():
    m = build_model(toy(layers_enc=0), 2)
    src = Rng(1).uniform((7, 32), -1, 1)
    assert np.array_equal(encode(m, src), src)


def test_softmax_encoder_matches_layer_loop():
    m = build_model(toy("softmax"), 6)
    src = Rng(2).uniform((9, 32), -1, 1)
    assert max_rel_error(encode(m, src), reference_encoder(m, src)) <= 1e-9


@pytest.mark.parametrize("mech", list(Mechanism))
def test_encoder_fast_path_matches_oracle_path(mech):
    m = build_model(toy(mech), 6)
    src = Rng(3).uniform((11, 32), -1, 1)
    assert max_rel_error(encode(m, src), encode(m, src, oracle=True)) <= 1e-9


def test_encoder_rejects_wrong_width():
    with pytest.raises(ShapeError):
        encode(build_model(toy(), 1), np.ones((3, 31)))


def test_greedy_decode_shape_and_seed_sensitivity():
    enc = Rng(4).uniform((12, 32), -1, 1)
    a = greedy_decode(build_model(toy(), 1), enc, 10)
    b = greedy_decode(build_model(toy(), 2), enc, 10)
    assert a.shape == (10, 32)
    assert not np.allclose(a, b)


@pytest.mark.parametrize("dsa,dca", [("relu", "softmax"), ("softmax", "cosformer"), ("relu", "cosformer"),
                                     ("cosformer", "relu")])
def test_incremental_decode_matches_recompute(dsa, dca):
    m = build_model(toy("relu", dsa, dca, length_predictor=FixedLength(12)), 7)
    enc = encode(m, Rng(5).uniform((15, 32), -1, 1))
    fast = greedy_decode(m, enc, 12)
    slow = greedy_decode(m, enc, 12, mode="recompute")
    assert np.max(np.abs(fast - slow)) <= 1e-8


def test_cross_attention_layer_matches_direct_oracle():
    cfg = toy("relu", "relu", "cosformer", layers_dec=1, length_predictor=FixedLength(8))
    m = build_model(cfg, 8)
    rng = Rng(6)
    enc, inputs = rng.uniform((13, 32), -1, 1), rng.uniform((8, 32), -1, 1)
    # silence self-attention and FFN so the layer reduces to x + CA(LN(x))
    params = {k: (np.zeros_like(v) if ".sa.w" in k or ".ffn." in k else v) for k, v in m.params.items()}
    out = decode_forced(ToyModel(cfg, params), enc, inputs, 8, oracle=False)
    x0 = inputs + positional_encoding(np.arange(8), 32)
    zq = (x0 - x0.mean(1, keepdims=True)) / np.sqrt(x0.var(1, keepdims=True) + 1e-5)
    w = m.attn("dec.0.ca")
    heads = []
    for hd in range(4):
        c = slice(hd * 8, (hd + 1) * 8)
        heads.append(similarity_attention_oracle((zq @ w.wq)[:, c], (enc @ w.wk)[:, c], (enc @ w.wv)[:, c],
                                                 "cosformer", ReweightLengths(8, 13)))
    assert max_rel_error(out, x0 + np.concatenate(heads, axis=1) @ w.wo) <= 1e-9


def test_decoder_is_causal_in_its_inputs():
    m = build_model(toy("relu", "cosformer", "cosformer", length_predictor=FixedLength(9)), 9)
    rng = Rng(7)
    enc, inputs = rng.uniform((10, 32), -1, 1), rng.uniform((9, 32), -1, 1)
    base = decode_forced(m, enc, inputs, 9, oracle=False)
    inputs[5:] += 3.0
    assert np.max(np.abs(decode_forced(m, enc, inputs, 9, oracle=False)[:5] - base[:5])) <= 1e-12


def test_target_length_resolution():
    enc = np.zeros((100, 32))
    m = build_model(toy(length_predictor=RatioPredictor(1.25)), 1)
    assert resolve_target_length(m, enc, 5) == 125
    assert resolve_target_length(m, enc, 5, target_len=7) == 7
    m = build_model(toy("relu", "relu", "relu", length_predictor=None), 1)
    assert resolve_target_length(m, enc, 5) == 5


def test_weight_container_round_trip(tmp_path):
    m = build_model(toy(), 11)
    save_weights(m, tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == b"MLAW" and struct.unpack_from("<II", raw, 4) == (1, len(m.params))
    loaded = load_weights(tmp_path / "w.bin")
    assert list(loaded) == list(m.params)
    assert all(np.array_equal(loaded[k], m.params[k]) for k in loaded)
    again = ToyModel.from_params(m.cfg, loaded)
    enc = Rng(1).uniform((6, 32), -1, 1)
    assert np.array_equal(greedy_decode(again, enc, 4), greedy_decode(m, enc, 4))


def test_weight_container_rejects_corruption(tmp_path):
    m = build_model(toy(), 11)
    save_weights(m, tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-8], raw + b"\0"):
        (tmp_path / "bad.bin").write_bytes(bad)
        with pytest.raises(ShapeError):
            load_weights(tmp_path / "bad.bin")
    params = dict(m.params)
    params.pop("dec.start")
    with pytest.raises(ConfigError):
        ToyModel.from_params(m.cfg, params)


def test_config_text_round_trip(tmp_path):
    text = "esa = cosformer\ndsa = relu\ndca = cosformer  # cross\nd_model = 16\nheads = 2\nlength = ratio:1.25\n"
    cfg = parse_config(text)
    assert (cfg.esa, cfg.dsa, cfg.dca) == (Mechanism.COSFORMER, Mechanism.RELU, Mechanism.COSFORMER)
    assert cfg.d_model == 16 and cfg.length_predictor == RatioPredictor(1.25)
    assert parse_config(dump_config(cfg)) == cfg
    (tmp_path / "lut.tsv").write_text("#fallback\t4.0\nA\t3.0\n")
    (tmp_path / "m.cfg").write_text("esa=relu\ndsa=relu\ndca=cosformer\nlength=lut:lut.tsv\n")
    assert load_config(tmp_path / "m.cfg").length_predictor.table == {"A": 3.0}


@pytest.mark.parametrize("text", ["esa=relu\ndsa=relu\n", "esa=relu\ndsa=relu\ndca=relu\nbogus=1\n",
                                  "esa=relu\ndsa=relu\ndca=foo\n", "esa=relu\ndsa=relu\ndca=relu\nheads=x\n",
                                  "esa=relu\ndsa=relu\ndca=relu\nlength=fixed:0\n"])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)
