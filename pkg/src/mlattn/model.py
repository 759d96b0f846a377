"""Toy pre-norm encoder-decoder with a per-block choice of attention mechanism.

A configuration assigns one mechanism to each of the three block roles:
encoder self-attention (``esa``), decoder self-attention (``dsa``) and
decoder cross-attention (``dca``). Weights are random (seeded) or loaded
from a weight container; there is no training.

Config file schema (``key = value`` lines, ``#`` comments)::

    esa = softmax | relu | cosformer
    dsa = ...
    dca = ...
    layers_enc = 2
    layers_dec = 2
    d_model = 32
    heads = 4
    ffn_dim = 64
    length = none | fixed:<N> | ratio:<alpha> | lut:<path>
    src_len = 35          # optional, used by the decode demo

Weight container (little endian): ``b"MLAW"``, ``uint32`` version, ``uint32``
tensor count, then per tensor ``uint16`` name length, UTF-8 name, ``uint32``
ndim, ``uint64`` dims, row-major float64 data.
"""
from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import (AttentionWeights, HeadGeometry, Mechanism, ReweightLengths,
                        _split_heads, multi_head_attention)
from .decoder import SoftmaxCache, StepInput, decode_step, init_state
from .length import FixedLength, LutPredictor, RatioPredictor, load_predictor, predict_lut, predict_ratio
from .numerics import ConfigError, Rng, ShapeError, as_matrix

LN_EPS = 1e-5
_MAGIC = b"MLAW"
_VERSION = 1


@dataclass(frozen=True)
class MlaConfig:
    esa: Mechanism
    dsa: Mechanism
    dca: Mechanism
    geometry: HeadGeometry
    layers_enc: int = 2
    layers_dec: int = 2
    ffn_dim: int = 64
    length_predictor: RatioPredictor | LutPredictor | FixedLength | None = None
    src_len: int = 35

    @classmethod
    def create(cls, esa, dsa, dca, d_model: int = 32, heads: int = 4, layers_enc: int = 2,
               layers_dec: int = 2, ffn_dim: int = 64, length_predictor=None, src_len: int = 35):
        return cls(Mechanism.parse(esa), Mechanism.parse(dsa), Mechanism.parse(dca),
                   HeadGeometry(heads, d_model), layers_enc, layers_dec, ffn_dim,
                   length_predictor, src_len)

    @property
    def d_model(self) -> int:
        return self.geometry.d_model

    @property
    def heads(self) -> int:
        return self.geometry.num_heads

    def validate(self) -> None:
        if self.layers_enc < 0 or self.layers_dec < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be >= 1")
        needs_length = Mechanism.COSFORMER in (self.dsa, self.dca)
        if needs_length and self.length_predictor is None:
            raise ConfigError("cosFormer in decoder self/cross-attention requires a target length "
                              "source (fixed, ratio or lut)")

    def replace(self, **changes) -> "MlaConfig":
        from dataclasses import replace
        for key in ("esa", "dsa", "dca"):
            if key in changes:
                changes[key] = Mechanism.parse(changes[key])
        return replace(self, **changes)


def parse_length_source(text: str, base: Path | None = None):
    text = text.strip()
    if text.lower() in ("", "none"):
        return None
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "fixed":
            return FixedLength(int(arg))
        if kind == "ratio":
            return RatioPredictor(float(arg))
        if kind == "lut":
            path = Path(arg.strip())
            if base is not None and not path.is_absolute():
                path = base / path
            p = load_predictor(path)
            if not isinstance(p, LutPredictor):
                raise ConfigError(f"{path} is not a LUT predictor file")
            return p
    except ValueError as exc:
        raise ConfigError(f"bad length source {text!r}: {exc}") from None
    raise ConfigError(f"unknown length source {text!r}; expected none, fixed:N, ratio:A or lut:PATH")


def parse_config(text: str, base: Path | None = None) -> MlaConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string("[mla]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    s = cp["mla"]
    known = {"esa", "dsa", "dca", "layers_enc", "layers_dec", "d_model", "heads", "ffn_dim",
             "length", "src_len"}
    unknown = set(s) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("esa", "dsa", "dca"):
        if key not in s:
            raise ConfigError(f"config is missing {key!r}")
    try:
        cfg = MlaConfig.create(
            s["esa"], s["dsa"], s["dca"],
            d_model=s.getint("d_model", 32), heads=s.getint("heads", 4),
            layers_enc=s.getint("layers_enc", 2), layers_dec=s.getint("layers_dec", 2),
            ffn_dim=s.getint("ffn_dim", 64),
            length_predictor=parse_length_source(s.get("length", "none"), base),
            src_len=s.getint("src_len", 35),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed config value: {exc}") from None
    cfg.validate()
    return cfg


def load_config(path) -> MlaConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base=path.parent)


def dump_config(cfg: MlaConfig) -> str:
    lp = cfg.length_predictor
    if lp is None:
        length = "none"
    elif isinstance(lp, FixedLength):
        length = f"fixed:{lp.length}"
    elif isinstance(lp, RatioPredictor):
        length = f"ratio:{lp.alpha!r}"
    else:
        raise ConfigError("LUT length sources are referenced by path and cannot be dumped inline")
    return "\n".join([
        f"esa = {cfg.esa.value}", f"dsa = {cfg.dsa.value}", f"dca = {cfg.dca.value}",
        f"layers_enc = {cfg.layers_enc}", f"layers_dec = {cfg.layers_dec}",
        f"d_model = {cfg.d_model}", f"heads = {cfg.heads}", f"ffn_dim = {cfg.ffn_dim}",
        f"length = {length}", f"src_len = {cfg.src_len}", ""])


def _param_shapes(cfg: MlaConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {}

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for l in range(cfg.layers_enc):
        ln(f"enc.{l}.ln1"); attn(f"enc.{l}.sa"); ln(f"enc.{l}.ln2"); ffn(f"enc.{l}.ffn")
    for l in range(cfg.layers_dec):
        ln(f"dec.{l}.ln1"); attn(f"dec.{l}.sa"); ln(f"dec.{l}.ln2"); attn(f"dec.{l}.ca")
        ln(f"dec.{l}.ln3"); ffn(f"dec.{l}.ffn")
    shapes["dec.start"] = (d,)
    return shapes


def _init_param(name: str, shape, rng: Rng) -> np.ndarray:
    if ".ln" in name:
        return np.ones(shape) if name.endswith(".g") else np.zeros(shape)
    if name == "dec.start":
        bound = 1.0
    elif len(shape) == 2:
        bound = 1.0 / np.sqrt(shape[0])
    else:
        bound = 0.1
    return rng.uniform(shape, -bound, bound)


@dataclass
class ToyModel:
    cfg: MlaConfig
    params: dict[str, np.ndarray]
    seed: int | None = None

    def attn(self, prefix: str) -> AttentionWeights:
        p = self.params
        return AttentionWeights(p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"], p[f"{prefix}.wo"])

    @classmethod
    def from_params(cls, cfg: MlaConfig, params: dict[str, np.ndarray], seed: int | None = None):
        cfg.validate()
        expected = _param_shapes(cfg)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ConfigError(f"weight set mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name} has shape {params[name].shape}, expected {shape}")
        return cls(cfg, {k: np.ascontiguousarray(params[k], dtype=np.float64) for k in expected}, seed)


def build_model(cfg: MlaConfig, rng: Rng | int) -> ToyModel:
    """Random weights; every layer draws from its own ``(seed, tag)`` stream.

    Weights do not depend on the mechanism choices.
    """
    cfg.validate()
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    params = {}
    streams: dict[str, Rng] = {}
    for name, shape in _param_shapes(cfg).items():
        stack, layer = name.split(".")[:2]
        tag = 3 << 20 if layer == "start" else (1 if stack == "enc" else 2) << 20 | int(layer)
        stream = streams.setdefault(f"{tag}", rng.child(tag))
        params[name] = _init_param(name, shape, stream)
    return ToyModel(cfg, params, rng.seed)


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _ffn(model: ToyModel, prefix: str, x: np.ndarray) -> np.ndarray:
    p = model.params
    h = np.maximum(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"], 0.0)
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _ln(model: ToyModel, prefix: str, x: np.ndarray) -> np.ndarray:
    return layer_norm(x, model.params[f"{prefix}.g"], model.params[f"{prefix}.b"])


def positional_encoding(t: np.ndarray | int, d: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    ang = t / np.power(10000.0, 2 * i / d)
    pe = np.zeros((t.shape[0], d))
    pe[:, 0: 2 * (d // 2): 2] = np.sin(ang)
    pe[:, 1: 2 * (d // 2): 2] = np.cos(ang)
    return pe


def encode(model: ToyModel, src, oracle: bool = False) -> np.ndarray:
    """Encoder stack, non-causal; ``oracle`` routes attention through the quadratic oracle."""
    cfg = model.cfg
    x = as_matrix(src, "src").copy()
    if x.shape[1] != cfg.d_model:
        raise ShapeError(f"src has {x.shape[1]} columns, expected d_model={cfg.d_model}")
    lengths = ReweightLengths.self_attention(x.shape[0])
    for l in range(cfg.layers_enc):
        h = _ln(model, f"enc.{l}.ln1", x)
        x = x + multi_head_attention(h, h, h, model.attn(f"enc.{l}.sa"), cfg.heads, cfg.esa,
                                     lengths, causal=False, oracle=oracle)
        x = x + _ffn(model, f"enc.{l}.ffn", _ln(model, f"enc.{l}.ln2", x))
    return x


def resolve_target_length(model: ToyModel, enc_out: np.ndarray, max_steps: int,
                          target_len: int | None = None, src_tokens=None) -> int:
    """Target length ``N`` for decoder re-weighting (an explicit value wins)."""
    if target_len is not None:
        if target_len < 1:
            raise ConfigError(f"target length must be >= 1, got {target_len}")
        return int(target_len)
    lp = model.cfg.length_predictor
    if isinstance(lp, FixedLength):
        return lp.length
    if isinstance(lp, RatioPredictor):
        return predict_ratio(enc_out.shape[0], lp)
    if isinstance(lp, LutPredictor):
        if src_tokens is None:
            raise ConfigError("LUT length prediction needs the source tokens")
        return predict_lut(src_tokens, lp)
    return max_steps


class DecoderSession:
    """Per-sequence incremental decoder state for every layer.

    Linear blocks use ``DecoderBlockState`` accumulators (one stream per
    head); softmax blocks use a key/value cache. Cross-attention
    accumulators are filled on the first step only.
    """

    def __init__(self, model: ToyModel, enc_out: np.ndarray, target_len: int):
        cfg = model.cfg
        self.model = model
        self.enc_out = as_matrix(enc_out, "enc_out")
        self.n = target_len
        self.m = self.enc_out.shape[0]
        self.t = 0
        h, dk = cfg.heads, cfg.geometry.d_kh
        self.self_states = []
        self.cross_states = []
        self.cross_kv = []
        for l in range(cfg.layers_dec):
            if cfg.dsa is Mechanism.SOFTMAX:
                self.self_states.append(SoftmaxCache(h, dk, dk, capacity=max(target_len, 16)))
            else:
                self.self_states.append(init_state(cfg.dsa, dk, dk, batch=h))
            w = model.attn(f"dec.{l}.ca")
            kc = _split_heads(self.enc_out @ w.wk, h)
            vc = _split_heads(self.enc_out @ w.wv, h)
            self.cross_kv.append((kc, vc))
            if cfg.dca is Mechanism.SOFTMAX:
                cache = SoftmaxCache(h, dk, dk, capacity=self.m)
                cache.append(kc, vc)
                self.cross_states.append(cache)
            else:
                self.cross_states.append(init_state(cfg.dca, dk, dk, batch=h))

    def step(self, y_prev: np.ndarray) -> np.ndarray:
        cfg, model = self.model.cfg, self.model
        h = cfg.heads
        t = self.t
        x = np.asarray(y_prev, dtype=np.float64).reshape(1, cfg.d_model) + positional_encoding(t, cfg.d_model)
        for l in range(cfg.layers_dec):
            w = model.attn(f"dec.{l}.sa")
            z = _ln(model, f"dec.{l}.ln1", x)
            q = np.ascontiguousarray((z @ w.wq).reshape(h, -1))
            k = (z @ w.wk).reshape(h, 1, -1)
            v = (z @ w.wv).reshape(h, 1, -1)
            st = self.self_states[l]
            if isinstance(st, SoftmaxCache):
                st.append(k, v)
                a = st.query(q)
            else:
                a, _ = decode_step(st, StepInput(q, k, v, update=True,
                                                 lengths=ReweightLengths(self.n, self.n)))
            x = x + a.reshape(1, -1) @ w.wo

            w = model.attn(f"dec.{l}.ca")
            z = _ln(model, f"dec.{l}.ln2", x)
            q = np.ascontiguousarray((z @ w.wq).reshape(h, -1))
            st = self.cross_states[l]
            if isinstance(st, SoftmaxCache):
                a = st.query(q)
            else:
                first = st.updates == 0
                kc, vc = self.cross_kv[l]
                a, _ = decode_step(st, StepInput(q, kc if first else None, vc if first else None,
                                                 update=first, lengths=ReweightLengths(self.n, self.m),
                                                 q_position=t, k_start=0))
            x = x + a.reshape(1, -1) @ w.wo
            x = x + _ffn(model, f"dec.{l}.ffn", _ln(model, f"dec.{l}.ln3", x))
        self.t += 1
        return x[0]


def decode_forced(model: ToyModel, enc_out, inputs, target_len: int, oracle: bool = True) -> np.ndarray:
    """Full-sequence (teacher-forced) decoder pass over raw inputs ``(T, d_model)``."""
    cfg = model.cfg
    enc_out = as_matrix(enc_out, "enc_out")
    x = as_matrix(inputs, "inputs") + positional_encoding(np.arange(len(inputs)), cfg.d_model)
    self_len = ReweightLengths(target_len, target_len)
    cross_len = ReweightLengths(target_len, enc_out.shape[0])
    for l in range(cfg.layers_dec):
        z = _ln(model, f"dec.{l}.ln1", x)
        x = x + multi_head_attention(z, z, z, model.attn(f"dec.{l}.sa"), cfg.heads, cfg.dsa,
                                     self_len, causal=True, oracle=oracle)
        z = _ln(model, f"dec.{l}.ln2", x)
        x = x + multi_head_attention(z, enc_out, enc_out, model.attn(f"dec.{l}.ca"), cfg.heads,
                                     cfg.dca, cross_len, causal=False, oracle=oracle)
        x = x + _ffn(model, f"dec.{l}.ffn", _ln(model, f"dec.{l}.ln3", x))
    return x


def greedy_decode(model: ToyModel, enc_out, max_steps: int, mode: str = "incremental",
                  target_len: int | None = None, src_tokens=None) -> np.ndarray:
    """Autoregressive decode for exactly ``max_steps`` steps; each output row is fed back.

    ``mode="recompute"`` reruns the whole decoder on the prefix at every
    step with quadratic-order attention, as a reference for the incremental path.
    """
    if max_steps < 1:
        raise ShapeError(f"max_steps must be >= 1, got {max_steps}")
    enc_out = as_matrix(enc_out, "enc_out")
    if enc_out.shape[1] != model.cfg.d_model:
        raise ShapeError(f"enc_out has {enc_out.shape[1]} columns, expected {model.cfg.d_model}")
    n = resolve_target_length(model, enc_out, max_steps, target_len, src_tokens)
    start = model.params["dec.start"]
    out = np.empty((max_steps, model.cfg.d_model))
    if mode == "incremental":
        session = DecoderSession(model, enc_out, n)
        y = start
        for t in range(max_steps):
            y = session.step(y)
            out[t] = y
    elif mode == "recompute":
        inputs = [start]
        for t in range(max_steps):
            y = decode_forced(model, enc_out, np.array(inputs), n, oracle=True)[-1]
            out[t] = y
            inputs.append(y)
    else:
        raise ConfigError(f"unknown decode mode {mode!r}")
    return out


def save_weights(model: ToyModel, path) -> None:
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ShapeError(f"{path}: not a weight container (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ShapeError(f"{path}: unsupported container version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off: off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            params[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ShapeError(f"{path}: truncated weight container ({exc})") from None
    if off != len(data):
        raise ShapeError(f"{path}: {len(data) - off} trailing bytes in weight container")
    return params
