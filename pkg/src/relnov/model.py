"""Relational novelty model: feature MLP, transformer pair encoder, similarity head.

Parameters live in one ordered dict so that counting, optimisation and
checkpointing all share the same deterministic ordering.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import NumericError, Tensor

HEAD_MODES = ("regression-sigmoid", "classification-2way")
AGGREGATIONS = ("transformer", "max", "sum", "concat")

CHECKPOINT_MAGIC = b"RSNM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 16
    feature_dim: int = 64
    model_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    head_mode: str = "regression-sigmoid"
    aggregation: str = "transformer"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("input_dim", "feature_dim", "model_dim", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    @property
    def head_outputs(self):
        return 1 if self.head_mode == "regression-sigmoid" else 2


def transformer_relational_size(cfg):
    """Parameter count of projection + label token + blocks + final LN."""
    d, hid = cfg.model_dim, cfg.mlp_ratio * cfg.model_dim
    block = 4 * d + 4 * (d * d + d) + (d * hid + hid) + (hid * d + d)
    return (cfg.feature_dim * d + d) + d + cfg.num_blocks * block + 2 * d


def aggregation_hidden_width(cfg):
    """Hidden width of the fixed-aggregation MLP sized to match the transformer.

    The MLP is in -> h -> h -> model_dim (with biases), so its size is
    h^2 + h * (in + model_dim + 2) + model_dim; solve for the closest integer h.
    """
    target = transformer_relational_size(cfg)
    fan_in = cfg.feature_dim * (2 if cfg.aggregation == "concat" else 1)
    b = fan_in + cfg.model_dim + 2
    c = cfg.model_dim - target
    h = (-b + math.sqrt(b * b - 4 * c)) / 2
    return max(1, int(round(h)))


def parameter_shapes(cfg):
    """Ordered (name, shape) list; this order is the checkpoint layout."""
    shapes = [
        ("feat.0.weight", (cfg.input_dim, cfg.feature_dim)),
        ("feat.0.bias", (cfg.feature_dim,)),
        ("feat.1.weight", (cfg.feature_dim, cfg.feature_dim)),
        ("feat.1.bias", (cfg.feature_dim,)),
    ]
    d = cfg.model_dim
    if cfg.aggregation == "transformer":
        hid = cfg.mlp_ratio * d
        shapes += [
            ("proj.weight", (cfg.feature_dim, d)),
            ("proj.bias", (d,)),
            ("label_token", (d,)),
        ]
        for b in range(cfg.num_blocks):
            p = f"blocks.{b}."
            shapes += [
                (p + "ln1.gain", (d,)), (p + "ln1.bias", (d,)),
                (p + "attn.q.weight", (d, d)), (p + "attn.q.bias", (d,)),
                (p + "attn.k.weight", (d, d)), (p + "attn.k.bias", (d,)),
                (p + "attn.v.weight", (d, d)), (p + "attn.v.bias", (d,)),
                (p + "attn.out.weight", (d, d)), (p + "attn.out.bias", (d,)),
                (p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
                (p + "mlp.0.weight", (d, hid)), (p + "mlp.0.bias", (hid,)),
                (p + "mlp.1.weight", (hid, d)), (p + "mlp.1.bias", (d,)),
            ]
        shapes += [("final_ln.gain", (d,)), ("final_ln.bias", (d,))]
    else:
        h = aggregation_hidden_width(cfg)
        fan_in = cfg.feature_dim * (2 if cfg.aggregation == "concat" else 1)
        shapes += [
            ("agg.0.weight", (fan_in, h)), ("agg.0.bias", (h,)),
            ("agg.1.weight", (h, h)), ("agg.1.bias", (h,)),
            ("agg.2.weight", (h, d)), ("agg.2.bias", (d,)),
        ]
    shapes += [("head.weight", (d, cfg.head_outputs)), ("head.bias", (cfg.head_outputs,))]
    return shapes


def count_parameters(cfg):
    return sum(int(np.prod(s)) for _, s in parameter_shapes(cfg))


def relational_parameter_count(model):
    """Parameters of the pair-combining part only (excludes feature MLP and head)."""
    return sum(p.data.size for n, p in model.params.items()
               if not n.startswith(("feat.", "head.")))


class RelationalModel:
    """f (feature MLP) -> pair combiner (transformer or fixed aggregation) -> head."""

    def __init__(self, config, params=None, dtype=nx.DEFAULT_DTYPE):
        config.validate()
        self.config = config
        if params is None:
            params = self._init_params(dtype)
        self.params = params

    def _init_params(self, dtype):
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in parameter_shapes(self.config):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "weight":
                bound = 1.0 / math.sqrt(shape[0])
                arr = rng.uniform(-bound, bound, size=shape)
            elif leaf == "gain":
                arr = np.ones(shape)
            elif name == "label_token":
                arr = rng.normal(0.0, 0.02, size=shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        return params

    def randomize_weights(self, seed):
        """Redraw every weight matrix from N(0, 2/fan_in); vectors keep their init.

        Gives a generic random network whose outputs are not squashed towards
        zero, used by the symmetry property checks.
        """
        rng = np.random.default_rng(seed)
        for p in self.params.values():
            if p.data.ndim == 2:
                std = math.sqrt(2.0 / p.shape[0])
                p.data = rng.normal(0.0, std, size=p.shape).astype(p.dtype)
        return self

    def astype(self, dtype):
        params = {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n)
                  for n, p in self.params.items()}
        return RelationalModel(self.config, params)

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name):
        return self.params[name]

    # ------------------------------------------------------------ forward pieces

    def _as_input(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        return x

    def extract_features(self, x):
        """Feature MLP applied row-wise: (batch, input_dim) -> (batch, feature_dim)."""
        x = self._as_input(x)
        if x.shape[-1] != self.config.input_dim:
            raise ConfigError(
                f"input has {x.shape[-1]} features, model expects {self.config.input_dim}")
        p = self.params
        h = nx.gelu(nx.linear(x, p["feat.0.weight"], p["feat.0.bias"]))
        return nx.linear(h, p["feat.1.weight"], p["feat.1.bias"])

    def relational_forward(self, z_i, z_j):
        """Pair representation at the label-token position after the encoder.

        Accepts (feature_dim,) vectors or (batch, feature_dim) stacks.
        """
        z_i, z_j = self._as_input(z_i), self._as_input(z_j)
        single = z_i.ndim == 1
        if single:
            z_i, z_j = z_i.reshape(1, -1), z_j.reshape(1, -1)
        if self.config.aggregation != "transformer":
            v = self.aggregate_fixed(z_i, z_j, self.config.aggregation)
            return v.reshape(-1) if single else v

        p, cfg = self.params, self.config
        n, d = z_i.shape[0], cfg.model_dim
        proj_i = nx.linear(z_i, p["proj.weight"], p["proj.bias"])
        proj_j = nx.linear(z_j, p["proj.weight"], p["proj.bias"])
        token = nx.add(np.zeros((n, d), dtype=self.dtype), p["label_token"])
        seq = nx.stack([token, proj_i, proj_j], axis=1)  # (n, 3, d)
        for b in range(cfg.num_blocks):
            pre = f"blocks.{b}."
            h = nx.layer_norm(seq, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            seq = seq + self._attention(h, pre)
            h = nx.layer_norm(seq, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            h = nx.gelu(nx.linear(h, p[pre + "mlp.0.weight"], p[pre + "mlp.0.bias"]))
            seq = seq + nx.linear(h, p[pre + "mlp.1.weight"], p[pre + "mlp.1.bias"])
            if not seq.is_finite():
                raise NumericError(f"non-finite activations after block {b}")
        v = nx.layer_norm(seq[:, 0, :], p["final_ln.gain"], p["final_ln.bias"])
        return v.reshape(d) if single else v

    def _attention(self, x, pre):
        p, cfg = self.params, self.config
        n, t, d = x.shape
        nh, hd = cfg.num_heads, cfg.head_dim

        def heads(name):
            y = nx.linear(x, p[pre + f"attn.{name}.weight"], p[pre + f"attn.{name}.bias"])
            return y.reshape(n, t, nh, hd).transpose(0, 2, 1, 3)  # (n, heads, t, hd)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = nx.matmul(q, nx.swap_last(k)) * (1.0 / math.sqrt(hd))
        attn = nx.softmax(scores, axis=-1)
        out = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return nx.linear(out, p[pre + "attn.out.weight"], p[pre + "attn.out.bias"])

    def aggregate_fixed(self, z_i, z_j, mode):
        """Hand-designed pair combination followed by the sized MLP."""
        if mode != self.config.aggregation or mode == "transformer":
            raise ConfigError(
                f"aggregation {mode!r} does not match model aggregation {self.config.aggregation!r}")
        p = self.params
        h = combine_pair(z_i, z_j, mode)
        h = nx.gelu(nx.linear(h, p["agg.0.weight"], p["agg.0.bias"]))
        h = nx.gelu(nx.linear(h, p["agg.1.weight"], p["agg.1.bias"]))
        return nx.linear(h, p["agg.2.weight"], p["agg.2.bias"])

    def head_logit(self, v):
        """Log-odds that the pair shares a class.

        Regression head: the single pre-sigmoid output. Two-way head: the
        difference same - different, so sigmoid(logit) equals the softmax
        probability of the "same" class.
        """
        out = nx.linear(v, self.params["head.weight"], self.params["head.bias"])
        if self.config.head_outputs == 1:
            return out[..., 0]
        return out[..., 1] - out[..., 0]

    def similarity_score(self, v):
        return nx.sigmoid(self.head_logit(v))

    def pair_logits(self, x_i, x_j):
        """End-to-end logits for raw input pairs (training path)."""
        return self.head_logit(self.relational_forward(
            self.extract_features(x_i), self.extract_features(x_j)))

    def feature_pair_logits(self, z_i, z_j, chunk=4096):
        """Head logits for feature pairs, evaluated without recording."""
        z_i, z_j = np.asarray(z_i), np.asarray(z_j)
        out = []
        with nx.no_tape():
            for s in range(0, len(z_i), chunk):
                v = self.relational_forward(z_i[s:s + chunk].astype(self.dtype),
                                            z_j[s:s + chunk].astype(self.dtype))
                out.append(self.head_logit(v).data)
        if not out:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate(out)

    def features(self, x, chunk=8192):
        x = np.asarray(x)
        with nx.no_tape():
            parts = [self.extract_features(x[s:s + chunk].astype(self.dtype)).data
                     for s in range(0, len(x), chunk)]
        if not parts:
            return np.zeros((0, self.config.feature_dim), dtype=self.dtype)
        return np.concatenate(parts)


def combine_pair(z_i, z_j, mode):
    if mode == "max":
        return nx.maximum(z_i, z_j)
    if mode == "sum":
        return nx.add(z_i, z_j)
    if mode == "concat":
        return nx.concat([z_i, z_j], axis=-1)
    raise ConfigError(f"unknown fixed aggregation {mode!r}")


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   b"RSNM", u32 version,
#   u32 input_dim, u32 feature_dim, u32 model_dim, u32 num_blocks, u32 num_heads,
#   u32 mlp_ratio, u8 head_mode index, u8 aggregation index, u64 seed,
#   u64 parameter count, then every parameter as f32 in parameter_shapes() order.

_CFG_STRUCT = struct.Struct("<6IBBQ")


def checkpoint_bytes(model):
    cfg = model.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(_CFG_STRUCT.pack(cfg.input_dim, cfg.feature_dim, cfg.model_dim, cfg.num_blocks,
                               cfg.num_heads, cfg.mlp_ratio, HEAD_MODES.index(cfg.head_mode),
                               AGGREGATIONS.index(cfg.aggregation), cfg.seed))
    buf.write(struct.pack("<Q", count_parameters(cfg)))
    for name, shape in parameter_shapes(cfg):
        arr = model.params[name].data
        if arr.shape != tuple(shape):
            raise CheckpointError(f"{name}: shape {arr.shape} != {shape}")
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {raw[:4]!r}")
    off = 4
    if len(raw) < off + 4 + _CFG_STRUCT.size + 8:
        raise CheckpointError(f"truncated header at offset {len(raw)}")
    (version,) = struct.unpack_from("<I", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset {off}")
    off += 4
    vals = _CFG_STRUCT.unpack_from(raw, off)
    off += _CFG_STRUCT.size
    try:
        cfg = ModelConfig(*vals[:6], head_mode=HEAD_MODES[vals[6]],
                          aggregation=AGGREGATIONS[vals[7]], seed=vals[8])
    except (IndexError, ConfigError) as exc:
        raise CheckpointError(f"invalid model config at offset 8: {exc}") from None
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if count != count_parameters(cfg):
        raise CheckpointError(f"parameter count {count} does not match config at offset {off - 8}")
    params = {}
    for name, shape in parameter_shapes(cfg):
        n = int(np.prod(shape))
        if off + 4 * n > len(raw):
            raise CheckpointError(f"truncated parameter {name} at offset {off}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
        off += 4 * n
    if off != len(raw):
        raise CheckpointError(f"trailing bytes at offset {off}")
    return RelationalModel(cfg, params)


def config_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
