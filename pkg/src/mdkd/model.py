"""Transformer encoder with a classification head.

Post-norm layers (attention -> add&norm -> GELU feed-forward -> add&norm) over
learned token/position/segment embeddings; a linear head reads the hidden
vector at position 0. Forward passes can capture each layer's per-head
attention probabilities and the position-0 hidden vector, which is what the
distillation losses consume.

Padding is handled with a -1e9 additive bias on padded key columns, so in
float64 the attention mass on padded positions is exactly zero and appending
pads never perturbs the outputs at real positions.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MDKD"
CHECKPOINT_VERSION = 1

PAD_BIAS = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    n_classes: int
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
            "d_ff": self.d_ff, "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
            "n_classes": self.n_classes, "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Named parameter manifest in deterministic order."""
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
        "seg_emb": (2, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "wq"] = (d, d)
        shapes[p + "bq"] = (d,)
        shapes[p + "wk"] = (d, d)
        shapes[p + "bk"] = (d,)
        shapes[p + "wv"] = (d, d)
        shapes[p + "bv"] = (d,)
        shapes[p + "wo"] = (d, d)
        shapes[p + "bo"] = (d,)
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "w1"] = (d, ff)
        shapes[p + "b1"] = (ff,)
        shapes[p + "w2"] = (ff, d)
        shapes[p + "b2"] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
    shapes["cls_w"] = (d, config.n_classes)
    shapes["cls_b"] = (config.n_classes,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclass
class ForwardRecord:
    """Captured state of one forward pass on a single sequence.

    attention[layer][head] is a row-stochastic [L, L] matrix; cls_hidden[layer]
    is the position-0 hidden vector after that layer.
    """

    attention: list[list[Tensor]]
    cls_hidden: list[Tensor]
    logits: Tensor
    probs: Tensor
    mask: np.ndarray


@dataclass
class BatchForward:
    """Captured state of one forward pass on a batch (leading axis = sample).

    attention[layer] is [N, H, L, L]; cls_hidden[layer] is [N, d_model].
    On a frozen model these tensors are constants; on a model under an active
    tape they stay differentiable.
    """

    attention: list[Tensor]
    cls_hidden: list[Tensor]
    logits: Tensor
    probs: Tensor
    mask: np.ndarray
    n_heads: int = field(default=0)

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]

    def sample(self, i: int) -> ForwardRecord:
        """Per-sample view with detached tensors (analysis/dump use)."""
        att = [[Tensor(layer.data[i, h]) for h in range(self.n_heads)] for layer in self.attention]
        cls = [Tensor(layer.data[i]) for layer in self.cls_hidden]
        return ForwardRecord(att, cls, Tensor(self.logits.data[i]), Tensor(self.probs.data[i]), self.mask[i])


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[..., d_in] @ w[d_in, d_out] + b, flattening leading axes for the matmul."""
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    out = T.add_bias(T.matmul(flat, w), b)
    if x.data.ndim != 2:
        out = T.reshape(out, lead + (w.shape[1],))
    return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[N, L, d] -> [N, H, L, d/H]."""
    n, l, d = x.shape
    return T.permute(T.reshape(x, (n, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    """[N, H, L, da] -> [N, L, H*da]."""
    n, h, l, da = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (n, l, h * da))


def mask_bias(mask: np.ndarray, n_heads: int) -> np.ndarray:
    """Additive [N, H, L, L] attention bias: 0 on real key columns, -1e9 on pads."""
    n, l = mask.shape
    col = np.where(mask[:, None, None, :], 0.0, PAD_BIAS)
    return np.broadcast_to(col, (n, n_heads, l, l)).copy()


def attention_block(x: Tensor, bias: np.ndarray, p: dict[str, Tensor], n_heads: int,
                    head_dim: int) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention. Returns (projected context [N,L,d], probs [N,H,L,L])."""
    q = _split_heads(_linear(x, p["wq"], p["bq"]), n_heads)
    k = _split_heads(_linear(x, p["wk"], p["bk"]), n_heads)
    v = _split_heads(_linear(x, p["wv"], p["bv"]), n_heads)
    scores = T.scale(T.matmul(q, T.transpose_last2(k)), head_dim ** -0.5)
    probs = T.softmax_rows(T.add(scores, Tensor(bias)))
    ctx = _merge_heads(T.matmul(probs, v))
    return _linear(ctx, p["wo"], p["bo"]), probs


def self_attention(hidden: Tensor, mask, layer_params: dict[str, Tensor],
                   n_heads: int) -> tuple[Tensor, list[Tensor]]:
    """Single-sequence attention: hidden [L, d] -> (context [L, d], per-head [L, L] probs)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("self_attention: mask has no real tokens")
    l, d = hidden.shape
    if mask.shape != (l,):
        raise ShapeError(f"self_attention: mask length {mask.shape} vs sequence {l}")
    x = T.reshape(hidden, (1, l, d))
    ctx, probs = attention_block(x, mask_bias(mask[None, :], n_heads), layer_params,
                                 n_heads, d // n_heads)
    per_head = [T.reshape(T.narrow(probs, 1, h, 1), (l, l)) for h in range(n_heads)]
    return T.reshape(ctx, (l, d)), per_head


class EncoderModel:
    """Embeddings + encoder stack + linear classifier over the position-0 vector."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ConfigError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}  # manifest order

    # -- construction -------------------------------------------------------

    @classmethod
    def init_random(cls, config: ModelConfig, seed: int) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(("_g", "ln1_g", "ln2_g")):
                data = np.ones(shape)
            elif name.endswith("_b") or name.startswith("b", name.rfind(".") + 1):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, INIT_STD, size=shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def freeze(self) -> "EncoderModel":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def layer_params(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        p = self.config.dropout
        if rng is None or p == 0.0:
            return x
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        return T.mul(x, Tensor(keep))

    def layer_forward(self, i: int, hidden: Tensor, mask) -> Tensor:
        """One encoder layer on a single [L, d] sequence (no dropout)."""
        mask = np.asarray(mask, dtype=bool)
        l, d = hidden.shape
        x = T.reshape(hidden, (1, l, d))
        out, _, _ = self._layer(i, x, mask_bias(mask[None, :], self.config.n_heads), None)
        return T.reshape(out, (l, d))

    def _layer(self, i: int, x: Tensor, bias: np.ndarray,
               rng: np.random.Generator | None) -> tuple[Tensor, Tensor, Tensor]:
        p = self.layer_params(i)
        ctx, probs = attention_block(x, bias, p, self.config.n_heads, self.config.head_dim)
        x = layer_norm(T.add(x, self._dropout(ctx, rng)), p["ln1_g"], p["ln1_b"])
        ff = _linear(T.gelu(_linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])
        x = layer_norm(T.add(x, self._dropout(ff, rng)), p["ln2_g"], p["ln2_b"])
        cls = T.reshape(T.narrow(x, 1, 0, 1), (x.shape[0], x.shape[2]))
        return x, probs, cls

    def encode_batch(self, ids: np.ndarray, mask: np.ndarray, segments: np.ndarray | None = None,
                     capture: bool = False, rng: np.random.Generator | None = None) -> BatchForward:
        """Forward a padded batch. ids/mask are [N, L]; rng enables dropout (training)."""
        ids = np.asarray(ids, dtype=np.intp)
        mask = np.asarray(mask, dtype=bool)
        if ids.ndim != 2 or ids.shape != mask.shape:
            raise ShapeError(f"encode_batch: ids {ids.shape} vs mask {mask.shape}")
        n, l = ids.shape
        if l > self.config.max_seq_len:
            raise ContractError(f"sequence length {l} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise DataError(
                f"token id out of range [0, {self.config.vocab_size}): found {int(ids.min())}..{int(ids.max())}")
        if not mask[:, 0].all():
            raise ContractError("encode_batch: position 0 (CLS) must be a real token in every row")
        if segments is None:
            segments = np.zeros_like(ids)
        segments = np.asarray(segments, dtype=np.intp)

        flat_pos = np.tile(np.arange(l, dtype=np.intp), n)
        x = T.add(T.take_rows(self.params["tok_emb"], ids.ravel()),
                  T.take_rows(self.params["pos_emb"], flat_pos))
        x = T.add(x, T.take_rows(self.params["seg_emb"], segments.ravel()))
        x = layer_norm(x, self.params["emb_ln_g"], self.params["emb_ln_b"])
        x = T.reshape(self._dropout(x, rng), (n, l, self.config.d_model))

        bias = mask_bias(mask, self.config.n_heads)
        attention: list[Tensor] = []
        cls_hidden: list[Tensor] = []
        for i in range(self.config.n_layers):
            x, probs, cls = self._layer(i, x, bias, rng)
            if capture:
                attention.append(probs)
                cls_hidden.append(cls)
            final_cls = cls
        logits = _linear(final_cls, self.params["cls_w"], self.params["cls_b"])
        probs_out = T.softmax_rows(logits)
        return BatchForward(attention, cls_hidden, logits, probs_out, mask, self.config.n_heads)

    def encode(self, tokens, mask, capture: bool = False, segments=None) -> ForwardRecord:
        """Forward a single sequence; returns the per-sample capture record."""
        tokens = list(tokens)
        mask = list(mask)
        if len(tokens) != len(mask):
            raise ShapeError(f"encode: {len(tokens)} tokens vs {len(mask)} mask entries")
        segs = None if segments is None else np.asarray([segments], dtype=np.intp)
        batch = self.encode_batch(np.asarray([tokens]), np.asarray([mask], dtype=bool),
                                  segs, capture=capture)
        if capture:
            return batch.sample(0)
        return ForwardRecord([], [], Tensor(batch.logits.data[0]), Tensor(batch.probs.data[0]),
                             np.asarray(mask, dtype=bool))

    def classify(self, tokens, mask, segments=None) -> np.ndarray:
        """Class probability vector for one sequence."""
        return self.encode(tokens, mask, capture=False, segments=segments).probs.data


def layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return T.layer_norm_rows(x, g, b)


# ---------------------------------------------------------------------------
# Checkpoints: magic, version byte, u32 header length, JSON header, raw data
# ---------------------------------------------------------------------------


def save_checkpoint(model: EncoderModel, path: str) -> None:
    """Write the binary checkpoint; little-endian float64 arrays in manifest order."""
    manifest = []
    offset = 0
    blobs = []
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = json.dumps({"config": model.config.to_dict(), "params": manifest},
                        sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> EncoderModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    if blob[4] != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {blob[4]}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    base = 9 + hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    return EncoderModel(config, params)
