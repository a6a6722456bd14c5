"""Trainable sequence regressor and its checkpoint format.

Token and learned positional embeddings feed a stack of post-norm
encoder blocks (multi-head self-attention + feed-forward, residuals,
layernorm). The representation at the leading [CLS] position runs
through a fixed 256/128/1 head: ReLU after the first two layers, linear
output, dropout 0.1 after each hidden layer.

Attention is built from the primitive op set only: per-head slices of
the last axis, transpose_last2/matmul for scores, masked softmax, and
concat to stitch heads back together.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor_engine import (
    GradTape,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    dropout_mask_apply,
    embedding_lookup,
    layernorm,
    matmul,
    mean,
    mul,
    relu,
    scalar,
    slice_axis,
    softmax_lastdim,
    square,
    transpose_last2,
)

HEAD_DIMS = (256, 128, 1)


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or disagree with their config."""


@dataclass
class NetConfig:
    vocab_size: int = 24
    max_len: int = 1024
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ff_dim: int = 128
    head_dims: tuple[int, ...] = HEAD_DIMS
    dropout_p: float = 0.1

    def __post_init__(self):
        self.head_dims = tuple(self.head_dims)
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_dims != HEAD_DIMS:
            raise ShapeError(f"regression head is fixed at {HEAD_DIMS}, got {self.head_dims}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "max_len": self.max_len,
                "d_model": self.d_model, "n_heads": self.n_heads,
                "n_layers": self.n_layers, "ff_dim": self.ff_dim,
                "head_dims": list(self.head_dims), "dropout_p": self.dropout_p}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


class ParamSet:
    """Ordered name -> Tensor map; clones never alias the original storage."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def total_count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def clone(self) -> "ParamSet":
        return ParamSet({name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                         for name, t in self._tensors.items()})


def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter table: names in deterministic order with shapes."""
    d, f = config.d_model, config.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}"
        for part in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{part}"] = (d, d)
        for part in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{part}"] = (d,)
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.ff.w1"] = (d, f)
        shapes[f"{p}.ff.b1"] = (f,)
        shapes[f"{p}.ff.w2"] = (f, d)
        shapes[f"{p}.ff.b2"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
    widths = (d,) + config.head_dims
    for j in range(len(config.head_dims)):
        shapes[f"head.w{j + 1}"] = (widths[j], widths[j + 1])
        shapes[f"head.b{j + 1}"] = (widths[j + 1],)
    return shapes


def init_params(config: NetConfig, seed: int) -> ParamSet:
    """Xavier-uniform weights, zero biases, unit layernorm gains; seed-deterministic."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            data = np.zeros(shape)
        elif leaf == "g":
            data = np.ones(shape)
        else:
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ParamSet(tensors)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _dropout(x: Tensor, p: float, train: bool, rng) -> Tensor:
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ShapeError("train-mode forward with dropout_p > 0 needs an rng")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
    return dropout_mask_apply(x, mask)


def _attention(params, prefix: str, x: Tensor, key_mask: np.ndarray,
               config: NetConfig, collect: list | None) -> Tensor:
    d, h = config.d_model, config.n_heads
    dh = d // h
    q = add(matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = add(matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = add(matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    scale = scalar(1.0 / np.sqrt(dh))
    heads = []
    for i in range(h):
        lo, hi = i * dh, (i + 1) * dh
        qi = slice_axis(q, 2, lo, hi)
        ki = slice_axis(k, 2, lo, hi)
        vi = slice_axis(v, 2, lo, hi)
        scores = mul(matmul(qi, transpose_last2(ki)), scale)
        probs = softmax_lastdim(scores, mask=key_mask)
        if collect is not None:
            collect.append(probs.data.copy())
        heads.append(matmul(probs, vi))
    joined = concat(heads, axis=2)
    return add(matmul(joined, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _forward_tensor(params, ids: np.ndarray, mask: np.ndarray, config: NetConfig,
                    train: bool, rng, collect: list | None = None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ShapeError(f"batch ids {ids.shape} and mask {mask.shape} must both be (B, L)")
    if ids.shape[1] > config.max_len:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ShapeError(f"token id out of range for vocab of {config.vocab_size}")
    if not np.all(mask[:, 0] == 1.0):
        raise ShapeError("leading [CLS] position must be unmasked in every row")
    length = ids.shape[1]
    p = config.dropout_p

    tok = embedding_lookup(params["embed.tok"], ids)
    pos = embedding_lookup(params["embed.pos"], np.arange(length))
    x = add(tok, pos)
    key_mask = mask[:, None, :]  # broadcast over query positions
    for i in range(config.n_layers):
        attn = _attention(params, f"layer{i}.attn", x, key_mask, config, collect)
        attn = _dropout(attn, p, train, rng)
        x = layernorm(add(x, attn), params[f"layer{i}.ln1.g"], params[f"layer{i}.ln1.b"])
        hidden = relu(add(matmul(x, params[f"layer{i}.ff.w1"]), params[f"layer{i}.ff.b1"]))
        ff = add(matmul(hidden, params[f"layer{i}.ff.w2"]), params[f"layer{i}.ff.b2"])
        ff = _dropout(ff, p, train, rng)
        x = layernorm(add(x, ff), params[f"layer{i}.ln2.g"], params[f"layer{i}.ln2.b"])

    pooled = slice_axis(x, 1, 0, 1)  # (B, 1, D) at the [CLS] position
    out = pooled
    n_head_layers = len(config.head_dims)
    for j in range(1, n_head_layers + 1):
        out = add(matmul(out, params[f"head.w{j}"]), params[f"head.b{j}"])
        if j < n_head_layers:
            out = relu(out)
            out = _dropout(out, p, train, rng)
    return out


def forward(params, ids, mask, config: NetConfig, mode: str = "eval",
            rng=None) -> np.ndarray:
    """Predict one scalar per batch row; dropout is active only in train mode."""
    train = mode == "train"
    out = _forward_tensor(params, ids, mask, config, train, rng)
    return out.data.reshape(-1).copy()


def forward_with_attention(params, ids, mask, config: NetConfig):
    """Eval-mode predictions plus per-layer-per-head attention maps (B, L, L)."""
    collect: list[np.ndarray] = []
    out = _forward_tensor(params, ids, mask, config, False, None, collect)
    return out.data.reshape(-1).copy(), collect


def loss_mse(predictions, targets) -> float:
    """Mean squared residual between two equal-length vectors."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ShapeError("loss_mse on an empty batch")
    if p.shape != t.shape:
        raise ShapeError(f"loss_mse length mismatch: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def _loss_tensor(pred: Tensor, targets: np.ndarray) -> Tensor:
    t = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    if t.size == 0:
        raise ShapeError("loss on an empty batch")
    neg_t = Tensor(-t)
    return mean(square(add(pred, neg_t)))


def grads(params: ParamSet, ids, mask, targets, config: NetConfig, rng=None,
          mode: str = "train") -> tuple[float, ParamSet]:
    """MSE loss and its gradient for every parameter (zero where unreached)."""
    train = mode == "train"
    tape = GradTape()
    with tape:
        pred = _forward_tensor(params, ids, mask, config, train, rng)
        loss = _loss_tensor(pred, targets)
    by_id = backward(tape, loss)
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = by_id.get(p.id)
        out[name] = g if g is not None else Tensor(np.zeros_like(p.data))
    return float(loss.item()), ParamSet(out)


class TransformerModel:
    """Adapter bundling a NetConfig with the forward/loss/grads functions.

    Batches are (ids, mask) ndarray pairs. Meta-training code only sees
    this interface, so toy models can stand in for the transformer when
    a closed-form oracle is needed.
    """

    def __init__(self, config: NetConfig):
        self.config = config

    def init(self, seed: int) -> ParamSet:
        return init_params(self.config, seed)

    def predict(self, params, batch) -> np.ndarray:
        ids, mask = batch
        return forward(params, ids, mask, self.config, mode="eval")

    def loss(self, params, batch, targets) -> float:
        return loss_mse(self.predict(params, batch), targets)

    def loss_and_grads(self, params, batch, targets, rng=None, train: bool = True):
        ids, mask = batch
        return grads(params, ids, mask, targets, self.config, rng,
                     mode="train" if train else "eval")


def batch_from_token_sequences(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Stack TokenSequences into (ids, mask) int64/float64 arrays."""
    ids = np.asarray([s.ids for s in seqs], dtype=np.int64)
    mask = np.asarray([s.mask for s in seqs], dtype=np.float64)
    return ids, mask


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"MFCK"
_VERSION = 1


def _write_tensor_table(fh, table: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", 0, arr.ndim))  # dtype tag 0 = float64
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor_table(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _take(fh, 4))
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _take(fh, 2))
        name = _take(fh, name_len).decode("utf-8")
        dtype_tag, ndim = struct.unpack("<BB", _take(fh, 2))
        if dtype_tag != 0:
            raise CheckpointError(f"entry {name}: unsupported dtype tag {dtype_tag}")
        shape = struct.unpack(f"<{ndim}I", _take(fh, 4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_take(fh, 8 * n), dtype="<f8").reshape(shape)
        table[name] = np.array(data, dtype=np.float64)
    return table


def _take(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def save_checkpoint(path, config: NetConfig, params: ParamSet,
                    opt_state=None, meta: dict | None = None) -> None:
    """Write magic, version, config JSON, the parameter table, and optimizer state."""
    blob = json.dumps({"net": config.to_dict(), "meta": meta or {}},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_tensor_table(fh, {name: t.data for name, t in params.items()})
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            step, m, v = opt_state
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", step))
            _write_tensor_table(fh, m)
            _write_tensor_table(fh, v)


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params, opt_state, meta).

    Every stored tensor is validated against the shapes the config
    implies; disagreement raises CheckpointError, as does an unreadable
    or missing file.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    with fh:
        if _take(fh, 4) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _take(fh, 4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", _take(fh, 4))
        try:
            header = json.loads(_take(fh, blob_len).decode("utf-8"))
            config = NetConfig.from_dict(header["net"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: unreadable config block: {exc}") from None
        table = _read_tensor_table(fh)
        expected = param_shapes(config)
        if set(table) != set(expected):
            missing = sorted(set(expected) - set(table))
            extra = sorted(set(table) - set(expected))
            raise CheckpointError(
                f"{path}: parameter names disagree with config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if table[name].shape != shape:
                raise CheckpointError(
                    f"{path}: {name} has shape {table[name].shape}, config implies {shape}")
        params = ParamSet({name: Tensor(table[name], requires_grad=True)
                           for name in expected})
        (has_opt,) = struct.unpack("<B", _take(fh, 1))
        opt_state = None
        if has_opt:
            (step,) = struct.unpack("<I", _take(fh, 4))
            m = _read_tensor_table(fh)
            v = _read_tensor_table(fh)
            opt_state = (step, m, v)
    return config, params, opt_state, header.get("meta", {})
