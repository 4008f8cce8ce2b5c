"""Desk-scale decoder-only transformer with optional soft-token prefix.

Pre-LayerNorm blocks, learned absolute position embeddings, GELU MLP, untied
output projection. Weight matrices use the (d_out, d_in) layout.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as D
from .tasks import RetrievalInstance, TaskConfig, encode_batch

ATTN_TARGETS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 128
    d_ff: int | None = None
    positional: str = "learned"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len) < 1:
            raise ValueError("model dimensions must be positive")
        if self.positional != "learned":
            raise ValueError(f"unsupported positional scheme {self.positional!r}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @classmethod
    def for_task(cls, task: TaskConfig, **kw) -> "ModelConfig":
        """Config sized to fit ``task`` plus a K-token soft prefix."""
        kw.setdefault("max_seq_len", task.seq_len + task.K)
        return cls(vocab_size=task.vocab.size, **kw)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for t in ATTN_TARGETS:
            shapes[p + f"attn.{t}.w"] = (d, d)
            shapes[p + f"attn.{t}.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.fc.w"] = (f, d)
        shapes[p + "mlp.fc.b"] = (f,)
        shapes[p + "mlp.proj.w"] = (d, f)
        shapes[p + "mlp.proj.b"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (cfg.vocab_size, d)
    return shapes


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Scaled-normal weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    resid_scale = 0.02 / math.sqrt(2 * cfg.n_layers)
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name.endswith("attn.o.w") or name.endswith("mlp.proj.w"):
            arr = rng.normal(0.0, resid_scale, size=shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        out[name] = arr.astype(dtype)
    return out


def param_hash(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class Model:
    """Parameters wrapped as tensors plus the forward pass.

    ``trainable=False`` (the default) leaves every weight gradient-free, which
    is how a frozen base is used during adapter fine-tuning.
    """

    def __init__(self, cfg: ModelConfig, params: Mapping[str, np.ndarray], trainable: bool = False):
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ValueError(f"parameter set mismatch; missing={missing[:3]} extra={extra[:3]}")
        for k, shp in shapes.items():
            if tuple(params[k].shape) != shp:
                raise ValueError(f"{k}: shape {params[k].shape} != {shp}")
        self.cfg = cfg
        self.tensors = {k: D.Tensor(np.asarray(v), requires_grad=trainable, name=k)
                        for k, v in params.items()}

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def _linear(self, x: D.Tensor, prefix: str, lora: Mapping | None) -> D.Tensor:
        w = self.tensors[prefix + ".w"]
        if lora is not None and prefix in lora:
            from .adapters import lowrank_effective_weight

            a, b, scale = lora[prefix]
            w = lowrank_effective_weight(w, a, b, scale)
        return D.matmul(x, D.transpose(w)) + self.tensors[prefix + ".b"]

    def hidden(self, tokens: np.ndarray, soft: D.Tensor | None = None,
               lora: Mapping | None = None) -> D.Tensor:
        """Final-LayerNorm hidden states, shape (B, K_soft + L, d)."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be (B, L)")
        B, L = tokens.shape
        n_soft = 0 if soft is None else soft.shape[-2]
        T = L + n_soft
        if T > cfg.max_seq_len:
            raise ValueError(f"sequence of {T} positions exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {cfg.vocab_size}")

        x = D.embedding(self.tensors["tok_emb"], tokens)
        if soft is not None:
            if soft.shape[-1] != cfg.d_model:
                raise ValueError(f"soft tokens have dim {soft.shape[-1]}, model d={cfg.d_model}")
            if soft.data.ndim == 2:
                soft = D.reshape(D.concat([D.reshape(soft, (1, n_soft, cfg.d_model))] * B, axis=0),
                                 (B, n_soft, cfg.d_model))
            x = D.concat([soft, x], axis=1)
        pos = D.take(self.tensors["pos_emb"], np.arange(T), axis=0)
        x = x + pos

        H = cfg.n_heads
        dh = cfg.d_model // H
        causal = np.tril(np.ones((T, T), dtype=bool))
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h = D.layer_norm(x, self.tensors[p + "ln1.g"], self.tensors[p + "ln1.b"])
            q, k, v = (D.transpose(D.reshape(self._linear(h, p + f"attn.{t}", lora), (B, T, H, dh)),
                                   (0, 2, 1, 3)) for t in ("q", "k", "v"))
            att = D.softmax(D.mul(D.matmul(q, D.transpose(k, (0, 1, 3, 2))), scale), causal)
            y = D.reshape(D.transpose(D.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = x + self._linear(y, p + "attn.o", lora)
            h = D.layer_norm(x, self.tensors[p + "ln2.g"], self.tensors[p + "ln2.b"])
            h = D.gelu(self._linear(h, p + "mlp.fc", lora))
            x = x + self._linear(h, p + "mlp.proj", lora)
        return D.layer_norm(x, self.tensors["ln_f.g"], self.tensors["ln_f.b"])

    def logits_at(self, hidden: D.Tensor, rows: np.ndarray, cols: np.ndarray) -> D.Tensor:
        """Logits for the (batch row, position) pairs, shape (N, V)."""
        B, T, d = hidden.shape
        flat = D.reshape(hidden, (B * T, d))
        picked = D.take(flat, np.asarray(rows) * T + np.asarray(cols), axis=0)
        return D.matmul(picked, D.transpose(self.tensors["head.w"]))

    def forward(self, tokens, soft: D.Tensor | None = None, lora: Mapping | None = None) -> D.Tensor:
        """Logits at every position: (K_soft + L, V) for 1-D tokens, (B, K_soft + L, V) for 2-D."""
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        h = self.hidden(tokens[None] if single else tokens, soft, lora)
        out = D.matmul(h, D.transpose(self.tensors["head.w"]))
        return D.reshape(out, out.shape[1:]) if single else out


def restricted_distribution(slot_logits: np.ndarray) -> tuple[int, np.ndarray]:
    """Softmax over the slot-ID logits and the 1-based argmax (ties to the lowest slot)."""
    z = np.asarray(slot_logits, dtype=np.float64)
    e = np.exp(z - z.max())
    dist = e / e.sum()
    return int(np.argmax(z)) + 1, dist


def predict_slots(model: Model, instances: Sequence[RetrievalInstance], task: TaskConfig,
                  soft: D.Tensor | None = None, lora: Mapping | None = None,
                  batch_size: int = 256) -> list[tuple[int, np.ndarray]]:
    """Constrained answer prediction for equal-K instances."""
    if not instances:
        return []
    K = instances[0].K
    vocab = task.vocab
    if K > vocab.k_max:
        raise ValueError(f"K={K} exceeds reserved slot tokens ({vocab.k_max})")
    slot_ids = np.array([vocab.slot_token(i) for i in range(1, K + 1)])
    n_soft = 0 if soft is None else soft.shape[-2]
    out = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        tokens, targets, _ = encode_batch(chunk, task)
        h = model.hidden(tokens, soft, lora)
        B = len(chunk)
        logits = model.logits_at(h, np.arange(B), targets - 1 + n_soft).data
        for row in logits[:, slot_ids]:
            out.append(restricted_distribution(row))
    return out


def predict_slot(model: Model, instance: RetrievalInstance, task: TaskConfig,
                 soft: D.Tensor | None = None, lora: Mapping | None = None) -> tuple[int, np.ndarray]:
    return predict_slots(model, [instance], task, soft, lora)[0]


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
