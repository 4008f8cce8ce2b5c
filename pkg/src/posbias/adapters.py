"""Parameter-efficient adapters: location-encoding soft prompt, prompt tuning, low-rank.

The location-encoding adapter maps each candidate's relative location (a
scalar in [0, 1)) through a two-layer network to one soft token of model
width; the K soft tokens are prepended to the text. Prompt tuning uses the
same network on a constant input, so all its soft tokens coincide.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as D
from .model import ATTN_TARGETS, ModelConfig

KINDS = ("LE", "PT", "LowRank")
ACTIVATIONS = {"tanh": D.tanh, "relu": D.relu, "gelu": D.gelu}


@dataclass(frozen=True)
class AdapterSpec:
    kind: str = "LE"
    input_dim: int = 1
    hidden_dim: int = 1024
    output_dim: int = 5120
    activation: str = "tanh"
    bias: bool = True
    rank: int = 16
    targets: tuple[str, ...] = ATTN_TARGETS
    scale: float = 1.0
    location_mode: str = "offset"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        if self.hidden_dim < 1 or self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("adapter dimensions must be >= 1")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.location_mode not in ("offset", "index"):
            raise ValueError(f"unknown location mode {self.location_mode!r}")
        bad = set(self.targets) - set(ATTN_TARGETS) - {"mlp.fc", "mlp.proj"}
        if bad:
            raise ValueError(f"unknown low-rank targets {sorted(bad)}")


def relative_locations(slot_offsets: Sequence[int], total_text_len: int,
                       mode: str = "offset") -> np.ndarray:
    """Relative location of each candidate within the text context.

    ``offset`` mode divides each slot marker's token offset by the text
    length; ``index`` mode uses (i - 1) / K. Soft tokens are not counted.
    """
    offs = np.asarray(slot_offsets, dtype=np.int64)
    if total_text_len <= 0:
        raise ValueError("total text length must be positive")
    if offs.ndim != 1 or offs.size == 0:
        raise ValueError("need at least one slot offset")
    if offs.size > 1 and not (np.diff(offs) > 0).all():
        raise ValueError(f"slot offsets not strictly increasing: {offs.tolist()}")
    if offs[0] < 0 or offs[-1] >= total_text_len:
        raise ValueError("slot offsets must lie inside the text")
    if mode == "offset":
        return offs / float(total_text_len)
    if mode == "index":
        return np.arange(offs.size) / float(offs.size)
    raise ValueError(f"unknown location mode {mode!r}")


def adapter_shapes(spec: AdapterSpec, model_cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if spec.kind == "LowRank":
        shapes = {}
        d, f = model_cfg.d_model, model_cfg.ff_dim
        dims = {t: (d, d) for t in ATTN_TARGETS}
        dims["mlp.fc"] = (d, f)
        dims["mlp.proj"] = (f, d)
        for i in range(model_cfg.n_layers):
            for t in spec.targets:
                d_in, d_out = dims[t]
                prefix = f"layers.{i}.{t}" if t.startswith("mlp") else f"layers.{i}.attn.{t}"
                shapes[prefix + ".lora_a"] = (d_in, spec.rank)
                shapes[prefix + ".lora_b"] = (spec.rank, d_out)
        return shapes
    shapes = {"fc1.w": (spec.hidden_dim, spec.input_dim), "fc2.w": (spec.output_dim, spec.hidden_dim)}
    if spec.bias:
        shapes["fc1.b"] = (spec.hidden_dim,)
        shapes["fc2.b"] = (spec.output_dim,)
    return shapes


def count_tunable(spec: AdapterSpec, model_cfg: ModelConfig | None = None) -> int:
    """Exact number of trainable scalars for ``spec`` attached to ``model_cfg``."""
    if spec.kind == "LowRank":
        if model_cfg is None:
            raise ValueError("low-rank count needs the model config")
        return sum(int(np.prod(s)) for s in adapter_shapes(spec, model_cfg).values())
    n = spec.input_dim * spec.hidden_dim + spec.hidden_dim * spec.output_dim
    if spec.bias:
        n += spec.hidden_dim + spec.output_dim
    return n


def init_adapter(spec: AdapterSpec, model_cfg: ModelConfig, seed: int,
                 dtype=np.float32, out_std: float = 1e-3) -> dict[str, np.ndarray]:
    """Random adapter parameters whose output starts close to zero.

    Soft-prompt output layers start at ``out_std`` scale; low-rank ``B``
    factors start at ``out_std`` too, so every scalar gets a gradient on the
    first step while the adapted model stays near the base.
    """
    if spec.kind != "LowRank" and spec.output_dim != model_cfg.d_model:
        raise ValueError(f"adapter output_dim {spec.output_dim} != model d_model {model_cfg.d_model}")
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in adapter_shapes(spec, model_cfg).items():
        if name == "fc1.w":
            arr = rng.normal(0.0, 1.0, size=shape)
        elif name == "fc1.b":
            arr = rng.normal(0.0, 0.5, size=shape)
        elif name.endswith("lora_a"):
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            arr = rng.normal(0.0, out_std, size=shape)
        out[name] = arr.astype(dtype)
    return out


def _theta_tensors(theta: Mapping) -> dict[str, D.Tensor]:
    return {k: v if isinstance(v, D.Tensor) else D.Tensor(np.asarray(v), name=k)
            for k, v in theta.items()}


def adapter_forward(spec: AdapterSpec, theta: Mapping, S: Sequence[float] | None = None,
                    K: int | None = None) -> D.Tensor:
    """Soft-token block of shape (K, output_dim).

    LE feeds each relative location through the network independently; PT
    feeds the constant 1.0 (``K`` must then be given or inferred from ``S``).
    """
    if spec.kind == "LowRank":
        raise ValueError("low-rank adapters do not produce soft tokens")
    th = _theta_tensors(theta)
    dtype = th["fc1.w"].dtype
    if spec.kind == "LE":
        if S is None:
            raise ValueError("location-encoding adapter needs relative locations")
        s = np.asarray(S, dtype=dtype).reshape(-1)
        if K is not None and s.size != K:
            raise ValueError(f"got {s.size} locations for K={K}")
        inp = s.reshape(-1, 1)
    else:
        n = K if K is not None else (len(S) if S is not None else None)
        if n is None:
            raise ValueError("prompt-tuning adapter needs K")
        inp = np.ones((n, 1), dtype=dtype)
    if spec.input_dim != 1:
        raise ValueError("soft-prompt adapters take a scalar input")
    x = D.Tensor(inp)
    h = D.matmul(x, D.transpose(th["fc1.w"]))
    if spec.bias:
        h = h + th["fc1.b"]
    h = ACTIVATIONS[spec.activation](h)
    out = D.matmul(h, D.transpose(th["fc2.w"]))
    if spec.bias:
        out = out + th["fc2.b"]
    return out


def lowrank_effective_weight(W, A, B, scale: float):
    """``W + scale * (A @ B)^T`` for W of shape (d_out, d_in), A (d_in, r), B (r, d_out).

    Works on tensors (differentiable) or plain arrays; ``W`` is never modified.
    """
    if isinstance(W, D.Tensor) or isinstance(A, D.Tensor) or isinstance(B, D.Tensor):
        W_, A_, B_ = (x if isinstance(x, D.Tensor) else D.Tensor(np.asarray(x)) for x in (W, A, B))
        _check_lowrank_shapes(W_.shape, A_.shape, B_.shape)
        if scale == 0:
            return W_
        return W_ + D.mul(D.transpose(D.matmul(A_, B_)), float(scale))
    W = np.asarray(W)
    A = np.asarray(A)
    B = np.asarray(B)
    _check_lowrank_shapes(W.shape, A.shape, B.shape)
    if scale == 0:
        return W.copy()
    return W + scale * (A @ B).T


def _check_lowrank_shapes(ws, as_, bs) -> None:
    if len(ws) != 2 or len(as_) != 2 or len(bs) != 2:
        raise D.ShapeError("low-rank factors must be matrices")
    d_out, d_in = ws
    if as_[0] != d_in or bs[1] != d_out or as_[1] != bs[0]:
        raise D.ShapeError(f"low-rank shapes disagree: W{ws} A{as_} B{bs}")


def lora_bindings(spec: AdapterSpec, theta: Mapping) -> dict[str, tuple]:
    """Map weight prefixes (e.g. ``layers.0.attn.q``) to (A, B, scale) for the model."""
    th = _theta_tensors(theta)
    out = {}
    for name in th:
        if name.endswith(".lora_a"):
            prefix = name[: -len(".lora_a")]
            out[prefix] = (th[name], th[prefix + ".lora_b"], spec.scale)
    return out


def spec_dict(spec: AdapterSpec) -> dict:
    d = asdict(spec)
    d["targets"] = list(spec.targets)
    return d


def spec_from_dict(d: Mapping) -> AdapterSpec:
    d = dict(d)
    if "targets" in d:
        d["targets"] = tuple(d["targets"])
    return AdapterSpec(**d)
