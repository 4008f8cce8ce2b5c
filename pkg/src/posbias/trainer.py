"""Bias-induction pretraining and adapter fine-tuning loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as D
from .adapters import (AdapterSpec, adapter_forward, count_tunable, init_adapter, lora_bindings,
                       relative_locations, spec_dict)
from .checkpoint import Checkpoint
from .model import Model, ModelConfig, init_model, param_hash
from .tasks import RetrievalInstance, TaskConfig, encode_batch, with_k

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    schedule: str = "cosine"
    epochs: int = 4
    batch_size: int = 32
    seed: int = 0
    precision: str = "float32"
    loss_mask: str = "answer"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss_mask not in ("answer", "full"):
            raise ValueError(f"unknown loss_mask {self.loss_mask!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``learning_rate`` at step 0 to zero at the last step."""
    base = cfg.learning_rate
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return base * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant" or total_steps <= 1:
        return base
    start = cfg.warmup_steps
    frac = (step - start) / max(total_steps - 1 - start, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class AdamW:
    """Adam with decoupled weight decay over a dict of tensors."""

    def __init__(self, params: Mapping[str, D.Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        if c.grad_clip is not None:
            norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                 for p in self.params.values() if p.grad is not None))
            clip = min(1.0, c.grad_clip / (norm + 1e-12))
        else:
            clip = 1.0
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * clip
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            upd = mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype)


def loss(logits: D.Tensor, targets, mask=None) -> D.Tensor:
    """Mean next-token cross-entropy over the masked positions."""
    return D.cross_entropy(logits, targets, mask)


class MetricsLog:
    """Appends one JSON record per optimizer step."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def write(self, **rec) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _batch_loss(model: Model, tokens: np.ndarray, targets: np.ndarray, soft, lora,
                mask_policy: str) -> D.Tensor:
    B, L = tokens.shape
    n_soft = 0 if soft is None else soft.shape[-2]
    h = model.hidden(tokens, soft, lora)
    if mask_policy == "answer":
        logits = model.logits_at(h, np.arange(B), targets - 1 + n_soft)
        return loss(logits, tokens[np.arange(B), targets])
    rows = np.repeat(np.arange(B), L - 1)
    cols = np.tile(np.arange(L - 1), B) + n_soft
    logits = model.logits_at(h, rows, cols)
    return loss(logits, tokens[:, 1:].reshape(-1))


def _check_finite_loss(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at step {step}")


def _epoch_batches(sizes: Sequence[int], cfg: TrainConfig) -> list[list[tuple[int, np.ndarray]]]:
    """Per epoch, a list of (group, row indices) batches.

    Rows are shuffled within each group and cut into batches; with more than
    one group (mixed candidate counts) the batch order is shuffled as well.
    """
    epochs = []
    for e in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 7919, e])
        batches = []
        for g, n in enumerate(sizes):
            order = rng.permutation(n)
            batches.extend((g, order[i:i + cfg.batch_size]) for i in range(0, n, cfg.batch_size))
        if len(sizes) > 1:
            batches = [batches[i] for i in rng.permutation(len(batches))]
        epochs.append(batches)
    return epochs


def _run_loop(model: Model, trainable: Mapping[str, D.Tensor],
              groups: Sequence[tuple[np.ndarray, np.ndarray]],
              make_soft: Callable[[], D.Tensor | None],
              make_lora: Callable[[], Mapping | None], cfg: TrainConfig,
              metrics: MetricsLog, progress: Callable[[int, float], None] | None) -> int:
    plan = _epoch_batches([len(t) for t, _ in groups], cfg)
    total = sum(len(b) for b in plan)
    opt = AdamW(trainable, cfg)
    step = 0
    for epoch, batches in enumerate(plan):
        losses = []
        for g, idx in batches:
            tokens, targets = groups[g]
            D.zero_grad(trainable.values())
            lval = _batch_loss(model, tokens[idx], targets[idx], make_soft(), make_lora(),
                               cfg.loss_mask)
            value = lval.item()
            _check_finite_loss(value, step)
            D.backprop(lval)
            lr = lr_at(step, total, cfg)
            opt.step(lr)
            metrics.write(step=step, epoch=epoch, loss=value, lr=lr)
            losses.append(value)
            step += 1
        mean = float(np.mean(losses))
        log.info("epoch %d mean loss %.4f", epoch, mean)
        if progress is not None:
            progress(epoch, mean)
    return step


def pretrain(model_cfg: ModelConfig, task_cfg: TaskConfig, dataset: Sequence[RetrievalInstance],
             cfg: TrainConfig, *, init_seed: int | None = None, soft_prefix: int | None = None,
             metrics_path: str | Path | None = None,
             progress: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Train a model from scratch on ``dataset``.

    A block of ``soft_prefix`` zero vectors (default K) is prepended during
    training so that the text sits at the same positions it will occupy once
    an adapter's soft tokens are attached. A zero block is exactly what a
    location-encoding adapter with all-zero parameters produces.

    The dataset may mix candidate counts up to ``task_cfg.K`` (see
    :func:`~posbias.tasks.gen_curriculum`); every batch holds a single count
    and the prefix length stays fixed.
    """
    if not dataset:
        raise ValueError("empty dataset")
    n_soft = task_cfg.K if soft_prefix is None else soft_prefix
    seed = cfg.seed if init_seed is None else init_seed
    params = init_model(model_cfg, seed, dtype=cfg.dtype)
    model = Model(model_cfg, params, trainable=True)
    by_k: dict[int, list[RetrievalInstance]] = {}
    for inst in dataset:
        if inst.K > task_cfg.slot_capacity:
            raise ValueError(f"instance with {inst.K} candidates exceeds K={task_cfg.K}")
        by_k.setdefault(inst.K, []).append(inst)
    groups = []
    for K in sorted(by_k):
        tokens, targets, _ = encode_batch(by_k[K], with_k(task_cfg, K),
                                          model_cfg.max_seq_len - n_soft)
        groups.append((tokens, targets))
    zero = D.Tensor(np.zeros((n_soft, model_cfg.d_model), dtype=cfg.dtype)) if n_soft else None
    metrics = MetricsLog(metrics_path)
    steps = _run_loop(model, model.tensors, groups, lambda: zero, lambda: None, cfg,
                      metrics, progress)
    return Checkpoint(
        kind="model",
        params={k: t.data.astype(np.float32) for k, t in model.tensors.items()},
        config={"model": asdict(model_cfg), "task": asdict(task_cfg), "train": asdict(cfg),
                "soft_prefix": n_soft},
        seeds={"train": cfg.seed, "init": seed},
        step=steps,
        meta={"final_loss": metrics.records[-1]["loss"]},
    )


def load_model(ckpt: Checkpoint, dtype=np.float32) -> Model:
    if ckpt.kind != "model":
        raise ValueError(f"expected a model checkpoint, got {ckpt.kind!r}")
    cfg = ModelConfig(**ckpt.config["model"])
    return Model(cfg, {k: v.astype(dtype) for k, v in ckpt.params.items()})


def soft_tokens(spec: AdapterSpec, theta: Mapping, task_cfg: TaskConfig,
                instance: RetrievalInstance | None = None) -> D.Tensor:
    """Soft-token block for an adapter over ``task_cfg``'s layout."""
    from .tasks import encode

    if instance is None:
        from .tasks import gen_instance

        instance = gen_instance(task_cfg, 1, 0)
    enc = encode(instance, task_cfg)
    if spec.kind == "LE":
        S = relative_locations(enc.slot_offsets, len(enc.tokens), spec.location_mode)
        return adapter_forward(spec, theta, S, K=instance.K)
    return adapter_forward(spec, theta, None, K=instance.K)


def finetune(base: Checkpoint, spec: AdapterSpec, task_cfg: TaskConfig,
             dataset: Sequence[RetrievalInstance], cfg: TrainConfig, *,
             init_seed: int | None = None, metrics_path: str | Path | None = None,
             progress: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Train adapter parameters over a frozen base model.

    The caller supplies permutation-augmented data. Every instance of a task
    config shares one layout, so the relative locations (and with them the
    location-encoding soft tokens) are computed from that layout.
    """
    if not dataset:
        raise ValueError("empty dataset")
    base_hash = param_hash(base.params)
    model = load_model(base, cfg.dtype)
    mcfg = model.cfg
    if spec.kind != "LowRank" and spec.output_dim != mcfg.d_model:
        raise ValueError(f"adapter output_dim {spec.output_dim} != base d_model {mcfg.d_model}")
    seed = cfg.seed if init_seed is None else init_seed
    theta0 = init_adapter(spec, mcfg, seed, dtype=cfg.dtype)
    theta = {k: D.Tensor(v.copy(), requires_grad=True, name=k) for k, v in theta0.items()}
    n_soft = 0 if spec.kind == "LowRank" else task_cfg.K
    tokens, targets, offsets = encode_batch(dataset, task_cfg, mcfg.max_seq_len - n_soft)
    if spec.kind == "LE":
        S = relative_locations(offsets, tokens.shape[1], spec.location_mode)
    else:
        S = None

    if spec.kind == "LowRank":
        base_prefix = int(base.config.get("soft_prefix", 0))
        zero = D.Tensor(np.zeros((base_prefix, mcfg.d_model), dtype=cfg.dtype))

        def make_soft():
            return zero if base_prefix else None

        def make_lora():
            return lora_bindings(spec, theta)
    else:
        def make_soft():
            return adapter_forward(spec, theta, S, K=task_cfg.K)

        def make_lora():
            return None

    metrics = MetricsLog(metrics_path)
    steps = _run_loop(model, theta, [(tokens, targets)], make_soft, make_lora, cfg, metrics,
                      progress)

    if param_hash({k: t.data.astype(np.float32) for k, t in model.tensors.items()}) != base_hash \
            and cfg.dtype == np.float32:
        raise RuntimeError("base parameters changed during fine-tuning")
    if param_hash(base.params) != base_hash:
        raise RuntimeError("base checkpoint mutated during fine-tuning")
    changed = int(sum(np.count_nonzero(theta[k].data != theta0[k]) for k in theta))
    return Checkpoint(
        kind="adapter",
        params={k: t.data.astype(np.float32) for k, t in theta.items()},
        config={"adapter": spec_dict(spec), "task": asdict(task_cfg), "train": asdict(cfg),
                "model": asdict(mcfg)},
        seeds={"train": cfg.seed, "init": seed},
        step=steps,
        meta={"base_hash": base_hash, "updated_scalars": changed,
              "tunable": count_tunable(spec, mcfg), "final_loss": metrics.records[-1]["loss"]},
    )


class ModelPredictor:
    """Callable predictor over a (base, optional adapter) pair, with batch support."""

    def __init__(self, base: Checkpoint, task_cfg: TaskConfig, adapter: Checkpoint | None = None):
        from .adapters import spec_from_dict

        self.task = task_cfg
        self.model = load_model(base)
        self.n_prefix = int(base.config.get("soft_prefix", 0))
        self.spec = None
        self.theta = None
        if adapter is not None:
            self.spec = spec_from_dict(adapter.config["adapter"])
            self.theta = adapter.params

    def _soft_lora(self, inst: RetrievalInstance):
        lora = None
        if self.spec is not None and self.spec.kind != "LowRank":
            cfg = with_k(self.task, inst.K)
            return soft_tokens(self.spec, self.theta, cfg, inst), None
        if self.spec is not None:
            lora = lora_bindings(self.spec, self.theta)
        soft = None
        if self.n_prefix:
            soft = D.Tensor(np.zeros((self.n_prefix, self.model.cfg.d_model),
                                     dtype=self.model.dtype))
        return soft, lora

    def predict_many(self, instances: Sequence[RetrievalInstance]) -> list[tuple[int, np.ndarray]]:
        from .model import predict_slots

        out: list[tuple[int, np.ndarray]] = [None] * len(instances)  # type: ignore[list-item]
        groups: dict[int, list[int]] = {}
        for i, inst in enumerate(instances):
            groups.setdefault(inst.K, []).append(i)
        for K, idx in groups.items():
            subset = [instances[i] for i in idx]
            soft, lora = self._soft_lora(subset[0])
            task = self.task if K == self.task.K else with_k(self.task, K)
            for i, res in zip(idx, predict_slots(self.model, subset, task, soft, lora)):
                out[i] = res
        return out

    def __call__(self, inst: RetrievalInstance) -> int:
        return self.predict_many([inst])[0][0]
