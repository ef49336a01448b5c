"""Gradient training of toy draft models under any objective.

Draft models are logit tables or linear maps from context features to
logits.  The optimizer is Adam with decoupled weight decay, global-norm
clipping and a linear-warmup cosine schedule.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .dist import mask_logits, softmax
from .toyfit import ToyTask


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 0.5
    warmup_steps: int = 100
    epochs: int = 200
    total_steps: int | None = None
    batch_size: int = 64
    seed: int = 0
    head_gamma: float = 0.8
    init_std: float = 0.01
    early_stop_window: int | None = 20
    early_stop_tol: float = 1e-5
    mask_kl_target: bool = True
    # EMA factor for the acceptance rate that drives the adaptive blend; 0 uses the raw batch mean
    lambda_smoothing: float = 0.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate, clip norm, batch size and epochs must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if not 0.0 <= self.lambda_smoothing < 1.0:
            raise ValueError("lambda_smoothing must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class ToyDraftParams:
    """Draft logits: ``shared`` (1, V), ``table`` (C, V) or ``linear`` (F, V) weights."""

    kind: str
    weights: np.ndarray

    def logits(self, task: ToyTask, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self.kind == "shared":
            z = np.broadcast_to(self.weights[0], (len(idx), task.V))
        elif self.kind == "table":
            z = self.weights[idx]
        elif self.kind == "linear":
            z = task.features[idx] @ self.weights
        else:
            raise ValueError(f"unknown parameterization {self.kind!r}")
        if task.draft_vocab is not None:
            z = mask_logits(z, task.draft_vocab)
        return np.array(z, dtype=np.float64)

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.array(d["weights"], dtype=np.float64))


def init_params(task: ToyTask, rng: np.random.Generator, std: float = 0.01) -> ToyDraftParams:
    if task.family == "shared":
        shape = (1, task.V)
    elif task.family == "table":
        shape = (task.C, task.V)
    else:
        shape = (task.features.shape[1], task.V)
    return ToyDraftParams(task.family, rng.normal(0.0, std, size=shape))


def backprop_draft(params: ToyDraftParams, task: ToyTask, idx, dlogits) -> np.ndarray:
    """Chain rule from logit gradients ``(B, V)`` to the parameter gradient."""
    idx = np.asarray(idx)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if task.draft_vocab is not None:
        keep = np.zeros(task.V, dtype=bool)
        keep[list(task.draft_vocab)] = True
        dlogits = np.where(keep, dlogits, 0.0)
    if params.kind == "shared":
        return dlogits.sum(axis=0, keepdims=True)
    if params.kind == "table":
        g = np.zeros_like(params.weights)
        np.add.at(g, idx, dlogits)
        return g
    return task.features[idx].T @ dlogits


def lr_at(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup to ``learning_rate`` then cosine decay to zero at ``total_steps``."""
    total = cfg.total_steps if total_steps is None else total_steps
    if total is None:
        raise ValueError("total_steps is not known")
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    if total <= cfg.warmup_steps:
        return cfg.learning_rate
    frac = min(1.0, (step - cfg.warmup_steps) / (total - cfg.warmup_steps))
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def clip_by_global_norm(grads: list, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def optimizer_step(params: list, grads: list, state: OptimizerState, cfg: TrainConfig, lr: float):
    """One clipped AdamW update; returns new parameter arrays and the pre-clip norm."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.adam_eps)
        out.append(w - lr * cfg.weight_decay * w - lr * update)
    return out, norm


@dataclass
class TrainHistory:
    """One record per (epoch, head).

    ``alpha`` and ``lambda`` come from the last step of the epoch (the
    batch-mean acceptance rate and the blend weight computed from it);
    ``eval_alpha`` is the mean acceptance over all contexts after the epoch.
    """

    loss_name: str
    records: list = field(default_factory=list)

    @property
    def has_lambda(self) -> bool:
        return self.loss_name.startswith("lk_hybrid_adaptive")

    def columns(self):
        cols = ["epoch", "head", "loss", "alpha"]
        if self.has_lambda:
            cols.append("lambda")
        return cols + ["eval_alpha"]

    def final_alpha(self, head: int = 0) -> float:
        return [r for r in self.records if r["head"] == head][-1]["eval_alpha"]

    def head_records(self, head: int = 0) -> list:
        return [r for r in self.records if r["head"] == head]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(cols)
        for r in self.records:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"loss": self.loss_name, "records": self.records}, sort_keys=True)


def head_loss_and_grad(
    params: ToyDraftParams, task: ToyTask, idx, kind: L.LossKind, cfg: TrainConfig, lam=None, sched_alpha=None
):
    """Mean loss over the batch ``idx`` and its parameter gradient for one head.

    ``lam`` freezes the blend weight of hybrid objectives.  The adaptive one
    otherwise computes it from ``sched_alpha``, defaulting to this batch's
    mean acceptance rate.
    Returns ``(loss, grad, batch_alpha, lam)``.
    """
    z = params.logits(task, idx)
    q = softmax(z)
    p = task.targets[idx]
    p_kl = None
    if task.draft_vocab is not None:
        if cfg.mask_kl_target:
            p_kl = L.mask_target(p, task.draft_vocab)
        elif kind.name != "lk_alpha" and kind.name != "tv" and np.any(L.support_violation(p, q)):
            raise TrainingAborted(
                "KL is infinite: the target puts mass outside the draft vocabulary; "
                "mask the target (renormalize it over the draft vocabulary) for KL terms"
            )
    alpha = np.asarray(L.acceptance_rate(p, q))
    a_batch = L.per_position_alpha(alpha)
    if lam is None and kind.adaptive:
        lam = L.lambda_schedule(a_batch if sched_alpha is None else sched_alpha, kind.eta)
    if lam is not None and kind.name in ("lk_hybrid_fixed", "lk_hybrid_adaptive"):
        out = L.loss_lk_hybrid(p, q, lam, p_kl)
    else:
        out = L.loss_and_grad(kind, p, q, p_kl=p_kl)
    b = len(idx)
    loss = float(np.mean(out.value))
    grad = backprop_draft(params, task, idx, out.grad / b)
    return loss, grad, a_batch, out.lam


def batch_alpha(params: ToyDraftParams, task: ToyTask, idx) -> float:
    return L.per_position_alpha(L.acceptance_rate(task.targets[idx], softmax(params.logits(task, idx))))


def eval_alpha(params: ToyDraftParams, task: ToyTask) -> float:
    idx = np.arange(task.C)
    return float(np.mean(L.acceptance_rate(task.targets, softmax(params.logits(task, idx)))))


def multihead_train(tasks, kind: L.LossKind, cfg: TrainConfig, params=None):
    """Train independent draft heads, one per position, on a weighted sum of losses.

    Head ``n`` (0-based) has weight ``head_gamma ** n``; each head's blend
    weight follows its own batch-mean acceptance rate.  Returns the list of
    parameters and the :class:`TrainHistory`.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one head")
    n_ctx = tasks[0].C
    if any(t.C != n_ctx for t in tasks):
        raise ValueError("all heads must share the same contexts")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = [init_params(t, rng, cfg.init_std) for t in tasks]
    agg = L.HeadAggregation(cfg.head_gamma, len(tasks))
    weights = agg.weights
    bs = min(cfg.batch_size, n_ctx)
    steps_per_epoch = math.ceil(n_ctx / bs)
    total = cfg.total_steps or cfg.epochs * steps_per_epoch
    state = OptimizerState.zeros_like([p.weights for p in params])
    history = TrainHistory(str(kind))
    watch = []
    ema = [None] * len(tasks)
    smooth = cfg.lambda_smoothing if kind.adaptive else 0.0
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_ctx) if bs < n_ctx else np.arange(n_ctx)
        losses = np.zeros(len(tasks))
        n_steps = 0
        last = [None] * len(tasks)
        for lo in range(0, n_ctx, bs):
            if step >= total:
                break
            idx = order[lo : lo + bs]
            grads = []
            for h, (pr, task) in enumerate(zip(params, tasks)):
                sched = None
                if smooth:
                    a_now = batch_alpha(pr, task, idx)
                    ema[h] = a_now if ema[h] is None else smooth * ema[h] + (1.0 - smooth) * a_now
                    sched = ema[h]
                loss, g, a, lam = head_loss_and_grad(pr, task, idx, kind, cfg, sched_alpha=sched)
                losses[h] += loss
                grads.append(weights[h] * g)
                last[h] = (a, lam)
            new, _ = optimizer_step([p.weights for p in params], grads, state, cfg, lr_at(step + 1, cfg, total))
            for pr, w in zip(params, new):
                pr.weights = w
            step += 1
            n_steps += 1
        if n_steps == 0:
            break
        for h, (pr, task) in enumerate(zip(params, tasks)):
            rec = {
                "epoch": epoch,
                "head": h,
                "loss": float(losses[h] / n_steps),
                "alpha": float(last[h][0]),
                "eval_alpha": eval_alpha(pr, task),
            }
            if history.has_lambda:
                rec["lambda"] = float(last[h][1])
            history.records.append(rec)
        watch.append(np.mean([r["eval_alpha"] for r in history.records[-len(tasks):]]))
        w = cfg.early_stop_window
        if w and len(watch) > w and abs(watch[-1] - watch[-1 - w]) < cfg.early_stop_tol:
            break
        if step >= total:
            break
    return params, history


def train_draft(task: ToyTask, kind: L.LossKind, cfg: TrainConfig, params=None):
    """Single-head training; identical to :func:`multihead_train` with one task."""
    ps, hist = multihead_train([task], kind, cfg, None if params is None else [params])
    return ps[0], hist


def effective_loss(params: list, tasks: list, idx, kind: L.LossKind, cfg: TrainConfig, lams=None):
    """Head-weighted batch loss and parameter gradients (blend weights frozen via ``lams``)."""
    agg = L.HeadAggregation(cfg.head_gamma, len(tasks))
    per_head, grads, used = [], [], []
    for h, (pr, task) in enumerate(zip(params, tasks)):
        lam = None if lams is None else lams[h]
        loss, g, _, lam_used = head_loss_and_grad(pr, task, idx, kind, cfg, lam)
        per_head.append(loss)
        grads.append(agg.weights[h] * g)
        used.append(lam_used)
    return L.aggregate_heads(per_head, agg), grads, used, per_head


def checkpoint_dict(params: list, tasks: list, kind: L.LossKind, cfg: TrainConfig) -> dict:
    """Head weights with the loss, config, tasks and their fingerprints."""
    return {
        "loss": str(kind),
        "config": cfg.to_dict(),
        "task_fingerprints": [t.fingerprint() for t in tasks],
        "tasks": [t.to_dict() for t in tasks],
        "heads": [p.to_dict() for p in params],
    }


def save_checkpoint(path, params: list, tasks: list, kind: L.LossKind, cfg: TrainConfig):
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(params, tasks, kind, cfg), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        data = json.load(fh)
    return [ToyDraftParams.from_dict(h) for h in data["heads"]], data
