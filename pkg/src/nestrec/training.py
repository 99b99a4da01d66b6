"""Optimization loop, evaluation, and the width-performance curve.

Training minimizes the nested loss with AdamW (decoupled weight decay),
shuffling with a seeded per-epoch permutation. After each epoch the
validation split is scored at every ladder width; NDCG@10 at the full width
drives early stopping, and the best-so-far parameters are what training
returns. A non-finite loss or gradient aborts the run and falls back to the
last good parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import rng as nrng
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import SequenceDataset
from .errors import DivergenceError
from .metrics import KS_DEFAULT, MetricsReport, popularity_ranks, rank_of_targets
from .model import (EVAL, ModelParams, RunContext, build_model, extract,
                    forward_scores, nested_loss, score_all_sizes)

__all__ = ["AdamState", "adamw_step", "train", "TrainResult", "compute_ranks",
           "evaluate", "evaluate_all_sizes", "size_curve", "popularity_report",
           "write_history", "format_history"]


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: dict[str, np.ndarray] = dc_field(default_factory=dict)

    @classmethod
    def init(cls, named_tensors) -> "AdamState":
        state = cls()
        for name, tensor in named_tensors:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state

    @classmethod
    def from_blobs(cls, blobs: dict, step: int) -> "AdamState":
        state = cls(step=step)
        for key, arr in blobs.items():
            if key.startswith("m/"):
                state.m[key[2:]] = arr.copy()
            elif key.startswith("v/"):
                state.v[key[2:]] = arr.copy()
        return state


def global_grad_norm(named_tensors) -> float:
    total = 0.0
    for _, tensor in named_tensors:
        if tensor.grad is not None:
            total += float((tensor.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def adamw_step(named_tensors, state: AdamState, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8,
               grad_clip: float = 0.0) -> None:
    """One update: decoupled decay first, then the bias-corrected moment step."""
    b1, b2 = betas
    for name, tensor in named_tensors:
        g = tensor.grad
        if g is not None and not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise DivergenceError(
                f"non-finite gradient in {name} at step {state.step + 1}: "
                f"{bad} of {g.size} entries")
    scale = 1.0
    if grad_clip > 0.0:
        norm = global_grad_norm(named_tensors)
        if norm > grad_clip:
            scale = grad_clip / norm
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, tensor in named_tensors:
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        elif scale != 1.0:
            g = g * scale
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay != 0.0:
            tensor.data = tensor.data - lr * weight_decay * tensor.data
        tensor.data = tensor.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# evaluation


def compute_ranks(params: ModelParams, inputs: np.ndarray,
                  labels: np.ndarray, width: int | None = None,
                  batch_size: int = 256) -> np.ndarray:
    """Rank of each user's target item over the full catalog."""
    ranks = []
    with T.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            chunk = inputs[start:start + batch_size]
            targets = labels[start:start + batch_size] - 1
            scores = forward_scores(params, chunk, EVAL, width=width)
            ranks.append(rank_of_targets(scores.numpy(), targets))
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def evaluate(params: ModelParams, inputs: np.ndarray, labels: np.ndarray,
             ks=KS_DEFAULT, width: int | None = None, batch_size: int = 256,
             split: str = "valid") -> MetricsReport:
    report = MetricsReport(split=split, ks=tuple(ks))
    m = params.width if width is None else width
    report.add(m, compute_ranks(params, inputs, labels, width, batch_size))
    return report


def evaluate_all_sizes(params: ModelParams, inputs: np.ndarray,
                       labels: np.ndarray, ks=KS_DEFAULT,
                       batch_size: int = 256,
                       split: str = "valid") -> MetricsReport:
    """Metrics at every ladder width; segment-norm models share one forward
    pass per batch across all widths."""
    per_size: dict[int, list[np.ndarray]] = {m: [] for m in params.ladder}
    with T.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            chunk = inputs[start:start + batch_size]
            targets = labels[start:start + batch_size] - 1
            scores = score_all_sizes(params, chunk, EVAL)
            for m, s in scores.items():
                per_size[m].append(rank_of_targets(s.numpy(), targets))
    report = MetricsReport(split=split, ks=tuple(ks))
    for m, chunks in per_size.items():
        report.add(m, np.concatenate(chunks))
    return report


def popularity_report(dataset: SequenceDataset, ks=KS_DEFAULT,
                      split: str = "test") -> dict[str, float]:
    """Model-free floor: rank every target by training-set popularity."""
    counts = dataset.train_item_counts()
    if split == "test":
        _, labels = dataset.test_batch()
    else:
        _, labels = dataset.valid_batch()
    ranks = popularity_ranks(counts, labels - 1)
    report = MetricsReport(split=split, ks=tuple(ks))
    return report.add(0, ranks)


def size_curve(params: ModelParams, dataset: SequenceDataset, ks=KS_DEFAULT,
               batch_size: int = 256) -> MetricsReport:
    """Test metrics of each extracted submodel (no retraining involved)."""
    inputs, labels = dataset.test_batch()
    report = MetricsReport(split="test", ks=tuple(ks))
    for m in params.ladder:
        sub = extract(params, m)
        report.add(m, compute_ranks(sub, inputs, labels,
                                    batch_size=batch_size))
    return report


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    history: list[dict]
    best_epoch: int
    best_metric: float
    stop_reason: str


def _snapshot(named_tensors) -> dict[str, np.ndarray]:
    return {name: tensor.data.copy() for name, tensor in named_tensors}


def _restore(named_tensors, snap: dict[str, np.ndarray]) -> None:
    for name, tensor in named_tensors:
        tensor.data = snap[name].copy()


def format_history(history: list[dict], sizes: list[int]) -> str:
    lines = ["\t".join(["# epoch", "train_loss"]
                       + [f"valid_ndcg10@{m}" for m in sizes])]
    for row in history:
        cells = [str(row["epoch"]), f"{row['train_loss']:.6f}"]
        cells += [f"{row['valid_ndcg10'][m]:.6f}" for m in sizes]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_history(path, history: list[dict], sizes: list[int]) -> None:
    Path(path).write_text(format_history(history, sizes))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          dataset: SequenceDataset, lang: np.ndarray | None = None,
          img: np.ndarray | None = None, log=None) -> TrainResult:
    """Fit the model on a dataset; returns the best-validation parameters.

    `log`, when given, receives one line per epoch (a callable like print).
    """
    model_cfg.vocab_size = dataset.n_items
    if lang is not None:
        model_cfg.d_lang = int(lang.shape[1])
    if img is not None:
        model_cfg.d_img = int(img.shape[1])
    dtype = model_cfg.dtype()
    model = build_model(model_cfg,
                        lang=None if lang is None else lang.astype(dtype),
                        img=None if img is None else img.astype(dtype))
    named = [(name, tensor) for name, tensor, _ in model.named_parameters()]
    state = AdamState.init(named)
    weights = train_cfg.weights_for(len(model.ladder))

    inputs, labels = dataset.train_pairs()
    val_inputs, val_labels = dataset.valid_batch()
    n = inputs.shape[0]
    sizes = list(model.ladder)
    top = model.width

    best_metric = -np.inf
    best_epoch = 0
    best_params = _snapshot(named)
    bad_epochs = 0
    history: list[dict] = []
    stop_reason = "max_epochs"
    step = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        started = time.monotonic()
        perm = nrng.generator(train_cfg.seed, "shuffle", epoch).permutation(n)
        losses = []
        diverged = None
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            ctx = RunContext(training=True, seed=train_cfg.seed, step=step)
            try:
                loss, _ = nested_loss(model, inputs[idx], labels[idx], ctx,
                                      weights)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"loss became {value} at step {step}")
                for _, tensor in named:
                    tensor.grad = None
                loss.backward()
                adamw_step(named, state, train_cfg.learning_rate,
                           train_cfg.weight_decay,
                           betas=(train_cfg.beta1, train_cfg.beta2),
                           eps=train_cfg.adam_eps,
                           grad_clip=train_cfg.grad_clip)
            except DivergenceError as exc:
                diverged = exc
                break
            losses.append(value)
            step += 1
        if diverged is not None:
            stop_reason = f"diverged ({diverged})"
            break

        train_loss = float(np.mean(losses)) if losses else float("nan")
        valid = evaluate_all_sizes(model, val_inputs, val_labels,
                                   batch_size=train_cfg.eval_batch_size)
        metric = valid.get(top, "NDCG@10")
        history.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "valid_ndcg10": {m: valid.get(m, "NDCG@10") for m in sizes},
            "seconds": time.monotonic() - started,
        })
        if log is not None:
            per = " ".join(f"{m}:{valid.get(m, 'NDCG@10'):.4f}"
                           for m in sizes)
            log(f"epoch {epoch} loss {train_loss:.4f} "
                f"valid ndcg@10 [{per}] ({history[-1]['seconds']:.1f}s)")
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_params = _snapshot(named)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                stop_reason = "early_stop"
                break

    _restore(named, best_params)
    return TrainResult(params=model, state=state, history=history,
                       best_epoch=best_epoch, best_metric=best_metric,
                       stop_reason=stop_reason)
