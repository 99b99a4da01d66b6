"""Full-catalog ranking metrics.

The rank of a target is deterministic under score ties: items scoring
strictly higher count first, then tied items with a smaller index. The
popularity baseline ranks items by training-set frequency through the same
tie rule, so model and baseline numbers are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["rank_of_targets", "recall_at", "ndcg_at", "popularity_ranks",
           "MetricsReport", "KS_DEFAULT"]

KS_DEFAULT = (5, 10)


def rank_of_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target column under deterministic ties."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    rows = np.arange(scores.shape[0])
    t_scores = scores[rows, targets][:, None]
    greater = (scores > t_scores).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == t_scores) & (cols < targets[:, None])).sum(axis=1)
    return (1 + greater + tied_before).astype(np.int64)


def recall_at(ranks: np.ndarray, k: int) -> float:
    return float(np.mean(ranks <= k))


def ndcg_at(ranks: np.ndarray, k: int) -> float:
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def popularity_ranks(train_counts: np.ndarray,
                     targets: np.ndarray) -> np.ndarray:
    """Rank targets by item frequency (stable order breaks count ties)."""
    order = np.argsort(-np.asarray(train_counts), kind="stable")
    position = np.empty_like(order)
    position[order] = np.arange(order.shape[0])
    return position[np.asarray(targets)] + 1


@dataclass
class MetricsReport:
    """Per-width metric table for one dataset split."""

    split: str
    ks: tuple[int, ...] = KS_DEFAULT
    epoch: int | None = None
    rows: dict[int, dict[str, float]] = field(default_factory=dict)

    def add(self, width: int, ranks: np.ndarray) -> dict[str, float]:
        row = {}
        for k in self.ks:
            row[f"Recall@{k}"] = recall_at(ranks, k)
            row[f"NDCG@{k}"] = ndcg_at(ranks, k)
        self.rows[width] = row
        return row

    def metric_names(self) -> list[str]:
        names = []
        for k in self.ks:
            names.append(f"Recall@{k}")
            names.append(f"NDCG@{k}")
        return names

    def widths(self) -> list[int]:
        return sorted(self.rows)

    def get(self, width: int, name: str) -> float:
        return self.rows[width][name]

    def series(self, name: str) -> list[tuple[int, float]]:
        return [(w, self.rows[w][name]) for w in self.widths()]

    def format_table(self) -> str:
        widths = self.widths()
        lines = ["\t".join(["metric"] + [str(w) for w in widths])]
        for name in self.metric_names():
            cells = [f"{self.rows[w][name]:.4f}" for w in widths]
            lines.append("\t".join([name] + cells))
        return "\n".join(lines)
