"""Spearman correlation, MSE, id-residue fold splits and fold reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import PairLabel
from .finetune import rank_normalize
from .kernels import average_ranks


def spearman(x, y) -> float:
    """Pearson correlation of tie-averaged ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"spearman: need equal-length 1-D inputs, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("spearman: need at least two observations")
    rx = average_ranks(x)
    ry = average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("spearman: undefined for a constant input")
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    d = pred - target
    return float((d * d).mean())


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    n_folds: int = 5

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError("n_folds must be at least 2")
        if not 0 <= self.fold_index < self.n_folds:
            raise ValueError(f"fold_index {self.fold_index} outside [0, {self.n_folds})")


def fold_split(pairs: list[PairLabel], spec: FoldSpec) -> tuple[list[PairLabel], list[PairLabel]]:
    """Train: neither id has residue i. Valid: both do. Mixed pairs are dropped."""
    i, k = spec.fold_index, spec.n_folds
    train, valid = [], []
    for p in pairs:
        r1, r2 = p.vid1 % k, p.vid2 % k
        if r1 != i and r2 != i:
            train.append(p)
        elif r1 == i and r2 == i:
            valid.append(p)
    return train, valid


def pair_cosines(table: dict[int, np.ndarray], pairs: list[PairLabel]) -> np.ndarray:
    out = np.empty(len(pairs))
    for j, p in enumerate(pairs):
        a, b = table[p.vid1], table[p.vid2]
        out[j] = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return out


def evaluate_embeddings(table: dict[int, np.ndarray], pairs: list[PairLabel],
                        rank_targets: bool = True) -> tuple[float, float]:
    """(Spearman, MSE) of pair cosines against labels.

    MSE is measured against rank-normalised labels unless ``rank_targets`` is off.
    """
    missing = {v for p in pairs for v in (p.vid1, p.vid2)} - table.keys()
    if missing:
        raise KeyError(f"no embedding for videos {sorted(missing)[:10]}")
    sims = pair_cosines(table, pairs)
    labels = np.array([p.score for p in pairs])
    targets = rank_normalize(labels) if rank_targets else labels
    return spearman(sims, labels), mse(sims, targets)


def evaluate(model, samples_by_vid: dict, pairs: list[PairLabel], rank_targets: bool = True,
             batch_size: int = 64) -> tuple[float, float]:
    """Embed each distinct video of ``pairs`` once, then score."""
    vids = sorted({v for p in pairs for v in (p.vid1, p.vid2)})
    missing = [v for v in vids if v not in samples_by_vid]
    if missing:
        raise KeyError(f"pairs reference unknown videos {missing[:10]}")
    emb = model.embed([samples_by_vid[v] for v in vids], batch_size=batch_size)
    return evaluate_embeddings(dict(zip(vids, emb)), pairs, rank_targets)


@dataclass
class FoldResult:
    fold: int
    spearman: float
    mse: float


def summarize(results: list[FoldResult]) -> dict[str, float]:
    rho = np.array([r.spearman for r in results])
    err = np.array([r.mse for r in results])
    return {
        "spearman_mean": float(rho.mean()),
        "spearman_std": float(rho.std()),
        "mse_mean": float(err.mean()),
        "mse_std": float(err.std()),
    }


def format_report(results: list[FoldResult]) -> str:
    """Machine-readable ``fold<TAB>spearman<TAB>mse`` rows plus a mean±std line."""
    lines = [f"{r.fold}\t{r.spearman:.6f}\t{r.mse:.6f}" for r in results]
    s = summarize(results)
    lines.append(
        f"mean±std\t{s['spearman_mean']:.6f}±{s['spearman_std']:.6f}\t{s['mse_mean']:.6f}±{s['mse_std']:.6f}"
    )
    return "\n".join(lines)


def format_table(results: list[FoldResult]) -> str:
    s = summarize(results)
    rows = ["fold  spearman  mse", "----  --------  ------"]
    rows += [f"{r.fold:>4}  {r.spearman:8.4f}  {r.mse:.4f}" for r in results]
    rows.append(f"mean  {s['spearman_mean']:.4f} ± {s['spearman_std']:.4f}  {s['mse_mean']:.4f} ± {s['mse_std']:.4f}")
    return "\n".join(rows)
