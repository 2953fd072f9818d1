"""Similarity finetuning: mean-pooled embeddings, cosine, MSE to ranked targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, PairLabel, collate
from .encoder import Encoder, linear, mean_pool, pool_weights
from .kernels import average_ranks

MAX_EMBED_DIM = 256


def rank_normalize(scores) -> np.ndarray:
    """Tie-averaged 0-based ranks scaled by 1/(n-1) into [0, 1]."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ValueError("rank_normalize needs at least two scores")
    return average_ranks(x) / (x.shape[0] - 1)


def init_embed_head(hidden_dim: int, embed_dim: int, rng: np.random.Generator,
                    std: float = 0.02) -> dict[str, Tensor]:
    if not 1 <= embed_dim <= MAX_EMBED_DIM:
        raise ValueError(f"embed_dim must be in [1, {MAX_EMBED_DIM}], got {embed_dim}")
    return {
        "embed.w": Tensor(rng.normal(0.0, std, (hidden_dim, embed_dim)), requires_grad=True, name="embed.w"),
        "embed.b": Tensor(np.zeros(embed_dim), requires_grad=True, name="embed.b"),
    }


class SimilarityModel:
    """Shared encoder + mean pooling + affine projection to the embedding space."""

    def __init__(self, encoder: Encoder, head: dict[str, Tensor], pool_scope: str = "all"):
        self.encoder = encoder
        self.head = head
        self.pool_scope = pool_scope

    @property
    def embed_dim(self) -> int:
        return self.head["embed.w"].shape[1]

    def embed_batch(self, batch: Batch, dropout_rng=None, pad_to: int | None = None) -> Tensor:
        inp = self.encoder.assemble(batch, pad_to=pad_to)
        hidden = self.encoder.encode(inp, dropout_rng)
        pooled = mean_pool(hidden, pool_weights(inp, self.pool_scope))
        return linear(pooled, self.head["embed.w"], self.head["embed.b"])

    def embed(self, samples, batch_size: int = 64) -> np.ndarray:
        """Inference embeddings ``[N, embed_dim]`` for a list of samples."""
        cfg = self.encoder.cfg
        out = []
        with ad.no_tape():
            for i in range(0, len(samples), batch_size):
                batch = collate(samples[i:i + batch_size], cfg.max_title_len, cfg.max_frames)
                out.append(self.embed_batch(batch).data)
        if not out:
            return np.zeros((0, self.embed_dim))
        return np.concatenate(out, axis=0)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **{f"head.{k}": v for k, v in self.head.items()}}


def video_embed(model: SimilarityModel, sample) -> np.ndarray:
    return model.embed([sample])[0]


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine of two ``[N, D]`` tensors."""
    dot = ad.sum(ad.mul(a, b), axis=1)
    return ad.div(dot, ad.mul(ad.l2_norm(a, axis=1), ad.l2_norm(b, axis=1)))


def pair_loss(emb1: Tensor, emb2: Tensor, target) -> Tensor:
    """Batch mean of ``(cos(emb1, emb2) - target)^2``."""
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if emb1.ndim == 1:
        emb1 = ad.reshape(emb1, (1, -1))
        emb2 = ad.reshape(emb2, (1, -1))
    for e in (emb1, emb2):
        if (np.linalg.norm(e.data, axis=1) == 0).any():
            raise ValueError("pair_loss: zero-norm embedding")
    if target.shape != (emb1.shape[0],):
        raise ValueError(f"pair_loss: {target.shape[0]} targets for {emb1.shape[0]} pairs")
    diff = ad.sub(cosine(emb1, emb2), Tensor(target))
    return ad.mean(ad.mul(diff, diff))


def pair_batch_loss(model: SimilarityModel, samples_by_vid: dict, pairs: list[PairLabel],
                    targets: np.ndarray, dropout_rng=None) -> Tensor:
    """Embed the unique videos of ``pairs`` once, then score every pair."""
    cfg = model.encoder.cfg
    vids = []
    slot = {}
    for p in pairs:
        for v in (p.vid1, p.vid2):
            if v not in samples_by_vid:
                raise KeyError(f"pair references unknown video {v}")
            if v not in slot:
                slot[v] = len(vids)
                vids.append(v)
    batch = collate([samples_by_vid[v] for v in vids], cfg.max_title_len, cfg.max_frames)
    emb = model.embed_batch(batch, dropout_rng)
    i1 = np.array([slot[p.vid1] for p in pairs])
    i2 = np.array([slot[p.vid2] for p in pairs])
    return pair_loss(ad.index(emb, i1), ad.index(emb, i2), targets)


@dataclass
class FinetuneSettings:
    epochs: int = 10
    batch_size: int = 32
    lr_backbone: float = 1e-5
    lr_head: float = 5e-5
    warmup_ratio: float = 0.06
    embed_dim: int = 256
    rank_normalize: bool = True
    pool_scope: str = "all"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_backbone <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if not 1 <= self.embed_dim <= MAX_EMBED_DIM:
            raise ValueError(f"embed_dim must be in [1, {MAX_EMBED_DIM}]")
        if self.pool_scope not in ("all", "text"):
            raise ValueError("pool_scope must be 'all' or 'text'")


def training_targets(pairs: list[PairLabel], rank_norm: bool = True) -> np.ndarray:
    """Targets for a whole training split; ranks are taken globally, before batching."""
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    return rank_normalize(scores) if rank_norm else scores


def finetune_epoch(model: SimilarityModel, samples_by_vid: dict, pairs: list[PairLabel],
                   targets: np.ndarray, optimizer, batch_size: int, rng: np.random.Generator,
                   dropout: bool = True) -> float:
    """One shuffled pass over ``pairs``; returns the mean batch loss."""
    order = rng.permutation(len(pairs))
    losses = []
    for start in range(0, len(pairs), batch_size):
        idx = order[start:start + batch_size]
        with ad.Tape():
            loss = pair_batch_loss(model, samples_by_vid, [pairs[i] for i in idx], targets[idx],
                                   rng if dropout else None)
            optimizer.zero_grad()
            ad.backward(loss)
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses))
