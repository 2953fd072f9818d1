"""Pretraining objectives: tag classification, masked tokens, masked frames."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MASK_ID, N_SPECIAL, Batch
from .encoder import Assembled, Encoder, linear, mean_pool, pool_weights

# text actions
REPLACE_MASK, REPLACE_RANDOM, KEEP = 0, 1, 2
# frame actions
ZERO = 0
FRAME_KEEP = 1


@dataclass
class MaskPlan:
    """Chosen (sample, slot) positions, the action taken on each, and the originals."""

    rows: np.ndarray        # [M] batch index
    cols: np.ndarray        # [M] token / frame slot within the sample
    actions: np.ndarray     # [M]
    labels: np.ndarray      # [M] token ids, or [M, frame_dim] frame rows

    def __len__(self) -> int:
        return self.rows.shape[0]


def _choose(valid: np.ndarray, mask_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < mask_prob < 1.0:
        raise ValueError(f"mask_prob must be in (0, 1), got {mask_prob}")
    if not valid.any():
        raise ValueError("nothing to mask: no real positions")
    chosen = (rng.random(valid.shape) < mask_prob) & valid
    if not chosen.any():
        real = np.flatnonzero(valid)
        chosen.reshape(-1)[real[rng.integers(real.size)]] = True
    return chosen


def mlm_mask(tokens: np.ndarray, valid: np.ndarray, mask_prob: float, rng: np.random.Generator,
             vocab_size: int, mask_ratio: float = 0.8, random_ratio: float = 0.1):
    """Corrupt title tokens BERT-style; returns ``(corrupted, plan)``."""
    chosen = _choose(valid, mask_prob, rng)
    rows, cols = np.nonzero(chosen)
    labels = tokens[rows, cols].copy()
    u = rng.random(rows.size)
    actions = np.where(u < mask_ratio, REPLACE_MASK,
                       np.where(u < mask_ratio + random_ratio, REPLACE_RANDOM, KEEP))
    corrupted = tokens.copy()
    corrupted[rows[actions == REPLACE_MASK], cols[actions == REPLACE_MASK]] = MASK_ID
    n_rand = int((actions == REPLACE_RANDOM).sum())
    corrupted[rows[actions == REPLACE_RANDOM], cols[actions == REPLACE_RANDOM]] = rng.integers(
        N_SPECIAL, vocab_size, size=n_rand
    )
    return corrupted, MaskPlan(rows, cols, actions, labels)


def mfm_mask(frames: np.ndarray, valid: np.ndarray, mask_prob: float, rng: np.random.Generator,
             zero_ratio: float = 0.9):
    """Zero out chosen frames (or keep them); returns ``(corrupted, plan)``."""
    chosen = _choose(valid, mask_prob, rng)
    rows, cols = np.nonzero(chosen)
    labels = frames[rows, cols].copy()
    actions = np.where(rng.random(rows.size) < zero_ratio, ZERO, FRAME_KEEP)
    corrupted = frames.copy()
    zeroed = actions == ZERO
    corrupted[rows[zeroed], cols[zeroed]] = 0.0
    return corrupted, MaskPlan(rows, cols, actions, labels)


# ----------------------------------------------------------------------------
# tags


class TagVocab:
    """The ``size`` most frequent tags; ties broken by ascending tag id."""

    def __init__(self, tags: list[int]):
        self.tags = list(tags)
        self.index = {t: i for i, t in enumerate(self.tags)}

    @classmethod
    def from_samples(cls, samples, size: int) -> TagVocab:
        counts = Counter(t for s in samples for t in s.tag_ids)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([t for t, _ in ranked[:size]])

    def __len__(self) -> int:
        return len(self.tags)

    def multi_hot(self, tag_lists) -> np.ndarray:
        out = np.zeros((len(tag_lists), len(self.tags)))
        for i, tags in enumerate(tag_lists):
            for t in tags:
                j = self.index.get(t)
                if j is not None:
                    out[i, j] = 1.0
        return out


# ----------------------------------------------------------------------------
# losses


def vtc_loss(features: Tensor, tag_targets: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """Mean BCE-with-logits of a linear head over the tag vocabulary."""
    if tag_targets.shape[-1] != w.shape[1]:
        raise ValueError(f"tag target width {tag_targets.shape[-1]} != head width {w.shape[1]}")
    return ad.bce_with_logits(linear(features, w, b), tag_targets)


def gather_positions(hidden: Tensor, seq_pos: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Hidden rows ``[M, H]`` at sequence positions ``seq_pos[rows, cols]``."""
    bsz, seq, h = hidden.shape
    flat = rows * seq + seq_pos[rows, cols]
    return ad.index(ad.reshape(hidden, (bsz * seq, h)), flat)


def mlm_loss(hidden: Tensor, inp: Assembled, plan: MaskPlan, w: Tensor, b: Tensor) -> Tensor:
    if len(plan) == 0:
        raise ValueError("mlm_loss needs at least one chosen position")
    h = gather_positions(hidden, inp.text_pos, plan.rows, plan.cols)
    return ad.cross_entropy(linear(h, w, b), plan.labels)


def mfm_candidates(frames: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All real frames of the batch as ``[N, D]`` plus a ``[B, F]`` map to their row."""
    index_map = np.full(valid.shape, -1, dtype=np.int64)
    index_map[valid] = np.arange(int(valid.sum()))
    return frames[valid], index_map


def mfm_nce_loss(hidden: Tensor, inp: Assembled, plan: MaskPlan, frames: np.ndarray,
                 valid: np.ndarray, w: Tensor, b: Tensor, temperature: float = 1.0,
                 normalize: bool = False) -> Tensor:
    """In-batch contrastive loss: each masked position must pick its own original frame."""
    if len(plan) == 0:
        raise ValueError("mfm_nce_loss needs at least one chosen frame")
    cands, index_map = mfm_candidates(frames, valid)
    if cands.shape[0] < 2:
        raise ValueError("mfm_nce_loss needs at least two real frames in the batch")
    h = gather_positions(hidden, inp.frame_pos, plan.rows, plan.cols)
    proj = linear(h, w, b)
    if normalize:
        cands = cands / np.linalg.norm(cands, axis=1, keepdims=True)
        norms = ad.l2_norm(proj, axis=1)
        proj = ad.div(proj, ad.matmul(ad.reshape(norms, (-1, 1)), Tensor(np.ones((1, proj.shape[1])))))
    scores = ad.scale(ad.matmul(proj, Tensor(cands.T)), 1.0 / temperature)
    return ad.cross_entropy(scores, index_map[plan.rows, plan.cols])


def total_loss(l_vtc, l_mlm, l_mfm, w_vtc: float = 10.0):
    """``w_vtc * vtc + mlm + mfm``; works on floats and on Tensors (None skips a term)."""
    terms = [t for t in ((l_vtc, w_vtc), (l_mlm, 1.0), (l_mfm, 1.0)) if t[0] is not None]
    if not terms:
        raise ValueError("total_loss needs at least one task loss")
    if isinstance(terms[0][0], Tensor):
        out = None
        for loss, weight in terms:
            term = loss if weight == 1.0 else ad.scale(loss, weight)
            out = term if out is None else ad.add(out, term)
        return out
    return sum(weight * loss for loss, weight in terms)


# ----------------------------------------------------------------------------
# model


@dataclass
class PretrainSettings:
    mask_prob_mlm: float = 0.15
    mask_prob_mfm: float = 0.15
    w_vtc: float = 10.0
    temperature: float = 1.0
    nce_normalize: bool = False
    use_vtc: bool = True
    use_mlm: bool = True
    use_mfm: bool = True
    vtc_pooling: str = "cls"   # "cls" or "mean"
    n_tags: int = 100

    def __post_init__(self):
        if not (self.use_vtc or self.use_mlm or self.use_mfm):
            raise ValueError("at least one pretraining task must be enabled")
        if self.vtc_pooling not in ("cls", "mean"):
            raise ValueError(f"vtc_pooling must be 'cls' or 'mean', got {self.vtc_pooling!r}")
        for name in ("mask_prob_mlm", "mask_prob_mfm"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def init_heads(hidden_dim: int, vocab_size: int, frame_dim: int, n_tags: int,
               rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    raw = {
        "vtc.w": rng.normal(0.0, std, (hidden_dim, n_tags)),
        "vtc.b": np.zeros(n_tags),
        "mlm.w": rng.normal(0.0, std, (hidden_dim, vocab_size)),
        "mlm.b": np.zeros(vocab_size),
        "mfm.w": rng.normal(0.0, std, (hidden_dim, frame_dim)),
        "mfm.b": np.zeros(frame_dim),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


@dataclass
class StepLosses:
    total: Tensor
    vtc: Tensor | None = None
    mlm: Tensor | None = None
    mfm: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {"total": self.total.item()}
        for name in ("vtc", "mlm", "mfm"):
            t = getattr(self, name)
            out[name] = t.item() if t is not None else float("nan")
        return out


@dataclass
class CorruptedBatch:
    tokens: np.ndarray
    frames: np.ndarray
    mlm_plan: MaskPlan | None
    mfm_plan: MaskPlan | None


class PretrainModel:
    def __init__(self, encoder: Encoder, heads: dict[str, Tensor], tag_vocab: TagVocab,
                 settings: PretrainSettings):
        self.encoder = encoder
        self.heads = heads
        self.tag_vocab = tag_vocab
        self.settings = settings
        if settings.use_vtc and len(tag_vocab) != heads["vtc.w"].shape[1]:
            raise ValueError("tag vocabulary size does not match the VTC head")

    def corrupt(self, batch: Batch, rng: np.random.Generator) -> CorruptedBatch:
        s = self.settings
        tokens, frames, mlm_plan, mfm_plan = batch.tokens, batch.frames, None, None
        if s.use_mlm:
            tokens, mlm_plan = mlm_mask(batch.tokens, batch.token_mask, s.mask_prob_mlm, rng,
                                        self.encoder.cfg.vocab_size)
        if s.use_mfm:
            frames, mfm_plan = mfm_mask(batch.frames, batch.frame_mask, s.mask_prob_mfm, rng)
        return CorruptedBatch(tokens, frames, mlm_plan, mfm_plan)

    def losses(self, batch: Batch, corrupted: CorruptedBatch,
               dropout_rng: np.random.Generator | None = None) -> StepLosses:
        s, hd = self.settings, self.heads
        inp = self.encoder.assemble(batch, frames=corrupted.frames, tokens=corrupted.tokens)
        hidden = self.encoder.encode(inp, dropout_rng)
        l_vtc = l_mlm = l_mfm = None
        if s.use_vtc:
            if s.vtc_pooling == "cls":
                feat = self.encoder.pool_cls(hidden)
            else:
                feat = mean_pool(hidden, pool_weights(inp))
            l_vtc = vtc_loss(feat, self.tag_vocab.multi_hot(batch.tag_ids), hd["vtc.w"], hd["vtc.b"])
        if s.use_mlm:
            l_mlm = mlm_loss(hidden, inp, corrupted.mlm_plan, hd["mlm.w"], hd["mlm.b"])
        if s.use_mfm:
            l_mfm = mfm_nce_loss(hidden, inp, corrupted.mfm_plan, batch.frames, batch.frame_mask,
                                 hd["mfm.w"], hd["mfm.b"], s.temperature, s.nce_normalize)
        total = total_loss(l_vtc, l_mlm, l_mfm, s.w_vtc)
        return StepLosses(total, l_vtc, l_mlm, l_mfm, {"hidden": hidden, "inp": inp})

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **{f"head.{k}": v for k, v in self.heads.items()}}

    # -- diagnostics used by the overfit checks -------------------------------

    def mlm_accuracy(self, batch: Batch, corrupted: CorruptedBatch) -> float:
        hidden, inp = self._hidden(batch, corrupted)
        plan = corrupted.mlm_plan
        h = gather_positions(hidden, inp.text_pos, plan.rows, plan.cols)
        logits = linear(h, self.heads["mlm.w"], self.heads["mlm.b"]).data
        return float((logits.argmax(axis=1) == plan.labels).mean())

    def mfm_accuracy(self, batch: Batch, corrupted: CorruptedBatch) -> float:
        hidden, inp = self._hidden(batch, corrupted)
        plan = corrupted.mfm_plan
        cands, index_map = mfm_candidates(batch.frames, batch.frame_mask)
        h = gather_positions(hidden, inp.frame_pos, plan.rows, plan.cols)
        proj = linear(h, self.heads["mfm.w"], self.heads["mfm.b"]).data
        if self.settings.nce_normalize:
            cands = cands / np.linalg.norm(cands, axis=1, keepdims=True)
        return float(((proj @ cands.T).argmax(axis=1) == index_map[plan.rows, plan.cols]).mean())

    def _hidden(self, batch, corrupted):
        with ad.no_tape():
            inp = self.encoder.assemble(batch, frames=corrupted.frames, tokens=corrupted.tokens)
            return self.encoder.encode(inp), inp
