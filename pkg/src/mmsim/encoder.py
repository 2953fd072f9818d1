"""Multimodal post-LN transformer over [CLS] + frames + [SEP] + title tokens."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CLS_ID, N_SPECIAL, PAD_ID, SEP_ID, Batch


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    n_layers: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 512
    vocab_size: int = 400
    frame_dim: int = 64
    max_frames: int = 32
    max_title_len: int = 32
    n_segment_types: int = 2
    dropout_rate: float = 0.1
    use_segment_embeddings: bool = True
    frame_position_embeddings: bool = True
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab_size must exceed the reserved special ids")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        for name in ("n_layers", "hidden_dim", "n_heads", "ffn_dim", "frame_dim", "max_frames", "max_title_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def max_len(self) -> int:
        return 2 + self.max_frames + self.max_title_len


@dataclass
class Assembled:
    """Embedded sequence plus the bookkeeping needed by the task heads."""

    x: Tensor                 # [B, L, H]
    attn_mask: np.ndarray     # [B, L] bool, False at padding
    frame_pos: np.ndarray     # [B, F] sequence index of each frame, -1 at padding
    text_pos: np.ndarray      # [B, T] sequence index of each title token, -1 at padding
    lengths: np.ndarray       # [B] real sequence length

    @property
    def seq_len(self) -> int:
        return self.attn_mask.shape[1]


def _normal(rng, std, *shape):
    return rng.normal(0.0, std, size=shape)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    h, f, std = cfg.hidden_dim, cfg.ffn_dim, cfg.init_std
    raw = {
        "emb.token": _normal(rng, std, cfg.vocab_size, h),
        "emb.position": _normal(rng, std, cfg.max_len, h),
        "emb.segment": _normal(rng, std, cfg.n_segment_types, h),
        "emb.frame_proj.w": _normal(rng, std, cfg.frame_dim, h),
        "emb.frame_proj.b": np.zeros(h),
        "emb.ln.gain": np.ones(h),
        "emb.ln.bias": np.zeros(h),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            raw[p + f"attn.{name}.w"] = _normal(rng, std, h, h)
            # a key bias shifts every score of a query equally, so softmax ignores it
            if name != "k":
                raw[p + f"attn.{name}.b"] = np.zeros(h)
        raw[p + "ln1.gain"] = np.ones(h)
        raw[p + "ln1.bias"] = np.zeros(h)
        raw[p + "ffn.in.w"] = _normal(rng, std, h, f)
        raw[p + "ffn.in.b"] = np.zeros(f)
        raw[p + "ffn.out.w"] = _normal(rng, std, f, h)
        raw[p + "ffn.out.b"] = np.zeros(h)
        raw[p + "ln2.gain"] = np.ones(h)
        raw[p + "ln2.bias"] = np.zeros(h)
    raw["pooler.w"] = _normal(rng, std, h, h)
    raw["pooler.b"] = np.zeros(h)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    # -- input assembly -------------------------------------------------------

    def assemble(self, batch: Batch, frames: np.ndarray | None = None,
                 tokens: np.ndarray | None = None, pad_to: int | None = None) -> Assembled:
        """Embed ``[CLS] frames [SEP] title`` per sample, right-padded to one width.

        ``frames``/``tokens`` override the batch's (used for corrupted inputs);
        ``pad_to`` widens the padding beyond the longest sample.
        """
        cfg, p = self.cfg, self.params
        frames = batch.frames if frames is None else frames
        tokens = batch.tokens if tokens is None else tokens
        if frames.shape[-1] != cfg.frame_dim:
            raise ValueError(f"frame_dim mismatch: batch has {frames.shape[-1]}, encoder expects {cfg.frame_dim}")
        n_fr = batch.frame_mask.sum(axis=1)
        n_tok = batch.token_mask.sum(axis=1)
        if (n_tok < 1).any():
            raise ValueError("every sample needs at least one title token")
        if (n_fr < 1).any():
            raise ValueError("every sample needs at least one frame")
        if tokens.size and tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id {int(tokens.max())} outside vocab of {cfg.vocab_size}")
        if n_fr.max() > cfg.max_frames or n_tok.max() > cfg.max_title_len:
            raise ValueError("batch exceeds the configured max_frames / max_title_len")

        bsz, fmax = batch.frame_mask.shape
        tmax = batch.token_mask.shape[1]
        lengths = 2 + n_fr + n_tok
        seq = int(lengths.max())
        if pad_to is not None:
            if pad_to < seq:
                raise ValueError(f"pad_to={pad_to} is shorter than the longest sequence ({seq})")
            seq = pad_to
        attn_mask = np.arange(seq)[None, :] < lengths[:, None]

        tok_ids = np.full((bsz, seq), PAD_ID, dtype=np.int64)
        seg_ids = np.zeros((bsz, seq), dtype=np.int64)
        gather = np.empty((bsz, seq), dtype=np.int64)
        frame_pos = np.full((bsz, fmax), -1, dtype=np.int64)
        text_pos = np.full((bsz, tmax), -1, dtype=np.int64)
        n_token_rows = bsz * seq
        for b in range(bsz):
            nf, nt = int(n_fr[b]), int(n_tok[b])
            tok_ids[b, 0] = CLS_ID
            tok_ids[b, nf + 1] = SEP_ID
            tok_ids[b, nf + 2:nf + 2 + nt] = tokens[b, :nt]
            seg_ids[b, nf + 2:] = 1
            gather[b] = b * seq + np.arange(seq)
            gather[b, 1:nf + 1] = n_token_rows + b * fmax + np.arange(nf)
            frame_pos[b, :nf] = 1 + np.arange(nf)
            text_pos[b, :nt] = nf + 2 + np.arange(nt)

        tok_emb = ad.embedding(p["emb.token"], tok_ids.reshape(-1))
        frame_emb = linear(
            Tensor(frames.reshape(bsz * fmax, cfg.frame_dim)), p["emb.frame_proj.w"], p["emb.frame_proj.b"]
        )
        x = ad.embedding(ad.concat([tok_emb, frame_emb], axis=0), gather)

        pos_ids = np.where(attn_mask, np.arange(seq)[None, :], 0)
        pos_table = p["emb.position"]
        if not cfg.frame_position_embeddings:
            pos_table = ad.concat([pos_table, Tensor(np.zeros((1, cfg.hidden_dim)))], axis=0)
            for b in range(bsz):
                pos_ids[b, 1:int(n_fr[b]) + 1] = cfg.max_len
        x = ad.add(x, ad.embedding(pos_table, pos_ids))
        if cfg.use_segment_embeddings:
            x = ad.add(x, ad.embedding(p["emb.segment"], seg_ids))
        x = ad.layer_norm(x, p["emb.ln.gain"], p["emb.ln.bias"], cfg.layer_norm_eps)
        return Assembled(x, attn_mask, frame_pos, text_pos, lengths)

    # -- transformer stack ----------------------------------------------------

    def encode(self, inp: Assembled, rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states ``[B, L, H]``. Dropout is active only when ``rng`` is given."""
        cfg = self.cfg
        x = ad.dropout(inp.x, cfg.dropout_rate, rng)
        key_mask = inp.attn_mask[:, None, None, :]
        for i in range(cfg.n_layers):
            try:
                x = self._layer(i, x, key_mask, rng)
            except FloatingPointError as exc:
                raise FloatingPointError(f"encoder layer {i}: {exc}") from exc
        return x

    def _layer(self, i: int, x: Tensor, key_mask: np.ndarray, rng) -> Tensor:
        cfg, p = self.cfg, self.params
        pre = f"layer{i}."
        bsz, seq, h = x.shape
        nh = cfg.n_heads
        dh = h // nh

        def heads(t):
            return ad.transpose(ad.reshape(t, (bsz, seq, nh, dh)), (0, 2, 1, 3))

        q = heads(linear(x, p[pre + "attn.q.w"], p[pre + "attn.q.b"]))
        k = heads(ad.matmul(x, p[pre + "attn.k.w"]))
        v = heads(linear(x, p[pre + "attn.v.w"], p[pre + "attn.v.b"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = ad.dropout(ad.softmax(scores, key_mask), cfg.dropout_rate, rng)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (bsz, seq, h))
        attn = ad.dropout(linear(ctx, p[pre + "attn.o.w"], p[pre + "attn.o.b"]), cfg.dropout_rate, rng)
        x = ad.layer_norm(ad.add(x, attn), p[pre + "ln1.gain"], p[pre + "ln1.bias"], cfg.layer_norm_eps)
        ff = ad.gelu(linear(x, p[pre + "ffn.in.w"], p[pre + "ffn.in.b"]))
        ff = ad.dropout(linear(ff, p[pre + "ffn.out.w"], p[pre + "ffn.out.b"]), cfg.dropout_rate, rng)
        return ad.layer_norm(ad.add(x, ff), p[pre + "ln2.gain"], p[pre + "ln2.bias"], cfg.layer_norm_eps)

    def __call__(self, batch: Batch, rng: np.random.Generator | None = None, **overrides) -> tuple[Tensor, Assembled]:
        inp = self.assemble(batch, **overrides)
        return self.encode(inp, rng), inp

    # -- readouts -------------------------------------------------------------

    def pool_cls(self, hidden: Tensor) -> Tensor:
        """BERT pooler: tanh(dense(h_[CLS]))."""
        cls = ad.index(hidden, (slice(None), 0))
        return ad.tanh(linear(cls, self.params["pooler.w"], self.params["pooler.b"]))


def mean_pool(hidden: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted sum over positions; ``weights`` is ``[B, L]`` with rows summing to 1."""
    bsz, seq, h = hidden.shape
    w = Tensor(weights.reshape(bsz, 1, seq))
    return ad.reshape(ad.matmul(w, hidden), (bsz, h))


def pool_weights(inp: Assembled, scope: str = "all") -> np.ndarray:
    """Uniform averaging weights over real positions (``all``) or title positions (``text``)."""
    if scope == "all":
        m = inp.attn_mask.astype(np.float64)
    elif scope == "text":
        m = np.zeros(inp.attn_mask.shape)
        for b in range(m.shape[0]):
            pos = inp.text_pos[b]
            m[b, pos[pos >= 0]] = 1.0
    else:
        raise ValueError(f"unknown pooling scope {scope!r}")
    return m / m.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# checkpoint arrays


def save_arrays(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``manifest.json`` + ``arrays.npz`` into directory ``path`` atomically per file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tmp = path / "arrays.tmp.npz"
    np.savez(tmp, **{k: np.ascontiguousarray(v) for k, v in arrays.items()})
    tmp.replace(path / "arrays.npz")
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path / "manifest.json")


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    with np.load(path / "arrays.npz") as z:
        arrays = {k: z[k] for k in z.files}
    return manifest, arrays


def load_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray], prefix: str = "",
              strict: bool = True) -> None:
    """Copy ``arrays[prefix + name]`` into each parameter, rejecting shape mismatches."""
    for name, t in params.items():
        key = prefix + name
        if key not in arrays:
            if strict:
                raise CheckpointError(f"checkpoint lacks parameter {key!r}")
            continue
        arr = arrays[key]
        if arr.shape != t.shape:
            raise CheckpointError(f"parameter {key!r}: checkpoint shape {arr.shape} vs model {t.shape}")
        t.data = np.array(arr, dtype=np.float64)


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
