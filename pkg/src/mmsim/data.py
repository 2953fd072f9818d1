"""Videos, labelled pairs, the synthetic corpus and on-disk persistence.

Dataset directory layout::

    manifest.jsonl   line 0: {"format", "version", "config", "n_videos", "frame_dim", "frames_bytes"}
                     line k: {"vid", "title", "tags", "category", "n_frames", "offset"}
    frames.f64       little-endian float64 frame rows; ``offset`` counts rows
    pairs.tsv        "vid1<TAB>vid2<TAB>score", score written with repr()
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
N_SPECIAL = 4
MAX_FRAMES = 32

FORMAT_NAME = "mmsim-dataset"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class DatasetFormatError(ValueError):
    pass


@dataclass(eq=False)
class VideoSample:
    vid: int
    title_tokens: tuple[int, ...]
    frames: np.ndarray
    tag_ids: tuple[int, ...] = ()
    category_id: int | None = None

    def __post_init__(self):
        self.title_tokens = tuple(int(t) for t in self.title_tokens)
        self.tag_ids = tuple(sorted({int(t) for t in self.tag_ids}))
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.vid < 0:
            raise ValueError(f"vid must be non-negative, got {self.vid}")
        if self.frames.ndim != 2 or not 1 <= self.frames.shape[0] <= MAX_FRAMES:
            raise ValueError(f"video {self.vid}: frames must be [1..{MAX_FRAMES}, dim], got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"video {self.vid}: non-finite frame features")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.vid == other.vid
            and self.title_tokens == other.title_tokens
            and self.tag_ids == other.tag_ids
            and self.category_id == other.category_id
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


@dataclass(frozen=True)
class PairLabel:
    vid1: int
    vid2: int
    score: float

    def __post_init__(self):
        if self.vid1 == self.vid2:
            raise ValueError(f"pair must join two distinct videos, got ({self.vid1}, {self.vid2})")


@dataclass
class SynthConfig:
    n_videos: int = 2000
    n_pairs: int = 3000
    n_topics: int = 12
    vocab_size: int = 400
    frame_dim: int = 64
    n_tags: int = 60
    title_len_range: tuple[int, int] = (6, 12)
    frame_count_range: tuple[int, int] = (4, 8)
    noise_scale: float = 0.6
    mixture_concentration: float = 0.15
    related_pair_fraction: float = 0.5
    seed: int = 7

    def __post_init__(self):
        self.title_len_range = tuple(self.title_len_range)
        self.frame_count_range = tuple(self.frame_count_range)
        for name in ("n_videos", "n_topics", "vocab_size", "frame_dim", "n_tags"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_pairs < 0 or self.noise_scale < 0:
            raise ValueError("n_pairs and noise_scale must be non-negative")
        if self.n_topics > self.n_tags:
            raise ValueError(f"n_topics ({self.n_topics}) exceeds n_tags ({self.n_tags})")
        lo, hi = self.title_len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad title_len_range {self.title_len_range}")
        lo, hi = self.frame_count_range
        if not 1 <= lo <= hi <= MAX_FRAMES:
            raise ValueError(f"bad frame_count_range {self.frame_count_range}")
        if self.vocab_size <= N_SPECIAL + 1:
            raise ValueError("vocab_size must leave room beyond the special tokens")


@dataclass
class SyntheticCorpus:
    samples: list[VideoSample]
    pairs: list[PairLabel]
    mixtures: np.ndarray = field(repr=False)


def pair_score(mix1: np.ndarray, mix2: np.ndarray) -> float:
    """Ground-truth label: cosine of two non-negative topic mixtures, in [0, 1]."""
    c = float(mix1 @ mix2) / float(np.linalg.norm(mix1) * np.linalg.norm(mix2))
    return min(1.0, max(0.0, c))


def generate_corpus(cfg: SynthConfig) -> SyntheticCorpus:
    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_topics
    # skewed topic prevalence keeps tag frequencies non-uniform
    prevalence = 1.0 / np.arange(1, k + 1) ** 0.8
    prevalence /= prevalence.sum()
    alpha = cfg.mixture_concentration * k * prevalence

    n_words = cfg.vocab_size - N_SPECIAL
    word_dists = rng.dirichlet(np.full(n_words, 0.05), size=k)
    centroids = rng.normal(size=(k, cfg.frame_dim))

    extra_tags = np.arange(k, cfg.n_tags)
    topic_extras = [extra_tags[extra_tags % k == t] for t in range(k)]

    mixtures = np.empty((cfg.n_videos, k))
    samples = []
    for vid in range(cfg.n_videos):
        mix = rng.dirichlet(alpha)
        mix = np.maximum(mix, 1e-12)
        mix /= mix.sum()
        mixtures[vid] = mix
        n_tok = int(rng.integers(cfg.title_len_range[0], cfg.title_len_range[1] + 1))
        tok_topics = rng.choice(k, size=n_tok, p=mix)
        title = [N_SPECIAL + int(rng.choice(n_words, p=word_dists[t])) for t in tok_topics]
        n_fr = int(rng.integers(cfg.frame_count_range[0], cfg.frame_count_range[1] + 1))
        fr_topics = rng.choice(k, size=n_fr, p=mix)
        frames = centroids[fr_topics] + cfg.noise_scale * rng.normal(size=(n_fr, cfg.frame_dim))
        order = np.argsort(-mix, kind="stable")
        top = [int(t) for t in order[:2] if mix[t] >= 0.2] or [int(order[0])]
        tags = set(top)
        extras = topic_extras[top[0]]
        if extras.size:
            tags.add(int(rng.choice(extras)))
        samples.append(VideoSample(vid, title, frames, tags, category_id=int(order[0])))

    pairs = _sample_pairs(cfg, rng, mixtures)
    return SyntheticCorpus(samples, pairs, mixtures)


def _sample_pairs(cfg: SynthConfig, rng: np.random.Generator, mixtures: np.ndarray) -> list[PairLabel]:
    n = cfg.n_videos
    max_pairs = n * (n - 1) // 2
    if cfg.n_pairs > max_pairs:
        raise ValueError(f"cannot draw {cfg.n_pairs} distinct pairs from {n} videos")
    dominant = mixtures.argmax(axis=1)
    by_topic = [np.flatnonzero(dominant == t) for t in range(mixtures.shape[1])]
    seen: set[tuple[int, int]] = set()
    pairs = []
    while len(pairs) < cfg.n_pairs:
        a = int(rng.integers(n))
        if rng.random() < cfg.related_pair_fraction and by_topic[dominant[a]].size > 1:
            b = int(rng.choice(by_topic[dominant[a]]))
        else:
            b = int(rng.integers(n))
        if a == b:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        pairs.append(PairLabel(a, b, pair_score(mixtures[a], mixtures[b])))
    return pairs


def synth_generate(cfg: SynthConfig) -> tuple[list[VideoSample], list[PairLabel]]:
    corpus = generate_corpus(cfg)
    return corpus.samples, corpus.pairs


# ----------------------------------------------------------------------------
# persistence


def save_dataset(samples, pairs, path, config: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frame_dim = samples[0].frames.shape[1] if samples else 0
    offset = 0
    records = []
    for s in samples:
        if s.frames.shape[1] != frame_dim:
            raise ValueError(f"video {s.vid}: frame_dim {s.frames.shape[1]} differs from {frame_dim}")
        records.append({
            "vid": s.vid,
            "title": list(s.title_tokens),
            "tags": list(s.tag_ids),
            "category": s.category_id,
            "n_frames": s.n_frames,
            "offset": offset,
        })
        offset += s.n_frames
    blob = b"".join(s.frames.astype(_LE_F64, copy=False).tobytes() for s in samples)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config or {},
        "n_videos": len(samples),
        "frame_dim": frame_dim,
        "frames_bytes": len(blob),
    }
    _atomic_write(path / "frames.f64", blob)
    lines = [json.dumps(header)] + [json.dumps(r) for r in records]
    _atomic_write(path / "manifest.jsonl", ("\n".join(lines) + "\n").encode())
    save_pairs(pairs, path / "pairs.tsv")


def load_dataset(path) -> tuple[list[VideoSample], list[PairLabel]]:
    path = Path(path)
    header, records = _read_manifest(path / "manifest.jsonl")
    blob = (path / "frames.f64").read_bytes()
    if len(blob) != header["frames_bytes"]:
        raise DatasetFormatError(
            f"frames.f64 holds {len(blob)} bytes, manifest expects {header['frames_bytes']}"
        )
    frame_dim = header["frame_dim"]
    flat = np.frombuffer(blob, dtype=_LE_F64)
    samples = []
    for i, rec in enumerate(records):
        try:
            start, n = int(rec["offset"]), int(rec["n_frames"])
            rows = flat[start * frame_dim:(start + n) * frame_dim]
            if rows.size != n * frame_dim:
                raise DatasetFormatError("frame rows run past the end of frames.f64")
            samples.append(VideoSample(
                int(rec["vid"]),
                rec["title"],
                rows.reshape(n, frame_dim).astype(np.float64),
                rec["tags"],
                rec["category"],
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"manifest record {i}: {exc}") from exc
    pairs_path = path / "pairs.tsv"
    pairs = load_pairs(pairs_path) if pairs_path.exists() else []
    return samples, pairs


def read_dataset_config(path) -> dict:
    header, _ = _read_manifest(Path(path) / "manifest.jsonl")
    return header["config"]


def _read_manifest(path: Path) -> tuple[dict, list[dict]]:
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: not an {FORMAT_NAME} manifest")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: version {header.get('version')} unsupported (expected {FORMAT_VERSION})"
        )
    records = []
    for i, line in enumerate(lines[1:]):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"manifest record {i}: {exc}") from exc
    if len(records) != header["n_videos"]:
        raise DatasetFormatError(
            f"manifest lists {len(records)} records, header declares {header['n_videos']}"
        )
    return header, records


def save_pairs(pairs, path) -> None:
    text = "".join(f"{p.vid1}\t{p.vid2}\t{p.score!r}\n" for p in pairs)
    _atomic_write(Path(path), text.encode())


def load_pairs(path) -> list[PairLabel]:
    pairs = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 tab-separated fields, got {len(parts)}")
            pairs.append(PairLabel(int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise DatasetFormatError(f"{path} line {i + 1}: {exc}") from exc
    return pairs


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["title_len_range"] = list(cfg.title_len_range)
    d["frame_count_range"] = list(cfg.frame_count_range)
    return d


# ----------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    vids: np.ndarray          # [B]
    tokens: np.ndarray        # [B, T] int64, PAD-padded
    token_mask: np.ndarray    # [B, T] bool
    frames: np.ndarray        # [B, F, frame_dim], zero-padded
    frame_mask: np.ndarray    # [B, F] bool
    tag_ids: list[tuple[int, ...]]

    @property
    def size(self) -> int:
        return self.vids.shape[0]


def collate(samples, max_title_len: int, max_frames: int) -> Batch:
    if not samples:
        raise ValueError("collate needs at least one sample")
    frame_dim = samples[0].frames.shape[1]
    for s in samples:
        if len(s.title_tokens) > max_title_len:
            raise ValueError(f"video {s.vid}: title length {len(s.title_tokens)} exceeds {max_title_len}")
        if s.n_frames > max_frames:
            raise ValueError(f"video {s.vid}: {s.n_frames} frames exceeds {max_frames}")
        if s.frames.shape[1] != frame_dim:
            raise ValueError(f"video {s.vid}: frame_dim {s.frames.shape[1]} differs from {frame_dim}")
    b = len(samples)
    t = max(len(s.title_tokens) for s in samples)
    f = max(s.n_frames for s in samples)
    tokens = np.zeros((b, t), dtype=np.int64)
    token_mask = np.zeros((b, t), dtype=bool)
    frames = np.zeros((b, f, frame_dim))
    frame_mask = np.zeros((b, f), dtype=bool)
    for i, s in enumerate(samples):
        n = len(s.title_tokens)
        tokens[i, :n] = s.title_tokens
        token_mask[i, :n] = True
        frames[i, :s.n_frames] = s.frames
        frame_mask[i, :s.n_frames] = True
    vids = np.array([s.vid for s in samples], dtype=np.int64)
    return Batch(vids, tokens, token_mask, frames, frame_mask, [s.tag_ids for s in samples])
