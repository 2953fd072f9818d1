"""Training loops, checkpoints and the five-fold finetuning driver."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import FinetuneConfig, PretrainConfig, RunConfig
from .data import PairLabel, VideoSample, collate
from .encoder import Encoder, EncoderConfig, init_params, load_arrays, load_into, save_arrays
from .evaluation import FoldResult, FoldSpec, evaluate, fold_split
from .finetune import SimilarityModel, finetune_epoch, init_embed_head, training_targets
from .optim import AdamW, ParamGroup
from .pretrain import PretrainModel, TagVocab, init_heads

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("step", "epoch", "lr", "total", "vtc", "mlm", "mfm")

# rng stream tags: params, heads, step randomness, epoch shuffles
_INIT, _HEADS, _STEP, _SHUFFLE = 0, 1, 2, 3


def stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


# ----------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainState:
    model: PretrainModel
    optimizer: AdamW
    step: int
    total_steps: int
    losses: list[dict]


def _pretrain_optimizer(model: PretrainModel, pc: PretrainConfig, total_steps: int) -> AdamW:
    return AdamW(
        [
            ParamGroup("backbone", dict(model.encoder.params), pc.lr_backbone, pc.weight_decay),
            ParamGroup("heads", {f"head.{k}": v for k, v in model.heads.items()}, pc.lr_heads, pc.weight_decay),
        ],
        total_steps=total_steps,
        warmup_ratio=pc.warmup_ratio,
    )


def build_pretrain(cfg: RunConfig, samples: list[VideoSample], total_steps: int,
                   init_checkpoint=None) -> PretrainState:
    pc = cfg.pretrain
    encoder = Encoder(cfg.encoder, stream(cfg.seed, _INIT))
    if init_checkpoint is not None:
        _, arrays = load_arrays(init_checkpoint)
        load_into(encoder.params, arrays, prefix="enc/")
    vocab = TagVocab.from_samples(samples, pc.n_tags)
    if pc.use_vtc and len(vocab) == 0:
        raise ValueError("VTC is enabled but no sample carries a tag")
    heads = init_heads(cfg.encoder.hidden_dim, cfg.encoder.vocab_size, cfg.encoder.frame_dim,
                       max(len(vocab), 1), stream(cfg.seed, _HEADS), cfg.encoder.init_std)
    model = PretrainModel(encoder, heads, vocab, pc.settings())
    return PretrainState(model, _pretrain_optimizer(model, pc, total_steps), 0, total_steps, [])


def pretrain_steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def pretrain_step(state: PretrainState, cfg: RunConfig, samples: list[VideoSample]) -> dict:
    """Run the next optimisation step; batches come from a per-epoch shuffle."""
    pc = cfg.pretrain
    per_epoch = pretrain_steps_per_epoch(len(samples), pc.batch_size)
    epoch, k = divmod(state.step, per_epoch)
    order = stream(cfg.seed, _SHUFFLE, epoch).permutation(len(samples))
    idx = order[k * pc.batch_size:(k + 1) * pc.batch_size]
    batch = collate([samples[i] for i in idx], cfg.encoder.max_title_len, cfg.encoder.max_frames)
    rng = stream(cfg.seed, _STEP, state.step)
    model, opt = state.model, state.optimizer
    corrupted = model.corrupt(batch, rng)
    lr = opt.current_lr(opt.groups[0])
    with ad.Tape():
        out = model.losses(batch, corrupted, rng if pc.dropout else None)
        opt.zero_grad()
        ad.backward(out.total)
    opt.step()
    row = {"step": state.step, "epoch": epoch, "lr": lr, **out.values()}
    state.losses.append(row)
    state.step += 1
    return row


def save_pretrain_checkpoint(state: PretrainState, cfg: RunConfig, path) -> None:
    arrays = {f"enc/{k}": v.data for k, v in state.model.encoder.params.items()}
    arrays.update({f"head/{k}": v.data for k, v in state.model.heads.items()})
    arrays.update({f"opt/{k}": v for k, v in state.optimizer.state_arrays().items()})
    manifest = {
        "kind": "pretrain",
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "tag_vocab": state.model.tag_vocab.tags,
        "step": state.step,
        "total_steps": state.total_steps,
        "rng": {"seed": cfg.seed, "next_step": state.step},
    }
    save_arrays(path, manifest, arrays)


def resume_pretrain(path, samples: list[VideoSample]) -> tuple[PretrainState, RunConfig]:
    manifest, arrays = load_arrays(path)
    if manifest.get("kind") != "pretrain":
        raise ValueError(f"{path} is not a pretraining checkpoint")
    cfg = RunConfig.from_dict(manifest["config"])
    state = build_pretrain(cfg, samples, manifest["total_steps"])
    state.model.tag_vocab = TagVocab(manifest["tag_vocab"])
    load_into(state.model.encoder.params, arrays, prefix="enc/")
    load_into(state.model.heads, arrays, prefix="head/")
    state.optimizer.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")},
                               manifest["step"])
    state.step = manifest["step"]
    return state, cfg


def run_pretrain(cfg: RunConfig, samples: list[VideoSample], out_dir, *, init_checkpoint=None,
                 resume=None, max_steps: int | None = None) -> PretrainState:
    """Train for ``pretrain.epochs`` epochs (or stop early at ``max_steps``).

    Writes ``checkpoint/`` and ``losses.tsv`` under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_epoch = pretrain_steps_per_epoch(len(samples), cfg.pretrain.batch_size)
    total = max(per_epoch * cfg.pretrain.epochs, 1)
    if resume is not None:
        state, cfg = resume_pretrain(resume, samples)
        log_path = out_dir / "losses.tsv"
        prior = read_loss_log(log_path) if log_path.exists() else []
        state.losses = [r for r in prior if r["step"] < state.step]
    else:
        state = build_pretrain(cfg, samples, total, init_checkpoint)
    stop = state.total_steps if cfg.pretrain.epochs else 0
    if max_steps is not None:
        stop = min(stop, max_steps)
    every = cfg.pretrain.checkpoint_every
    while state.step < stop:
        row = pretrain_step(state, cfg, samples)
        if row["step"] % 50 == 0:
            log.info("pretrain step %d/%d total=%.4f vtc=%.4f mlm=%.4f mfm=%.4f",
                     row["step"], state.total_steps, row["total"], row["vtc"], row["mlm"], row["mfm"])
        if every and state.step % every == 0:
            save_pretrain_checkpoint(state, cfg, out_dir / "checkpoint")
    save_pretrain_checkpoint(state, cfg, out_dir / "checkpoint")
    write_loss_log(state.losses, out_dir / "losses.tsv")
    return state


def write_loss_log(rows: list[dict], path) -> None:
    lines = ["\t".join(LOSS_COLUMNS)]
    for r in rows:
        lines.append("\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in LOSS_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines[1:]:
        parts = line.split("\t")
        row = {c: float(v) for c, v in zip(LOSS_COLUMNS, parts)}
        row["step"] = int(row["step"])
        row["epoch"] = int(row["epoch"])
        rows.append(row)
    return rows


# ----------------------------------------------------------------------------
# finetuning


def _finetune_optimizer(model: SimilarityModel, fc: FinetuneConfig, total_steps: int) -> AdamW:
    return AdamW(
        [
            ParamGroup("backbone", dict(model.encoder.params), fc.lr_backbone, fc.weight_decay),
            ParamGroup("head", {f"head.{k}": v for k, v in model.head.items()}, fc.lr_head, fc.weight_decay),
        ],
        total_steps=total_steps,
        warmup_ratio=fc.warmup_ratio,
    )


def build_similarity_model(enc_cfg: EncoderConfig, fc: FinetuneConfig, seed: int,
                           init_checkpoint=None) -> SimilarityModel:
    encoder = Encoder(enc_cfg, params=init_params(enc_cfg, stream(seed, _INIT)))
    if init_checkpoint is not None:
        _, arrays = load_arrays(init_checkpoint)
        load_into(encoder.params, arrays, prefix="enc/")
    head = init_embed_head(enc_cfg.hidden_dim, fc.embed_dim, stream(seed, _HEADS, 1), enc_cfg.init_std)
    return SimilarityModel(encoder, head, fc.pool_scope)


@dataclass
class FoldRun:
    result: FoldResult
    model: SimilarityModel
    history: list[dict]


def run_fold(cfg: RunConfig, samples_by_vid: dict[int, VideoSample], pairs: list[PairLabel],
             fold: int, init_checkpoint=None, out_dir=None, evaluate_every_epoch: bool = True) -> FoldRun:
    fc = cfg.finetune
    train, valid = fold_split(pairs, FoldSpec(fold, fc.n_folds))
    if len(train) < 2:
        raise ValueError(f"fold {fold}: fewer than two training pairs")
    model = build_similarity_model(cfg.encoder, fc, cfg.seed, init_checkpoint)
    targets = training_targets(train, fc.rank_normalize)
    steps = math.ceil(len(train) / fc.batch_size) * fc.epochs
    opt = _finetune_optimizer(model, fc, steps)
    rng = stream(cfg.seed, _SHUFFLE, 1000 + fold)
    history = []
    metrics = (float("nan"), float("nan"))
    for epoch in range(fc.epochs):
        loss = finetune_epoch(model, samples_by_vid, train, targets, opt, fc.batch_size, rng, fc.dropout)
        row = {"fold": fold, "epoch": epoch, "train_loss": loss}
        if len(valid) >= 2 and (evaluate_every_epoch or epoch == fc.epochs - 1):
            metrics = evaluate(model, samples_by_vid, valid)
            row.update(valid_spearman=metrics[0], valid_mse=metrics[1])
        history.append(row)
        log.info("fold %d epoch %d %s", fold, epoch, row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_finetune_checkpoint(model, cfg, out_dir / "checkpoint", fold)
        (out_dir / "history.jsonl").write_text("".join(json.dumps(r) + "\n" for r in history))
    return FoldRun(FoldResult(fold, metrics[0], metrics[1]), model, history)


def save_finetune_checkpoint(model: SimilarityModel, cfg: RunConfig, path, fold: int | None) -> None:
    arrays = {f"enc/{k}": v.data for k, v in model.encoder.params.items()}
    arrays.update({f"head/{k}": v.data for k, v in model.head.items()})
    manifest = {
        "kind": "finetune",
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "fold": fold,
        "encoder": asdict(model.encoder.cfg),
        "embed_dim": model.embed_dim,
    }
    save_arrays(path, manifest, arrays)


def load_similarity_model(path) -> SimilarityModel:
    manifest, arrays = load_arrays(path)
    if manifest.get("kind") != "finetune":
        raise ValueError(f"{path} is not a finetuned checkpoint")
    cfg = RunConfig.from_dict(manifest["config"])
    model = build_similarity_model(cfg.encoder, cfg.finetune, cfg.seed)
    load_into(model.encoder.params, arrays, prefix="enc/")
    load_into(model.head, arrays, prefix="head/")
    return model
