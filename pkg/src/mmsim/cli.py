"""Command-line entry point: ``mmsim <command> --config <path> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ShapeError
from .config import ConfigError, RunConfig, desk_preset, load_config, paper_preset, save_config
from .data import DatasetFormatError, config_dict, generate_corpus, load_dataset, load_pairs, save_dataset
from .encoder import CheckpointError
from .ensemble import EmbeddingTable, TableFormatError, blend, export_text, load_table, save_table
from .evaluation import FoldResult, FoldSpec, evaluate_embeddings, fold_split, format_report, format_table
from .train import load_similarity_model, run_fold, run_pretrain

log = logging.getLogger("mmsim")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_SHAPE = 5
EXIT_FORMAT = 6


class UsageError(Exception):
    pass


def _record(cfg: RunConfig, command: str, outputs: list[str]) -> None:
    """Append an entry to the run directory manifest."""
    run_dir = Path(cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"version": 1, "artifacts": []}
    manifest["artifacts"].append({"command": command, "outputs": outputs, "time": time.time()})
    tmp = path.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(path)


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return path


# ----------------------------------------------------------------------------
# commands


def cmd_init_config(args) -> int:
    cfg = paper_preset() if args.preset == "paper" else desk_preset()
    if args.seed is not None:
        cfg.seed = cfg.data.seed = args.seed
    out = args.out or "mmsim.json"
    save_config(cfg, out)
    print(out)
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.data.seed = args.seed
    out = Path(args.out or cfg.paths.dataset)
    corpus = generate_corpus(cfg.data)
    save_dataset(corpus.samples, corpus.pairs, out, config=config_dict(cfg.data))
    save_table(EmbeddingTable(np.arange(len(corpus.samples)), corpus.mixtures), out / "latent.emb")
    print(f"wrote {len(corpus.samples)} videos and {len(corpus.pairs)} pairs to {out}")
    _record(cfg, "gen-data", [str(out)])
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.seed = args.seed
    samples, _ = load_dataset(_require(cfg.paths.dataset))
    out = Path(args.out or Path(cfg.paths.run_dir) / "pretrain")
    state = run_pretrain(
        cfg, samples, out,
        init_checkpoint=_require(args.init) if args.init else None,
        resume=_require(args.resume) if args.resume else None,
        max_steps=args.max_steps,
    )
    last = state.losses[-1] if state.losses else {}
    print(f"pretrained {state.step}/{state.total_steps} steps; last losses "
          + " ".join(f"{k}={last[k]:.4f}" for k in ("total", "vtc", "mlm", "mfm") if k in last))
    _record(cfg, "pretrain", [str(out / "checkpoint"), str(out / "losses.tsv")])
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.seed = args.seed
    samples, pairs = load_dataset(_require(cfg.paths.dataset))
    by_vid = {s.vid: s for s in samples}
    init = args.init if args.init is not None else cfg.finetune.init_checkpoint
    if init in ("", "none"):
        init = None
    if init is not None:
        _require(init)
    out = Path(args.out or Path(cfg.paths.run_dir) / "finetune")
    folds = [args.fold] if args.fold is not None else list(range(cfg.finetune.n_folds))
    for f in folds:
        FoldSpec(f, cfg.finetune.n_folds)
    results = []
    for f in folds:
        run = run_fold(cfg, by_vid, pairs, f, init_checkpoint=init, out_dir=out / f"fold{f}")
        results.append(run.result)
        for row in run.history:
            if "valid_spearman" in row:
                print(f"fold {f} epoch {row['epoch']}: loss={row['train_loss']:.5f} "
                      f"spearman={row['valid_spearman']:.4f} mse={row['valid_mse']:.4f}")
    report = format_report(results)
    (out / "metrics.tsv").write_text(report + "\n")
    print(format_table(results))
    print(report)
    _record(cfg, "finetune", [str(out)])
    return EXIT_OK


def cmd_embed(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise UsageError("embed needs --checkpoint")
    model = load_similarity_model(_require(args.checkpoint))
    samples, pairs = load_dataset(_require(cfg.paths.dataset))
    if args.pairs:
        wanted = {v for p in load_pairs(_require(args.pairs)) for v in (p.vid1, p.vid2)}
        samples = [s for s in samples if s.vid in wanted]
    if args.fold is not None:
        _, valid = fold_split(pairs, FoldSpec(args.fold, cfg.finetune.n_folds))
        wanted = {v for p in valid for v in (p.vid1, p.vid2)}
        samples = [s for s in samples if s.vid in wanted]
    emb = model.embed(samples)
    table = EmbeddingTable([s.vid for s in samples], emb)
    out = Path(args.out or Path(cfg.paths.run_dir) / "embeddings.emb")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, out)
    if args.text:
        export_text(table, out.with_suffix(".tsv"))
    print(f"wrote {len(table)} x {table.width} embeddings to {out}")
    _record(cfg, "embed", [str(out)])
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.table:
        raise UsageError("eval needs --table")
    table = load_table(_require(args.table))
    if args.pairs:
        pairs = load_pairs(_require(args.pairs))
    else:
        _, pairs = load_dataset(_require(cfg.paths.dataset))
    label = "all"
    if args.fold is not None:
        _, pairs = fold_split(pairs, FoldSpec(args.fold, cfg.finetune.n_folds))
        label = args.fold
    rho, err = evaluate_embeddings(table.as_dict(), pairs)
    line = f"{label}\t{rho:.6f}\t{err:.6f}"
    print(line)
    if args.out:
        Path(args.out).write_text(line + "\n")
    _record(cfg, "eval", [args.out] if args.out else [])
    return EXIT_OK


def cmd_ensemble(cfg: RunConfig, args) -> int:
    if not args.tables:
        raise UsageError("ensemble needs --tables")
    tables = [load_table(_require(p)) for p in args.tables]
    fit = [load_table(_require(p)) for p in args.fit] if args.fit else None
    k = args.k if args.k is not None else cfg.ensemble.k
    out_table = blend(tables, k, fit)
    out = Path(args.out or Path(cfg.paths.run_dir) / "ensemble.emb")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_table(out_table, out)
    print(f"blended {len(tables)} tables into {len(out_table)} x {out_table.width} at {out}")
    _record(cfg, "ensemble", [str(out)])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mmsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a full default config file")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    def common(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--fold", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    common("gen-data", "generate the synthetic corpus")
    p = common("pretrain", "multi-task pretraining")
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    p.add_argument("--init", help="start from another checkpoint's encoder weights (optimizer reset)")
    p.add_argument("--max-steps", type=int)
    p = common("finetune", "similarity finetuning on one fold or all folds")
    p.add_argument("--init", help="pretrained checkpoint, or 'none' for random init")
    p = common("embed", "write an embedding table")
    p.add_argument("--checkpoint")
    p.add_argument("--pairs", help="only embed videos appearing in this pair file")
    p.add_argument("--text", action="store_true", help="also write a tab-separated text export")
    p = common("eval", "Spearman / MSE of a table against a pair file")
    p.add_argument("--table")
    p.add_argument("--pairs")
    p = common("ensemble", "blend several embedding tables")
    p.add_argument("--tables", nargs="+")
    p.add_argument("--fit", nargs="+", help="tables to fit the SVD basis on (default: the blended tables)")
    p.add_argument("--k", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "init-config":
            return cmd_init_config(args)
        cfg = load_config(_require(args.config))
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        print(f"mmsim: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as exc:
        print(f"mmsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ShapeError) as exc:
        print(f"mmsim: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (DatasetFormatError, TableFormatError) as exc:
        print(f"mmsim: bad file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except UsageError as exc:
        print(f"mmsim: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"mmsim: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
