"""Acceptance criteria 1-10, one PASS/FAIL line each (see the terminal summary)."""

import math
import time

import numpy as np
import pytest

from mmsim import autodiff as ad
from mmsim.config import PretrainConfig, desk_preset
from mmsim.data import PairLabel, SynthConfig, VideoSample, collate, generate_corpus
from mmsim.encoder import Encoder
from mmsim.ensemble import EmbeddingTable, blend, concat, l2_normalize, svd_reduce
from mmsim.evaluation import FoldSpec, evaluate_embeddings, fold_split, spearman, summarize
from mmsim.finetune import (
    SimilarityModel, init_embed_head, pair_batch_loss, training_targets,
)
from mmsim.optim import AdamW, ParamGroup
from mmsim.pretrain import (
    KEEP, REPLACE_MASK, REPLACE_RANDOM, ZERO, PretrainModel, PretrainSettings, TagVocab, init_heads,
    mfm_mask, mfm_nce_loss, mlm_loss, mlm_mask, vtc_loss,
)
from mmsim.autodiff import Tensor
from mmsim.train import build_pretrain, pretrain_step, read_loss_log, run_fold, run_pretrain

from conftest import tiny_encoder_config
from test_evaluation import brute_spearman
from test_pretrain import _bce_oracle, _ce_oracle, _row_dot

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(request):
    def emit(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
        request.config._criteria.append(line)
        print(line)
        return ok
    return emit


# ----------------------------------------------------------------------------
# 1. gradient integrity


def test_gradient_integrity(report):
    rng = np.random.default_rng(0)
    cfg = tiny_encoder_config(init_std=0.3)
    enc = Encoder(cfg, rng)
    samples = [
        VideoSample(0, [5, 9, 17, 30], rng.normal(size=(3, 8)), tag_ids=[1, 3]),
        VideoSample(1, [6, 22, 8], rng.normal(size=(2, 8)), tag_ids=[0, 3]),
    ]
    batch = collate(samples, cfg.max_title_len, cfg.max_frames)
    heads = init_heads(cfg.hidden_dim, cfg.vocab_size, cfg.frame_dim, 4, rng, std=0.3)
    model = PretrainModel(enc, heads, TagVocab([0, 1, 2, 3]),
                          PretrainSettings(mask_prob_mlm=0.4, mask_prob_mfm=0.4))
    corrupted = model.corrupt(batch, np.random.default_rng(1))
    params = model.parameters()
    start = time.perf_counter()
    worst = max(ad.grad_check(lambda: model.losses(batch, corrupted).total, p) for p in params.values())
    elapsed = time.perf_counter() - start
    n = sum(p.data.size for p in params.values())
    ok = worst < 1e-4 and elapsed < 120
    report(1, ok, f"max rel err {worst:.2e} over {n} elements of {len(params)} tensors in {elapsed:.1f}s "
                  "(need < 1e-4, < 120s)")
    assert ok


# ----------------------------------------------------------------------------
# 2. masking statistics


def test_masking_statistics(report):
    rng = np.random.default_rng(2)
    chosen = total = 0
    acts = np.zeros(3)
    while total < 200_000:
        lengths = rng.integers(1, 13, size=32)
        valid = np.arange(12)[None, :] < lengths[:, None]
        tokens = np.where(valid, rng.integers(4, 400, size=valid.shape), 0)
        _, plan = mlm_mask(tokens, valid, 0.15, rng, 400)
        chosen += len(plan)
        total += int(valid.sum())
        acts += np.bincount(plan.actions, minlength=3)
    frame_acts = np.zeros(2)
    while frame_acts.sum() < 100_000:
        lengths = rng.integers(1, 9, size=32)
        valid = np.arange(8)[None, :] < lengths[:, None]
        _, plan = mfm_mask(np.zeros((32, 8, 1)), valid, 0.15, rng)
        frame_acts += np.bincount(plan.actions, minlength=2)
    frac = chosen / total
    t = acts / acts.sum()
    f = frame_acts / frame_acts.sum()
    ok = (0.14 <= frac <= 0.16 and abs(t[REPLACE_MASK] - 0.8) <= 0.02 and abs(t[REPLACE_RANDOM] - 0.1) <= 0.02
          and abs(t[KEEP] - 0.1) <= 0.02 and abs(f[ZERO] - 0.9) <= 0.02 and abs(f[1] - 0.1) <= 0.02)
    report(2, ok, f"{total} positions, chosen {frac:.4f}; mask/random/keep {t[0]:.4f}/{t[1]:.4f}/{t[2]:.4f}; "
                  f"{int(frame_acts.sum())} frames zero/keep {f[0]:.4f}/{f[1]:.4f}")
    assert ok


# ----------------------------------------------------------------------------
# 3. loss oracles


def test_loss_oracles(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    uniform = 0.0
    for trial in range(5):
        enc = Encoder(tiny_encoder_config(init_std=0.3), rng)
        samples = [VideoSample(i, rng.integers(4, 40, size=rng.integers(2, 6)),
                               rng.normal(size=(rng.integers(1, 5), 8))) for i in range(4)]
        batch = collate(samples, 5, 4)
        hidden, inp = enc(batch)
        w_t, b_t = rng.normal(size=(16, 40)), rng.normal(size=40)
        _, plan = mlm_mask(batch.tokens, batch.token_mask, 0.5, rng, 40)
        got = mlm_loss(hidden, inp, plan, Tensor(w_t), Tensor(b_t)).item()
        want = sum(_ce_oracle([_row_dot(hidden.data[r, inp.text_pos[r, c]].tolist(), w_t.tolist(), b_t.tolist(), j)
                               for j in range(40)], lab)
                   for r, c, lab in zip(plan.rows, plan.cols, plan.labels)) / len(plan)
        worst = max(worst, abs(got - want))
        uni = mlm_loss(hidden, inp, plan, Tensor(np.zeros((16, 40))), Tensor(np.zeros(40))).item()
        uniform = max(uniform, abs(uni - math.log(40)))

        w_f, b_f = rng.normal(size=(16, 8)), rng.normal(size=8)
        _, fplan = mfm_mask(batch.frames, batch.frame_mask, 0.5, rng)
        got = mfm_nce_loss(hidden, inp, fplan, batch.frames, batch.frame_mask, Tensor(w_f), Tensor(b_f)).item()
        cands = [tuple(int(v) for v in rc) for rc in np.argwhere(batch.frame_mask)]
        want = 0.0
        for r, c in zip(fplan.rows, fplan.cols):
            p = [_row_dot(hidden.data[r, inp.frame_pos[r, c]].tolist(), w_f.tolist(), b_f.tolist(), j)
                 for j in range(8)]
            scores = [sum(a * b for a, b in zip(p, batch.frames[rr, cc].tolist())) for rr, cc in cands]
            want += _ce_oracle(scores, cands.index((int(r), int(c))))
        worst = max(worst, abs(got - want / len(fplan)))
        uni = mfm_nce_loss(hidden, inp, fplan, batch.frames, batch.frame_mask,
                           Tensor(np.zeros((16, 8))), Tensor(np.zeros(8))).item()
        uniform = max(uniform, abs(uni - math.log(len(cands))))

        feat = rng.normal(size=(4, 16))
        w_v, b_v = rng.normal(size=(16, 6)), rng.normal(size=6)
        y = (rng.random((4, 6)) < 0.4).astype(float)
        got = vtc_loss(Tensor(feat), y, Tensor(w_v), Tensor(b_v)).item()
        want = sum(_bce_oracle(_row_dot(feat[i].tolist(), w_v.tolist(), b_v.tolist(), j), y[i, j])
                   for i in range(4) for j in range(6)) / 24
        worst = max(worst, abs(got - want))
        uni = vtc_loss(Tensor(feat), y, Tensor(np.zeros((16, 6))), Tensor(np.zeros(6))).item()
        uniform = max(uniform, abs(uni - math.log(2)))
    ok = worst <= 1e-12 and uniform <= 1e-12
    report(3, ok, f"max |loss - oracle| {worst:.1e}, max |uniform - ln(support)| {uniform:.1e} (need <= 1e-12)")
    assert ok


# ----------------------------------------------------------------------------
# 4. spearman oracle


def test_spearman_oracle(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    checked = ties = 0
    while checked < 1000:
        n = int(rng.integers(2, 50))
        tied = checked % 2 == 1
        if tied:
            x, y = rng.integers(0, 6, n).astype(float), rng.integers(0, 6, n).astype(float)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            ties += 1
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        worst = max(worst, abs(spearman(x, y) - brute_spearman(x, y)))
        checked += 1
    hand = spearman([0.2, 0.9, 0.5, 0.1], [0.3, 0.8, 0.2, 0.0])
    ok = worst <= 1e-12 and hand == 0.8
    report(4, ok, f"{checked} vectors ({ties} with ties) max diff {worst:.1e}; hand case {hand!r}")
    assert ok


# ----------------------------------------------------------------------------
# 5. fold protocol


def test_fold_protocol(report):
    rng = np.random.default_rng(5)
    pairs = []
    while len(pairs) < 10_000:
        a, b = rng.integers(0, 20_000, 2)
        if a != b:
            pairs.append(PairLabel(int(a), int(b), float(rng.random())))
    disjoint = True
    valid_hits = np.zeros(len(pairs), dtype=int)
    index = {id(p): i for i, p in enumerate(pairs)}
    for f in range(5):
        train, valid = fold_split(pairs, FoldSpec(f))
        tv = {v for p in train for v in (p.vid1, p.vid2)}
        vv = {v for p in valid for v in (p.vid1, p.vid2)}
        disjoint &= not (tv & vv)
        for p in valid:
            valid_hits[index[id(p)]] += 1
    same = np.array([p.vid1 % 5 == p.vid2 % 5 for p in pairs])
    exact = bool((valid_hits[same] == 1).all() and (valid_hits[~same] == 0).all())
    ok = disjoint and exact
    report(5, ok, f"10000 pairs: train/valid id-disjoint in every fold={disjoint}; "
                  f"{int(same.sum())} equal-residue pairs each valid in exactly one fold={exact}")
    assert ok


# ----------------------------------------------------------------------------
# 6. overfit checks


def test_overfit(report):
    cfg = desk_preset()
    cfg.data = SynthConfig(n_videos=32, n_pairs=40, seed=11)
    steps = 1500
    cfg.pretrain = PretrainConfig(epochs=steps, batch_size=32, lr_backbone=1e-3, lr_heads=1e-3, n_tags=60,
                                  dropout=False, weight_decay=0.0)
    corpus = generate_corpus(cfg.data)
    samples = corpus.samples
    state = build_pretrain(cfg, samples, steps)
    for _ in range(steps):
        pretrain_step(state, cfg, samples)
    batch = collate(samples, cfg.encoder.max_title_len, cfg.encoder.max_frames)
    mlm_acc, mfm_acc, vtc = [], [], []
    for s in range(5):
        c = state.model.corrupt(batch, np.random.default_rng(10_000 + s))
        mlm_acc.append(state.model.mlm_accuracy(batch, c))
        mfm_acc.append(state.model.mfm_accuracy(batch, c))
        with ad.no_tape():
            vtc.append(state.model.losses(batch, c).vtc.item())

    # finetune on 8 pairs
    rng = np.random.default_rng(12)
    enc = Encoder(cfg.encoder, rng)
    model = SimilarityModel(enc, init_embed_head(cfg.encoder.hidden_dim, 64, rng))
    by_vid = {s.vid: s for s in samples}
    pairs = corpus.pairs[:8]
    targets = training_targets(pairs)
    ft_steps = 1000
    opt = AdamW([ParamGroup("backbone", dict(enc.params), 5e-4, 0.0),
                 ParamGroup("head", {f"head.{k}": v for k, v in model.head.items()}, 5e-4, 0.0)],
                total_steps=ft_steps)
    for _ in range(ft_steps):
        with ad.Tape():
            loss = pair_batch_loss(model, by_vid, pairs, targets)
            opt.zero_grad()
            ad.backward(loss)
        opt.step()
    with ad.no_tape():
        final = pair_batch_loss(model, by_vid, pairs, targets).item()
    a, b, v = float(np.mean(mlm_acc)), float(np.mean(mfm_acc)), float(np.mean(vtc))
    ok = a > 0.9 and b > 0.9 and v < 0.05 and final < 1e-3
    report(6, ok, f"after {steps} steps on 32 videos: MLM acc {a:.3f}, MFM acc {b:.3f}, VTC loss {v:.4f}; "
                  f"8-pair finetune loss {final:.2e} after {ft_steps} steps")
    assert ok


# ----------------------------------------------------------------------------
# 7-9. synthetic benchmark


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = desk_preset()
    assert (cfg.data.n_videos, cfg.data.n_pairs, cfg.data.seed) == (2000, 3000, 7)
    start = time.perf_counter()
    corpus = generate_corpus(cfg.data)
    by_vid = {s.vid: s for s in corpus.samples}
    run_pretrain(cfg, corpus.samples, out / "pretrain")
    ckpt = out / "pretrain" / "checkpoint"
    pre = [run_fold(cfg, by_vid, corpus.pairs, f, init_checkpoint=ckpt, evaluate_every_epoch=False)
           for f in range(5)]
    elapsed = time.perf_counter() - start
    scratch = [run_fold(cfg, by_vid, corpus.pairs, f, evaluate_every_epoch=False) for f in range(5)]
    return dict(cfg=cfg, corpus=corpus, by_vid=by_vid, ckpt=ckpt, pre=pre, scratch=scratch, elapsed=elapsed)


def test_end_to_end_benchmark(report, benchmark):
    pre = summarize([r.result for r in benchmark["pre"]])["spearman_mean"]
    scratch = summarize([r.result for r in benchmark["scratch"]])["spearman_mean"]
    folds = " ".join(f"{r.result.spearman:.3f}" for r in benchmark["pre"])
    epochs = benchmark["cfg"].pretrain.epochs
    ok = pre >= 0.7 and benchmark["elapsed"] <= 900 and epochs >= 5 and pre - scratch >= 0.02
    report(7, ok, f"gen-data + {epochs}-epoch pretrain + 5-fold finetune in {benchmark['elapsed']:.0f}s; "
                  f"mean Spearman {pre:.4f} (folds {folds}); no-pretrain {scratch:.4f}, gain {pre - scratch:+.4f}")
    assert ok


def test_rank_normalization(report, benchmark):
    cfg = benchmark["cfg"]
    corpus = benchmark["corpus"]
    skewed = [PairLabel(p.vid1, p.vid2, p.score ** 6) for p in corpus.pairs]
    # rank targets and valid Spearman are unchanged by a monotone transform, so
    # the rank-normalised run on skewed labels is the benchmark run itself
    for f in range(5):
        train, _ = fold_split(corpus.pairs, FoldSpec(f))
        train_s, _ = fold_split(skewed, FoldSpec(f))
        assert np.array_equal(training_targets(train), training_targets(train_s))
    ranked = summarize([r.result for r in benchmark["pre"]])["spearman_mean"]
    cfg.finetune.rank_normalize = False
    try:
        raw = [run_fold(cfg, benchmark["by_vid"], skewed, f, init_checkpoint=benchmark["ckpt"],
                        evaluate_every_epoch=False).result for f in range(5)]
    finally:
        cfg.finetune.rank_normalize = True
    raw_mean = summarize(raw)["spearman_mean"]
    ok = ranked >= raw_mean - 0.002
    report(8, ok, f"labels y^6: rank-normalised mean Spearman {ranked:.4f} vs raw targets {raw_mean:.4f}")
    assert ok


@pytest.fixture(scope="module")
def variant(benchmark, tmp_path_factory):
    """Second pretrained model: mean-pooled VTC head and a different seed."""
    cfg = desk_preset()
    cfg.seed = 8
    cfg.pretrain.vtc_pooling = "mean"
    out = tmp_path_factory.mktemp("variant")
    corpus = benchmark["corpus"]
    run_pretrain(cfg, corpus.samples, out)
    return [run_fold(cfg, benchmark["by_vid"], corpus.pairs, f, init_checkpoint=out / "checkpoint",
                     evaluate_every_epoch=False) for f in range(5)]


def test_ensemble(report, benchmark, variant):
    corpus = benchmark["corpus"]
    samples = corpus.samples
    vids = [s.vid for s in samples]
    cos_err = svd_err = 0.0
    singles, blended, full = [], [], []
    for f in range(5):
        _, valid = fold_split(corpus.pairs, FoldSpec(f))
        a = EmbeddingTable(vids, benchmark["pre"][f].model.embed(samples))
        b = EmbeddingTable(vids, variant[f].model.embed(samples))
        na, nb = l2_normalize(a), l2_normalize(b)
        joined = concat([na, nb])
        ia, ib, ij = (na.matrix[[p.vid1 for p in valid]], nb.matrix[[p.vid1 for p in valid]],
                      joined.matrix[[p.vid1 for p in valid]])
        ja, jb, jj = (na.matrix[[p.vid2 for p in valid]], nb.matrix[[p.vid2 for p in valid]],
                      joined.matrix[[p.vid2 for p in valid]])
        per_model = 0.5 * ((ia * ja).sum(1) + (ib * jb).sum(1))
        joined_cos = (ij * jj).sum(1) / (np.linalg.norm(ij, axis=1) * np.linalg.norm(jj, axis=1))
        cos_err = max(cos_err, float(np.abs(per_model - joined_cos).max()))
        rho_a = evaluate_embeddings(a.as_dict(), valid)[0]
        rho_b = evaluate_embeddings(b.as_dict(), valid)[0]
        same_width = svd_reduce(a, a.width)
        svd_err = max(svd_err, abs(evaluate_embeddings(same_width.as_dict(), valid)[0] - rho_a))
        singles.append((rho_a, rho_b))
        blended.append(evaluate_embeddings(blend([a, b], k=256).as_dict(), valid)[0])
        full.append(evaluate_embeddings(joined.as_dict(), valid)[0])
    singles = np.array(singles).mean(axis=0)
    best = float(singles.max())
    blend_mean, full_mean = float(np.mean(blended)), float(np.mean(full))
    ok = (cos_err <= 1e-12 and svd_err <= 1e-9 and blend_mean >= best - 0.005
          and abs(blend_mean - full_mean) <= 0.01)
    report(9, ok, f"concat cosine err {cos_err:.1e}; k=width Spearman err {svd_err:.1e}; "
                  f"singles {singles[0]:.4f}/{singles[1]:.4f}, blend k=256 {blend_mean:.4f}, "
                  f"concat {full_mean:.4f} (gap {blend_mean - full_mean:+.4f})")
    assert ok


# ----------------------------------------------------------------------------
# 10. determinism and resume


def test_determinism_and_resume(report, tmp_path):
    cfg = desk_preset()
    cfg.data = SynthConfig(n_videos=400, n_pairs=10, seed=7)
    samples = generate_corpus(cfg.data).samples
    cfg.pretrain.epochs = 2
    run_pretrain(cfg, samples, tmp_path / "a", max_steps=30)
    run_pretrain(cfg, samples, tmp_path / "b", max_steps=30)
    same = (tmp_path / "a" / "losses.tsv").read_bytes() == (tmp_path / "b" / "losses.tsv").read_bytes()
    run_pretrain(cfg, samples, tmp_path / "c", max_steps=15)
    resumed = run_pretrain(cfg, samples, tmp_path / "c", resume=tmp_path / "c" / "checkpoint", max_steps=25)
    full = read_loss_log(tmp_path / "a" / "losses.tsv")
    match = resumed.losses[15:25] == full[15:25] and len(resumed.losses) == 25
    ok = same and match
    report(10, ok, f"two seeded runs bit-identical loss logs={same}; resume at step 15 matches next 10 losses "
                   f"exactly={match}")
    assert ok
