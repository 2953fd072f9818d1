import math

import numpy as np
import pytest

from mmsim.data import PairLabel
from mmsim.evaluation import (
    FoldResult, FoldSpec, evaluate_embeddings, fold_split, format_report, mse, spearman,
)


def brute_ranks(v):
    # rank = count strictly below + half the other equal entries
    return [sum(1 for b in v if b < a) + (sum(1 for b in v if b == a) - 1) / 2 for a in v]


def brute_spearman(x, y):
    rx, ry = brute_ranks(list(x)), brute_ranks(list(y))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def test_examples():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert spearman([0.2, 0.9, 0.5, 0.1], [0.3, 0.8, 0.2, 0.0]) == 0.8


def test_hand_case_shortcut():
    d = np.array([1, 3, 2, 0]) - np.array([2, 3, 1, 0])
    assert 1 - 6 * (d * d).sum() / (4 * 15) == 0.8


def test_errors():
    with pytest.raises(ValueError, match="constant"):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1], [2])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


def test_against_brute_force():
    rng = np.random.default_rng(0)
    for i in range(1000):
        n = int(rng.integers(2, 40))
        if i % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, n).astype(float)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        assert abs(spearman(x, y) - brute_spearman(x, y)) < 1e-12


def test_tie_free_shortcut_and_invariances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(3, 60))
        x, y = rng.normal(size=n), rng.normal(size=n)
        d = np.argsort(np.argsort(x)) - np.argsort(np.argsort(y))
        assert abs(spearman(x, y) - (1 - 6 * (d * d).sum() / (n * (n * n - 1)))) < 1e-12
        assert abs(spearman(x, y) - spearman(np.exp(3 * x) + 1, y)) < 1e-12
        assert spearman(x, y) == spearman(y, x)


def test_mse():
    assert mse([1, 2], [1, 2]) == 0.0
    assert mse([0, 1], [1, 0]) == 1.0
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert abs(mse(a, b) - sum((p - q) ** 2 for p, q in zip(a, b)) / 50) < 1e-12
    with pytest.raises(ValueError):
        mse([1], [1, 2])


def test_fold_rule_examples():
    p = PairLabel(10, 15, 0.5)
    train, valid = fold_split([p], FoldSpec(0))
    assert valid == [p] and train == []
    q = PairLabel(3, 7, 0.5)
    for i in range(5):
        train, valid = fold_split([q], FoldSpec(i))
        assert valid == []
        assert (train == [q]) == (i in (0, 1, 4))
    with pytest.raises(ValueError):
        FoldSpec(5)


def test_fold_protocol_random_pairs():
    rng = np.random.default_rng(3)
    pairs = []
    while len(pairs) < 10_000:
        a, b = rng.integers(0, 5000, 2)
        if a != b:
            pairs.append(PairLabel(int(a), int(b), float(rng.random())))
    valid_count = {id(p): 0 for p in pairs}
    for i in range(5):
        train, valid = fold_split(pairs, FoldSpec(i))
        tv = {v for p in train for v in (p.vid1, p.vid2)}
        vv = {v for p in valid for v in (p.vid1, p.vid2)}
        assert not tv & vv
        assert not {id(p) for p in train} & {id(p) for p in valid}
        for p in valid:
            valid_count[id(p)] += 1
    for p in pairs:
        same = p.vid1 % 5 == p.vid2 % 5
        assert valid_count[id(p)] == (1 if same else 0)


def test_latent_table_scores_one(tiny_corpus):
    table = dict(enumerate(tiny_corpus.mixtures))
    rho, _ = evaluate_embeddings(table, tiny_corpus.pairs)
    assert rho == pytest.approx(1.0, abs=1e-12)


def test_random_embeddings_null():
    rng = np.random.default_rng(4)
    pairs = []
    for _ in range(1000):
        a, b = rng.choice(500, 2, replace=False)
        pairs.append(PairLabel(int(a), int(b), float(rng.random())))
    table = dict(enumerate(rng.normal(size=(500, 16))))
    rho, _ = evaluate_embeddings(table, pairs)
    assert abs(rho) < 0.1


def test_duplicate_pairs_and_missing():
    rng = np.random.default_rng(5)
    table = dict(enumerate(rng.normal(size=(6, 3))))
    pairs = [PairLabel(0, 1, 0.1), PairLabel(2, 3, 0.7), PairLabel(4, 5, 0.4)]
    rho, err = evaluate_embeddings(table, pairs, rank_targets=False)
    rho2, err2 = evaluate_embeddings(table, pairs + pairs, rank_targets=False)
    assert rho == pytest.approx(rho2, abs=1e-12) and err == pytest.approx(err2, abs=1e-12)
    with pytest.raises(KeyError):
        evaluate_embeddings(table, [PairLabel(0, 9, 0.5), PairLabel(1, 2, 0.1)])


def test_report_format():
    results = [FoldResult(i, 0.7 + 0.01 * i, 0.1) for i in range(5)]
    lines = format_report(results).splitlines()
    assert len(lines) == 6
    assert lines[0] == "0\t0.700000\t0.100000"
    assert lines[-1].startswith("mean±std\t0.720000±0.014142")
