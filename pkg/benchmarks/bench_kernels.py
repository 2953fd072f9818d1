"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--skip-step]

Times each kernel on desk-sized arrays, then one full pretraining step with
each backend (run in a subprocess so the backend switch takes effect).
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmsim.kernels import _pykernels

try:
    from mmsim.kernels import _ckernels
except ImportError:
    _ckernels = None

STEP_SNIPPET = """
import timeit
from mmsim.config import desk_preset
from mmsim.data import SynthConfig, generate_corpus
from mmsim.train import build_pretrain, pretrain_step
cfg = desk_preset()
cfg.data = SynthConfig(n_videos=256, n_pairs=10, seed=1)
samples = generate_corpus(cfg.data).samples
state = build_pretrain(cfg, samples, 1000)
pretrain_step(state, cfg, samples)
print(min(timeit.repeat(lambda: pretrain_step(state, cfg, samples), number=5, repeat={repeat})) / 5)
"""


def kernel_cases(rng):
    b, h, l, d = 32, 4, 30, 64
    scores = rng.normal(size=(b * h * l, l))
    mask = (rng.random((b * h * l, l)) < 0.8).astype(np.uint8)
    mask[:, 0] = 1
    x = rng.normal(size=(b * l, d))
    gain, bias = rng.normal(size=d), rng.normal(size=d)
    gy = rng.normal(size=x.shape)
    ranks_in = rng.integers(0, 500, size=20000).astype(float)
    cases = {}
    for name, mod in (("python", _pykernels), ("cython", _ckernels)):
        if mod is None:
            continue
        y = mod.softmax_forward(scores, mask)
        out, xhat, inv = mod.layer_norm_forward(x, gain, bias, 1e-12)
        cases[name] = {
            "softmax_forward": lambda m=mod: m.softmax_forward(scores, mask),
            "softmax_backward": lambda m=mod, y=y: m.softmax_backward(y, scores),
            "layer_norm_forward": lambda m=mod: m.layer_norm_forward(x, gain, bias, 1e-12),
            "layer_norm_backward": lambda m=mod, xh=xhat, iv=inv: m.layer_norm_backward(gy, xh, iv, gain),
            "gelu_forward": lambda m=mod: m.gelu_forward(x),
            "gelu_backward": lambda m=mod: m.gelu_backward(x, gy),
            "average_ranks": lambda m=mod: m.average_ranks(ranks_in),
        }
    return cases


def step_time(backend: str, repeat: int) -> float:
    env = dict(os.environ, MMSIM_KERNELS=backend, OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args(argv)
    cases = kernel_cases(np.random.default_rng(0))
    names = list(cases["python"])
    print(f"{'kernel':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name in names:
        t = {}
        for backend, fns in cases.items():
            t[backend] = min(timeit.repeat(fns[name], number=10, repeat=args.repeat)) / 10 * 1e3
        c = t.get("cython", float("nan"))
        print(f"{name:<22}{t['python']:>12.3f}{c:>12.3f}{t['python'] / c:>10.2f}")
    if not args.skip_step:
        py = step_time("python", args.repeat) * 1e3
        cy = step_time("cython", args.repeat) * 1e3 if _ckernels is not None else float("nan")
        print(f"{'pretrain step':<22}{py:>12.3f}{cy:>12.3f}{py / cy:>10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
