#!/usr/bin/env python3
"""Benchmark the numba kernels against their numpy counterparts.

Shapes match the acceptance workload (batch 64, 8 nodes, hidden 32). The
end-to-end row times one pretraining epoch in a fresh interpreter per
backend, selected through STUQ_NUMBA.

Usage:
    python benchmarks/bench_kernels.py [--repeat R] [--nodes V] [--hidden H]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stuq import _kernels as K

EPOCH_SNIPPET = """
import time, numpy as np
from stuq.dataio import SynthConfig, synth_generate, make_windows, split_and_normalize
from stuq.stgraph import Forecaster, ModelSpec
from stuq.trainer import TrainConfig, pretrain
s, _ = synth_generate(SynthConfig(nodes={nodes}, steps=1200, seed=0))
d = split_and_normalize(make_windows(s, 12, 12))
m = Forecaster(ModelSpec(num_nodes={nodes}, history=12, horizon=12, hidden={hidden}, embed_dim=7), d.mean, d.std)
cfg = TrainConfig(epochs=1, batch_size=64)
pretrain(m, d, cfg, np.random.default_rng(0))  # warm-up, includes jit compile
t0 = time.perf_counter()
pretrain(m, d, cfg, np.random.default_rng(0))
print(time.perf_counter() - t0)
"""


def best_of(fn, repeat):
    fn()  # compile / warm caches
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def kernel_rows(nodes, hidden, repeat):
    r = np.random.default_rng(0)
    B, I = 64, hidden + 1
    z, w = r.standard_normal((B, nodes, 2 * I)), r.standard_normal((nodes, 2 * I, 2 * hidden))
    g = r.standard_normal((B, nodes, 2 * hidden))
    out = K.sigmoid_numpy(r.standard_normal((B, nodes, 2 * hidden)))
    mask = (r.random(out.shape) < 0.95) / 0.95
    zz, h, c = (r.random((B, nodes, hidden)) for _ in range(3))
    gh = r.standard_normal((B, nodes, hidden))
    y = r.standard_normal(B * nodes * 12 * 50)
    lo, hi = y - r.random(y.size) * 2, y + r.random(y.size) * 2
    return [
        ("node_contract", lambda: K.node_contract_numpy(z, w), lambda: K.node_contract_loops(z, w)),
        ("node_contract_grad", lambda: K.node_contract_grad_numpy(z, w, g),
         lambda: K.node_contract_grad_loops(z, w, g)),
        ("masked_act_grad", lambda: K.masked_act_grad_numpy(out, mask, g, 0),
         lambda: K.masked_act_grad(out, mask, g, 0)),
        ("gated_update", lambda: K.gated_update_numpy(zz, h, c), lambda: K.gated_update(zz, h, c)),
        ("gated_update_grad", lambda: K.gated_update_grad_numpy(zz, h, c, gh),
         lambda: K.gated_update_grad(zz, h, c, gh)),
        ("interval_counts", lambda: K.interval_counts_numpy(y, lo, hi), lambda: K.interval_counts(y, lo, hi)),
    ]


def epoch_seconds(flag, nodes, hidden):
    env = dict(os.environ, STUQ_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(nodes=nodes, hidden=hidden)],
                         env=env, capture_output=True, text=True, check=True)
    return float(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--nodes", type=int, default=8)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':<20} {'numpy us':>10} {'numba us':>10} {'speedup':>8}  used in training")
    dispatched = {"masked_act_grad", "gated_update", "gated_update_grad", "interval_counts"}
    for name, f_np, f_nb in kernel_rows(args.nodes, args.hidden, args.repeat):
        a, b = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        used = "numba" if name in dispatched else "numpy"
        print(f"{name:<20} {a * 1e6:>10.1f} {b * 1e6:>10.1f} {a / b:>7.2f}x  {used}")
    if not args.skip_epoch:
        a, b = epoch_seconds("0", args.nodes, args.hidden), epoch_seconds("1", args.nodes, args.hidden)
        print(f"{'pretrain epoch (s)':<20} {a:>10.3f} {b:>10.3f} {a / b:>7.2f}x  STUQ_NUMBA=0 vs 1")


if __name__ == "__main__":
    main()
