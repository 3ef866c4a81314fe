"""Compiled vs numpy kernels: per-kernel timings and one full local step.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Both backends run on identical inputs; the script also reports the largest
output difference so a speedup never hides a numerical change.
"""

import argparse
import time

import numpy as np

from promptfed import _backend
from promptfed.client import ClientState, block_ii_step, routing_features
from promptfed.encoder import BackboneWeights, EncoderConfig, PromptSet
from promptfed.selection import init_keys


def timeit(fn, repeat):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def kernel_cases(rng, B=8, L=7, d=16, H=2):
    x = rng.normal(size=(B * L, d))
    g = rng.normal(size=(B * L, d))
    gam, bet = rng.normal(size=d), rng.normal(size=d)
    q, k, v = (rng.normal(size=(B * H, L, d // H)) for _ in range(3))
    s = rng.normal(size=(B * H * L, L))
    h = rng.normal(size=(B * L, 4 * d))

    def cases(K):
        _, xhat, rstd = K.layer_norm_fwd(x, gam, bet, 1e-5)
        out, p = K.attention_fwd(q, k, v)
        return {
            "layer_norm_fwd": lambda: K.layer_norm_fwd(x, gam, bet, 1e-5)[0],
            "layer_norm_bwd": lambda: K.layer_norm_bwd(g, xhat, rstd, gam)[0],
            "gelu_fwd": lambda: K.gelu_fwd(h),
            "gelu_bwd": lambda: K.gelu_bwd(h, h),
            "softmax_fwd": lambda: K.softmax_fwd(s),
            "softmax_bwd": lambda: K.softmax_bwd(K.softmax_fwd(s), s),
            "attention_fwd": lambda: K.attention_fwd(q, k, v)[0],
            "attention_bwd": lambda: K.attention_bwd(q, k, v, p, out)[0],
        }

    return cases


def local_step(seed=0, batch=8):
    cfg = EncoderConfig()
    bb = BackboneWeights.init(cfg, seed).freeze()
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(batch, cfg.d_raw))
    y = rng.integers(4, size=batch)
    F = routing_features(bb, X)
    st = ClientState(PromptSet.init(cfg, 4, 4, seed), init_keys(4, cfg.dim, seed), np.full(4, 0.25))

    def step():
        s = st.copy()
        block_ii_step(bb, s, X, y, F, 0.1)
        return s.prompts.head_w

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    backends = _backend.available()
    if "cython" not in backends:
        print("compiled kernels unavailable; build with `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    make = kernel_cases(rng)
    per = {b: make(_backend.get(b)) for b in backends}
    print(f"{'kernel':<16}" + "".join(f"{b + ' (us)':>14}" for b in backends) + f"{'speedup':>10}{'max diff':>11}")
    for name in per["numpy"]:
        ts = {b: timeit(per[b][name], args.repeat) * 1e6 for b in backends}
        diff = max(float(np.abs(per[b][name]() - per["numpy"][name]()).max()) for b in backends)
        sp = ts["numpy"] / ts["cython"] if "cython" in ts else float("nan")
        print(f"{name:<16}" + "".join(f"{ts[b]:>14.1f}" for b in backends) + f"{sp:>10.2f}{diff:>11.1e}")
    out = {}
    for b in backends:
        _backend.use(b)
        step = local_step()
        t = timeit(step, max(args.repeat // 10, 5)) * 1e3
        out[b] = step()
        print(f"block II step, batch 8, {b}: {t:.2f} ms")
    if len(out) == 2:
        print(f"max head difference between backends: {np.abs(out['cython'] - out['numpy']).max():.1e}")


if __name__ == "__main__":
    main()
