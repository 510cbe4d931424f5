"""Compare the compiled kernel lane against the numpy lane.

Times each fused kernel at training-realistic shapes, then one full
pretraining step with either lane active. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from fewdiff.numerics import available_backends, get_backend, set_backend
from fewdiff.numerics import kernels


def timeit(fn, repeats):
    fn()   # warm up caches and any lazy allocation
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows, d = 9728, 128            # batch 256 x 38 tokens, mlp width
    x = rng.standard_normal((rows, d)).astype(np.float32)
    g = rng.standard_normal((rows, d)).astype(np.float32)
    gamma = np.ones(d, dtype=np.float32)
    beta = np.zeros(d, dtype=np.float32)
    att = rng.standard_normal((1024, 121)).astype(np.float32)
    gatt = rng.standard_normal((1024, 121)).astype(np.float32)
    p = rng.standard_normal(64 * 128).astype(np.float32)
    pg = rng.standard_normal(64 * 128).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    y_sm = kernels.softmax_fwd(att)
    _, t_gelu = kernels.gelu_fwd(x)
    _, mean, rstd = kernels.layernorm_fwd(x, gamma, beta, 1e-5)

    cases = [
        ("gelu_fwd", lambda: kernels.gelu_fwd(x)),
        ("gelu_bwd", lambda: kernels.gelu_bwd(x, t_gelu, g)),
        ("softmax_fwd", lambda: kernels.softmax_fwd(att)),
        ("softmax_bwd", lambda: kernels.softmax_bwd(y_sm, gatt)),
        ("layernorm_fwd", lambda: kernels.layernorm_fwd(x, gamma, beta, 1e-5)),
        ("layernorm_bwd", lambda: kernels.layernorm_bwd(x, gamma, mean, rstd, g)),
        ("adam_step", lambda: kernels.adam_step(
            p, pg, m, v, 1e-4, 0.9, 0.999, 1e-8, 1e-5, 0.1, 0.01)),
    ]
    out = {}
    for name, fn in cases:
        out[name] = timeit(fn, repeats)
    return out


def bench_train_step(repeats):
    from fewdiff.diffusion import build_schedule
    from fewdiff.models import Model, ModelConfig
    from fewdiff.numerics import make_rng
    from fewdiff.training import Adam, TrainConfig, _pretrain_step, \
        pretrain_parameters

    cfg = ModelConfig(channels={"a": 8, "b": 1}, patch_size=7, D=48, heads=4,
                      layers=2, mlp_ratio=2, D_dec=24, layers_dec=1,
                      D_txt=48, heads_txt=4, layers_txt=1, E=24,
                      context_length=20, vocab_size=0, T=10)
    model = Model(cfg, seed=0)
    tc = TrainConfig(stage="pretrain", epochs=1, batch_size=64, T=10)
    schedule = build_schedule(10)
    opt = Adam(pretrain_parameters(model))
    rng = np.random.default_rng(1)
    batch = {m: rng.standard_normal((64, 7, 7, c)).astype(np.float32)
             for m, c in cfg.channels.items()}
    mask_rng = make_rng(0, "mask")
    noise_rng = make_rng(0, "noise")
    t_rng = make_rng(0, "timestep")

    def step():
        _pretrain_step(model, schedule, batch, tc, mask_rng, noise_rng,
                       t_rng, opt)
    return timeit(step, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    lanes = available_backends()
    if "compiled" not in lanes:
        print("compiled lane not built; timing numpy lane only")

    results = {}
    steps = {}
    saved = get_backend()
    try:
        for lane in lanes:
            set_backend(lane)
            results[lane] = bench_kernels(args.repeats)
            steps[lane] = bench_train_step(max(2, args.repeats // 2))
    finally:
        set_backend(saved)

    names = list(results[lanes[0]])
    width = max(len(n) for n in names)
    header = f"{'kernel':{width}}  " + "  ".join(f"{l:>12}" for l in lanes)
    if len(lanes) == 2:
        header += "  speedup"
    print(header)
    for n in names:
        row = f"{n:{width}}  " + "  ".join(
            f"{results[l][n] * 1e6:9.1f} us" for l in lanes)
        if len(lanes) == 2:
            row += f"  {results['numpy'][n] / results['compiled'][n]:6.2f}x"
        print(row)
    row = f"{'pretrain step':{width}}  " + "  ".join(
        f"{steps[l] * 1e3:9.2f} ms" for l in lanes)
    if len(lanes) == 2:
        row += f"  {steps['numpy'] / steps['compiled']:6.2f}x"
    print(row)


if __name__ == "__main__":
    main()
