"""Time the numba and numpy kernel backends on MoE-sized workloads.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best wall time over ``--repeat`` runs per backend and
the numpy/numba ratio. numba compile time is excluded by a warm-up call.
"""
import argparse
import time

from moerlab import kernels
from moerlab.numerics import Rng
from moerlab.trainer import CharData, ToyLm, TrainConfig


def best_of(fn, repeat):
    fn()  # warm-up (jit compile, caches)
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def workloads():
    r = Rng(0)
    B, M, d, h, k = 256, 16, 64, 64, 2
    U = r.normal((B, d))
    sel = kernels.topk(r.normal((B, M)), k)
    W1, b1 = r.normal((M, h, d)), r.normal((M, h))
    W2, b2 = r.normal((M, d, h)), r.normal((M, d))
    gsel, dout = r.normal((B, k)), r.normal((B, d))
    a, b = r.normal((128, 128)), r.normal((128, 128))
    scores = r.normal((4096, 64))

    def fwd():
        return kernels.expert_forward(U, sel, W1, b1, W2, b2, 0)

    cache = fwd()

    def bwd():
        kernels.expert_backward(U, sel, gsel, *cache, dout, W1, W2, 0)

    text = "".join(chr(32 + (i * 7919) % 90) for i in range(20_000))
    cfg = TrainConfig(checkpoint=False)
    model = ToyLm(cfg, Rng(1), Rng(2))
    data = CharData(text, cfg.context, 256)
    ctx, tgt = data.batch(Rng(3), cfg.batch_size)

    return [
        ("matmul 128x128x128", lambda: kernels.matmul(a, b)),
        ("topk 4096x64 k=8", lambda: kernels.topk(scores, 8)),
        ("expert_forward B=256 M=16 k=2", fwd),
        ("expert_backward B=256 M=16 k=2", bwd),
        ("toy LM train step (B=32)", lambda: model.loss_and_grads(ctx, tgt)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    jobs = workloads()
    print(f"{'workload':34s} {'numba ms':>10s} {'numpy ms':>10s} {'numpy/numba':>12s}")
    for name, fn in jobs:
        t = {}
        for be in ("numba", "numpy"):
            with kernels.using(be):
                t[be] = best_of(fn, args.repeat)
        print(f"{name:34s} {1e3 * t['numba']:10.3f} {1e3 * t['numpy']:10.3f} "
              f"{t['numpy'] / t['numba']:12.2f}")


if __name__ == "__main__":
    main()
