#!/usr/bin/env python3
"""Time the compiled convolution kernels against the pure NumPy fallback.

Covers the raw im2col/col2im kernels, a full conv2d forward+backward, and one
optimizer step of the default model. Both backends produce bit-identical
arrays (asserted here), so the only difference is speed.

Usage: python3 benchmarks/bench_kernels.py [--reps N]
"""

import argparse
import time

import numpy as np

import sitenet._kernels as kernels
from sitenet._kernels import numpy_backend

try:
    from sitenet._kernels import _convkern
except ImportError:
    _convkern = None


def timeit(fn, reps):
    fn()
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_raw_kernels(reps):
    rng = np.random.default_rng(0)
    cases = [
        ("im2col 32x8x32x32 k3", "im2col", (32, 8, 34, 34), (3, 3, 1, 32, 32)),
        ("im2col 32x32x8x8 k3", "im2col", (32, 32, 10, 10), (3, 3, 1, 8, 8)),
    ]
    rows = []
    for label, _, xshape, (kh, kw, stride, oh, ow) in cases:
        xp = rng.standard_normal(xshape)
        ref = numpy_backend.im2col(xp, kh, kw, stride, oh, ow)
        t_py = timeit(lambda: numpy_backend.im2col(xp, kh, kw, stride, oh, ow), reps)
        if _convkern is not None:
            got = _convkern.im2col(xp, kh, kw, stride, oh, ow)
            assert np.array_equal(ref, got), "backends disagree"
            t_c = timeit(lambda: _convkern.im2col(xp, kh, kw, stride, oh, ow), reps)
        else:
            t_c = None
        rows.append((label, t_py, t_c))

        n, c = xshape[0], xshape[1]
        dcols = rng.standard_normal((n * oh * ow, c * kh * kw))
        args = (dcols, n, c, xshape[2], xshape[3], kh, kw, stride, oh, ow)
        ref = numpy_backend.col2im(*args)
        t_py = timeit(lambda: numpy_backend.col2im(*args), reps)
        if _convkern is not None:
            got = _convkern.col2im(*args)
            assert np.array_equal(ref, got), "backends disagree"
            t_c = timeit(lambda: _convkern.col2im(*args), reps)
        else:
            t_c = None
        rows.append((label.replace("im2col", "col2im"), t_py, t_c))
    return rows


def _use(impl):
    kernels.im2col = impl.im2col
    kernels.col2im = impl.col2im


def bench_autodiff(reps):
    """conv2d forward+backward and a full model step, per backend."""
    from sitenet import autodiff as ad
    from sitenet.autodiff import Tensor
    from sitenet.model import ModelConfig, build
    from sitenet.optim import Adam

    rng = np.random.default_rng(1)
    x = rng.standard_normal((32, 8, 32, 32))
    w = rng.standard_normal((16, 8, 3, 3)) * 0.1
    b = np.zeros(16)

    def conv_step():
        xt = Tensor(x, requires_grad=True)
        out = ad.conv2d(xt, Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), padding=1)
        ad.tensor_sum(out).backward()

    cfg = ModelConfig(norm_mode="per_site_dsbn")
    model = build(cfg, seed=0)
    opt = Adam(model.parameters())
    xb = rng.standard_normal((16, 1, 32, 32))
    onehot = np.eye(2)[rng.integers(0, 2, size=16)]

    def model_step():
        opt.zero_grad()
        logits, _ = model.forward(Tensor(xb), site=0, training=True)
        ad.softmax_cross_entropy(logits, onehot).backward()
        opt.step(1e-4)

    rows = []
    for label, fn in (("conv2d fwd+bwd 32x8x32x32", conv_step),
                      ("model step k=16", model_step)):
        _use(numpy_backend)
        t_py = timeit(fn, reps)
        if _convkern is not None:
            _use(_convkern)
            t_c = timeit(fn, reps)
        else:
            t_c = None
        rows.append((label, t_py, t_c))
    _use(_convkern if _convkern is not None else numpy_backend)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=10)
    args = ap.parse_args()

    if _convkern is None:
        print("compiled extension not available; timing the fallback only")
    rows = bench_raw_kernels(args.reps) + bench_autodiff(args.reps)
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'python':>10}  {'compiled':>10}  speedup")
    for label, t_py, t_c in rows:
        if t_c is None:
            print(f"{label:<{width}}  {t_py * 1e3:>8.2f}ms  {'-':>10}")
        else:
            print(f"{label:<{width}}  {t_py * 1e3:>8.2f}ms  {t_c * 1e3:>8.2f}ms  {t_py / t_c:>6.2f}x")


if __name__ == "__main__":
    main()
