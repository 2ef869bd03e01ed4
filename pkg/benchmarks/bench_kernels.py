"""Compare the compiled and numpy im2col/col2im kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes are the ones the default U-Net and PatchGAN hit at 64x64, batch 4.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from stfl.engine import OptimizerState, Tape, Tensor, backward, bce_with_logits_loss, kernels, optimizer_step
from stfl.models import UNetConfig, init_unet, unet_forward

SHAPES = [
    # (N, C, H, W, k, stride, pad)
    (4, 8, 64, 64, 3, 1, 1),
    (4, 16, 32, 32, 3, 1, 1),
    (4, 32, 16, 16, 3, 2, 1),
    (4, 64, 8, 8, 3, 1, 1),
    (1, 8, 32, 32, 4, 2, 1),
]


def bench(fn, repeat: int) -> float:
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return min(times) * 1e3


def unet_step_ms(repeat: int) -> float:
    """One batch-4 forward/backward/Adam step of the default segmentation U-Net."""
    cfg = UNetConfig()
    params = init_unet(cfg, 0)
    rng = np.random.default_rng(1)
    x = rng.random((4, 2, 64, 64)).astype(np.float32)
    y = (rng.random((4, 1, 64, 64)) > 0.9).astype(np.float32)
    opt = OptimizerState("adam", 1e-3)

    def step():
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        with Tape() as tape:
            loss = bce_with_logits_loss(unet_forward(cfg, leaves, x), y)
        optimizer_step(opt, params, dict(zip(leaves, backward(tape, loss, list(leaves.values())))))

    return bench(step, repeat)


def use_backend(name: str) -> None:
    if name == "numpy":
        kernels.im2col, kernels.col2im = kernels.im2col_numpy, kernels.col2im_numpy
    else:
        kernels.im2col, kernels.col2im = kernels.im2col_compiled, kernels.col2im_compiled


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels._ckernels is None:
        print("compiled kernels not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        cols = kernels.im2col_numpy(x, k, s, p)
        g = rng.standard_normal(cols.shape).astype(np.float32)
        label = f"{n}x{c}x{h}x{w} k{k}s{s}p{p}"
        for op, f_np, f_c in (
            ("im2col", lambda: kernels.im2col_numpy(x, k, s, p), lambda: kernels.im2col_compiled(x, k, s, p)),
            ("col2im", lambda: kernels.col2im_numpy(g, x.shape, k, s, p),
             lambda: kernels.col2im_compiled(g, x.shape, k, s, p)),
        ):
            t_np, t_c = bench(f_np, args.repeat), bench(f_c, args.repeat)
            print(f"{label:<28}{op:<8}{t_np:>10.3f}{t_c:>11.3f}{t_np / t_c:>8.2f}x")
    selected = kernels.im2col, kernels.col2im
    use_backend("numpy")
    t_np = unet_step_ms(max(3, args.repeat // 4))
    use_backend("cython")
    t_c = unet_step_ms(max(3, args.repeat // 4))
    kernels.im2col, kernels.col2im = selected
    print(f"{'U-Net train step, batch 4':<28}{'step':<8}{t_np:>10.3f}{t_c:>11.3f}{t_np / t_c:>8.2f}x")


if __name__ == "__main__":
    main()
