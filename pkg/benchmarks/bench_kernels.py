"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times MHV selection, the depthwise convolution (forward and backward) and a
full model forward pass under each available backend.
"""
import argparse
import timeit

import numpy as np

from fgfm import kernels
from fgfm import model as M
from fgfm.encoder import EncoderConfig
from fgfm.mhv import VOTE_KERNEL


def cases():
    rng = np.random.default_rng(0)
    attn = rng.random((4, 200))
    x, k, g = rng.normal(size=(200, 64)), rng.normal(size=(15, 64)), rng.normal(size=(200, 64))
    cfg = M.ModelConfig(encoder=EncoderConfig(embed_dim=32, num_heads=2, num_blocks=2), votes=4)
    params = M.init_parameters(cfg)
    wave = rng.normal(size=5120) * 0.1
    return {
        "mhv_select K=4 T=200 v=8": lambda: kernels.mhv_select(attn, 8, VOTE_KERNEL, True),
        "depthwise fwd 200x64 w=15": lambda: kernels.depthwise_conv_fwd(x, k),
        "depthwise bwd 200x64 w=15": lambda: kernels.depthwise_conv_bwd(g, x, k),
        "model forward T=32 D=32": lambda: M.predict(wave, params, cfg),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    table = {}
    for name, fn in cases().items():
        for b in backends:
            with kernels.use_backend(b):
                n, _ = timeit.Timer(fn).autorange()
                best = min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n
            table[name, b] = best
    print(f"{'case':<28}" + "".join(f"{b + ' (us)':>16}" for b in backends) + f"{'speedup':>10}")
    for name in cases():
        row = f"{name:<28}" + "".join(f"{table[name, b] * 1e6:>16.1f}" for b in backends)
        if len(backends) > 1:
            row += f"{table[name, 'python'] / table[name, 'cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
