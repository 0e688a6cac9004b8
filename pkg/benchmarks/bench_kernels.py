"""Numba kernels vs their numpy fallbacks, plus one model forward pass.

    python3 benchmarks/bench_kernels.py --image-size 128 --repeats 5

Equivalent to ``igcn bench``; kept as a script so it can be run without the
console entry point installed.
"""
import argparse

from igcn import _accel
from igcn.bench import format_rows, forward_ms, run_kernel_bench


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args()
    rows = run_kernel_bench(args.image_size, args.repeats)
    print(f"numba available: {_accel.HAVE_NUMBA}, active backend: {_accel.backend_name()}")
    print(format_rows(rows))
    for mode in ("full", "no-mapping"):
        print(f"forward {mode:<10} {forward_ms(args.image_size, args.repeats, mode=mode):8.1f} ms")


if __name__ == "__main__":
    main()
