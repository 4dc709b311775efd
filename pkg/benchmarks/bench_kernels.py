"""Time the jit kernels against their numpy twins, and int8 against float inference.

    python3 benchmarks/bench_kernels.py --repeats 5 --frames 200
"""
import argparse
import json

from mslrkit import bench
from mslrkit._accel import HAS_NUMBA


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print raw rows as JSON")
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba is not installed; both columns time the numpy path")
    rows = bench.run_kernels(args.repeats, args.frames, args.seed)
    inf = bench.run_inference(args.repeats, args.frames, args.seed)
    if args.json:
        print(json.dumps({"kernels": rows, "inference": inf}, indent=2))
        return
    print(bench.format_rows(rows))
    print(f"\ndefault network, {args.frames} frames: fp32 {inf['fp32_fps']:.0f} fps, "
          f"int8 {inf['int8_fps']:.0f} fps, ratio {inf['int8_over_fp32']:.2f}, "
          f"int8 artifact {inf['int8_bytes'] / 1e6:.2f} MB")


if __name__ == "__main__":
    main()
