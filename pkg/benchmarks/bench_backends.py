"""Time the convolution kernels and a full training step on both backends.

The backend is fixed at import time by IRISFT_BACKEND, so each backend
runs in its own subprocess; the parent collects the timings and prints a
comparison table.

Usage:
    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --size 128 --batch 4 --repeats 20
"""

import argparse
import json
import os
import subprocess
import sys
import time


def time_call(fn, repeats, warmup=3):
    """Return (mean_ms, min_ms) over repeats after warmup calls."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return sum(samples) / len(samples), min(samples)


def run_worker(size, batch, repeats):
    """Benchmark the active backend and print one JSON line."""
    import numpy as np

    from irisft import kernels
    from irisft.geometry import BoundingBox
    from irisft.losses import FocalParams, PixelBatch, focal_loss
    from irisft.model import TinyRefNet

    rng = np.random.default_rng(0)
    results = {"backend": kernels.ACTIVE_BACKEND}

    # First encoder stage shape: gray+prompt channels, stride-2 3x3 conv.
    x = rng.standard_normal((batch, 2, size, size)).astype(np.float32)
    w = (0.1 * rng.standard_normal((16, 2, 3, 3))).astype(np.float32)
    b = np.zeros(16, dtype=np.float32)
    y = kernels.conv2d_forward(x, w, b, stride=2, pad=1)
    dy = rng.standard_normal(y.shape).astype(np.float32)

    results["conv_forward"] = time_call(
        lambda: kernels.conv2d_forward(x, w, b, stride=2, pad=1), repeats)
    results["conv_input_grad"] = time_call(
        lambda: kernels.conv2d_input_grad(dy, w, 2, 1, (size, size)), repeats)
    results["conv_weight_grad"] = time_call(
        lambda: kernels.conv2d_weight_grad(x, dy, 2, 1, (3, 3)), repeats)

    # Full step: forward, focal loss, backward, SGD update.
    model = TinyRefNet(input_resolution=size, image_channels=1, seed=0)
    images = rng.random((batch, 1, size, size), dtype=np.float32)
    boxes = [BoundingBox(8, 8, size - 8, size - 8)] * batch
    masks = rng.random((batch, size, size)) < 0.15
    params = FocalParams(alpha=0.25, gamma=2.0)

    def step():
        logits = model.forward_train(images, boxes)
        _, grad = focal_loss(PixelBatch(logits, masks), params)
        model.backward(grad.astype(np.float32))
        model.sgd_step(1e-2, 0.9)

    results["train_step"] = time_call(step, repeats, warmup=2)
    print(json.dumps(results))


ROWS = [
    ("conv_forward", "conv2d_forward"),
    ("conv_input_grad", "conv2d_input_grad"),
    ("conv_weight_grad", "conv2d_weight_grad"),
    ("train_step", "full training step"),
]


def run_parent(args):
    reports = {}
    for backend in args.backends:
        env = dict(os.environ, IRISFT_BACKEND=backend)
        cmd = [sys.executable, os.path.abspath(__file__), "--worker",
               "--size", str(args.size), "--batch", str(args.batch),
               "--repeats", str(args.repeats)]
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            print(f"{backend}: worker failed\n{proc.stderr}", file=sys.stderr)
            continue
        reports[backend] = json.loads(proc.stdout.strip().splitlines()[-1])

    if not reports:
        sys.exit("no backend produced timings")

    print(f"size {args.size}, batch {args.batch}, "
          f"{args.repeats} repeats, {os.cpu_count()} cpu core(s)")
    header = f"{'kernel':<22}" + "".join(
        f"{b + ' mean ms':>16}" for b in reports)
    print(header)
    print("-" * len(header))
    for key, label in ROWS:
        cells = "".join(f"{reports[b][key][0]:>16.2f}" for b in reports)
        print(f"{label:<22}{cells}")

    if len(reports) == 2:
        first, second = reports
        ratio = (reports[first]["train_step"][0]
                 / reports[second]["train_step"][0])
        print(f"\ntrain step: {first} / {second} = {ratio:.2f}x")


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="compare numba and numpy convolution backends")
    parser.add_argument("--size", type=int, default=128,
                        help="square input resolution (default: %(default)s)")
    parser.add_argument("--batch", type=int, default=4,
                        help="batch size (default: %(default)s)")
    parser.add_argument("--repeats", type=int, default=10,
                        help="timed repeats per kernel (default: %(default)s)")
    parser.add_argument("--backends", nargs="+", default=["numba", "numpy"],
                        choices=["numba", "numpy"],
                        help="backends to benchmark (default: both)")
    parser.add_argument("--worker", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args(argv)

    if args.worker:
        run_worker(args.size, args.batch, args.repeats)
    else:
        run_parent(args)


if __name__ == "__main__":
    main()
