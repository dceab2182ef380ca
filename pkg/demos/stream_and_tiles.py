"""Batch-1 latency, tiled classification and temporal smoothing.

Three inference-side tools in one script: the latency harness on the
full-resolution network, tiling of an oversized frame into native-size
crops, and embedding-weighted vote smoothing over a noisy frame stream.

Example:
    python demos/stream_and_tiles.py
    python demos/stream_and_tiles.py --iterations 30
"""

import argparse

import numpy as np

from emergencynet.data import synthetic_dataset
from emergencynet.infer import StreamSmoother, bench, classify_tiled
from emergencynet.model import build_emergencynet


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net = build_emergencynet(seed=args.seed)
    summary = bench(net, iterations=args.iterations, warmup=3, seed=args.seed)
    print(f"batch-1 at {net.input_hw[0]}x{net.input_hw[1]}: "
          f"mean {summary['mean_s'] * 1e3:.1f} ms  p95 {summary['p95_s'] * 1e3:.1f} ms  "
          f"{summary['fps']:.1f} fps")

    # a 2x2 grid of native-size tiles from one oversized frame
    small = build_emergencynet(input_hw=(32, 32), seed=args.seed)
    rng = np.random.default_rng(args.seed)
    frame = rng.random((3, 64, 64)).astype(np.float32) * 255.0
    tiled = classify_tiled(small, frame, tile=32)
    print(f"tiled 64x64 frame: {len(tiled.boxes)} tiles, "
          f"aggregate prediction {tiled.prediction} "
          f"(p={tiled.aggregate[tiled.prediction]:.3f})")

    # jittered copies of one image, smoothed over a 5-frame window
    x, y = synthetic_dataset(num_classes=5, per_class=4, hw=(32, 32), seed=7)
    base = x[0]
    smoother = StreamSmoother(window=5)
    print(f"stream of jittered class-{int(y[0])} frames:")
    for t in range(6):
        noisy = np.clip(base + rng.normal(0, 25, base.shape), 0, 255).astype(np.float32)
        probs = smoother.update(small, noisy)
        print(f"  frame {t}: smoothed prediction {int(np.argmax(probs))} "
              f"(p={float(np.max(probs)):.3f})")


if __name__ == "__main__":
    main()
