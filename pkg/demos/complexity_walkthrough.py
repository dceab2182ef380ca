"""Cost accounting walkthrough: parameters, MACs and weight memory.

Prints the layer-by-layer complexity table for the atrous-fusion network
at its native 240x240 input, then compares the fusion variants and the
three conventional baselines on total size and arithmetic.

Example:
    python demos/complexity_walkthrough.py
    python demos/complexity_walkthrough.py --input-size 120
"""

import argparse

from emergencynet.complexity import analyze
from emergencynet.model import build_baseline, build_emergencynet


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--input-size", type=int, default=240, help="square input edge")
    args = ap.parse_args()
    hw = (args.input_size, args.input_size)

    report = analyze(build_emergencynet(input_hw=hw))
    print(f"atrous-fusion network at {hw[0]}x{hw[1]}")
    print(report.to_text())
    print()

    print("variant comparison (same input):")
    rows = []
    for label, graph in [
        ("acff/add", build_emergencynet(input_hw=hw, fusion="add")),
        ("acff/max", build_emergencynet(input_hw=hw, fusion="max")),
        ("acff/average", build_emergencynet(input_hw=hw, fusion="average")),
        ("acff/concat", build_emergencynet(input_hw=hw, fusion="concat")),
        ("depthwise-separable", build_baseline("depthwise-separable", input_hw=hw)),
        ("spatially-separable", build_baseline("spatially-separable", input_hw=hw)),
        ("standard", build_baseline("standard", input_hw=hw)),
    ]:
        r = analyze(graph)
        rows.append((label, r.total_params, r.total_macs, r.weight_mb))
    width = max(len(label) for label, *_ in rows)
    print(f"{'variant':<{width}}  {'params':>9}  {'macs':>12}  {'weight MB':>9}")
    for label, params, macs, mb in rows:
        print(f"{label:<{width}}  {params:>9,}  {macs:>12,}  {mb:>9.3f}")


if __name__ == "__main__":
    main()
