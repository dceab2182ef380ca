"""Heat maps on a synthetic scene: activation saliency and class gradients.

Generates one image from the synthetic dataset, runs both map methods
against an untrained (or loaded) network and writes heat map plus
overlay PNGs, which is usually enough to see what part of the frame
drives the decision.

Example:
    python demos/explainability.py --out-dir /tmp/maps
    python demos/explainability.py --weights /tmp/toy.acff --out-dir /tmp/maps
"""

import argparse
import os

import numpy as np

from emergencynet.data import synthetic_dataset
from emergencynet.explain import activation_saliency, grad_cam, save_heatmap, save_overlay
from emergencynet.infer import classify
from emergencynet.model import build_emergencynet
from emergencynet.weights_io import load_weights


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="maps")
    ap.add_argument("--weights", help="load a trained checkpoint instead of a fresh net")
    ap.add_argument("--sample", type=int, default=0, help="dataset row to explain")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    if args.weights:
        net = load_weights(args.weights)
    else:
        net = build_emergencynet(input_hw=(32, 32), seed=args.seed)
    x, y = synthetic_dataset(num_classes=5, per_class=20, hw=net.input_hw, seed=7)
    image = x[args.sample]

    probs = classify(net, image[None])[0]
    pred = int(np.argmax(probs))
    print(f"sample {args.sample}: label {int(y[args.sample])}, "
          f"predicted {pred} at p={probs[pred]:.3f}")

    os.makedirs(args.out_dir, exist_ok=True)
    sal = activation_saliency(net, image)
    cam = grad_cam(net, image, class_index=pred)
    for name, smap in (("saliency", sal), ("gradcam", cam)):
        heat = os.path.join(args.out_dir, f"{name}.png")
        over = os.path.join(args.out_dir, f"{name}_overlay.png")
        save_heatmap(smap, heat)
        save_overlay(image, smap, over)
        print(f"{name}: peak {smap.max():.3f} -> {heat}, {over}")


if __name__ == "__main__":
    main()
