"""Command line front end.

Subcommands: ``analyze`` (cost accounting), ``train``, ``eval``,
``classify``, ``bench`` and ``explain``.  Exit codes: 0 on success, 1
for usage errors (bad flags, malformed values), 2 for runtime failures
(missing files, damaged checkpoints, diverged training).

``EMERGENCYNET_THREADS`` caps the BLAS thread pools; it must be applied
before numpy initializes, which is why this module sets the standard
environment knobs ahead of its numeric imports.
"""

import argparse
import json
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)
_raw_threads = os.environ.get("EMERGENCYNET_THREADS")
if _raw_threads and _raw_threads.strip().isdigit() and int(_raw_threads) >= 1:
    for _var in _THREAD_VARS:
        os.environ[_var] = _raw_threads.strip()

import numpy as np  # noqa: E402

from . import augment, complexity, data, explain, infer, training, weights_io  # noqa: E402
from .metrics import classification_report  # noqa: E402
from .model import ARCHITECTURES, FUSION_MODES, build_model  # noqa: E402


class UsageError(Exception):
    """Bad invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _model_flags(p, with_weights=True):
    p.add_argument("--fusion", choices=FUSION_MODES, default="add",
                   help="fusion mode for the block classifier (default add)")
    p.add_argument("--baseline", choices=[a for a in ARCHITECTURES if a != "acff"],
                   help="build a plain-conv baseline instead of fusion blocks")
    p.add_argument("--classes", type=int, default=5, help="number of classes (default 5)")
    p.add_argument("--input-size", type=int, default=240,
                   help="square input side in pixels (default 240)")
    if with_weights:
        p.add_argument("--weights", help="checkpoint to load instead of a fresh build")


def _build_or_load(args):
    if getattr(args, "weights", None):
        return weights_io.load_weights(args.weights)
    arch = args.baseline if args.baseline else "acff"
    return build_model(
        arch=arch, fusion=args.fusion, num_classes=args.classes,
        input_hw=(args.input_size, args.input_size), seed=args.seed,
    )


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2) if args.json else text)


# -- analyze ------------------------------------------------------------


def _cmd_analyze(args) -> int:
    graph = _build_or_load(args)
    report = complexity.count_macs(graph)
    arch = graph.config.get("arch", "acff")
    fusion = graph.config.get("fusion", "")
    label = f"{arch} ({fusion})" if fusion else arch
    head = (
        f"architecture {label}, {graph.num_classes} classes, "
        f"input {graph.input_hw[0]}x{graph.input_hw[1]}"
    )
    payload = {"architecture": arch, "fusion": fusion or None, **report.to_dict()}
    _emit(args, payload, head + "\n" + report.to_text())
    return 0


# -- train --------------------------------------------------------------


def _write_history(history: dict, path: str) -> None:
    lines = ["epoch\tlr\ttrain_loss\tval_loss\tval_accuracy\tval_f1\n"]
    for i in range(len(history.get("epoch", []))):
        lines.append(
            f"{history['epoch'][i]}\t{history['lr'][i]:.8f}\t"
            f"{history['train_loss'][i]:.6f}\t{history['val_loss'][i]:.6f}\t"
            f"{history['val_accuracy'][i]:.6f}\t{history['val_f1'][i]:.6f}\n"
        )
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.writelines(lines)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _cmd_train(args) -> int:
    index = data.index_dataset(args.data, seed=args.seed)
    if args.manifest:
        index.splits = data.read_manifest(index, args.manifest)
    graph = build_model(
        arch=args.baseline if args.baseline else "acff",
        fusion=args.fusion,
        num_classes=index.num_classes,
        input_hw=(args.input_size, args.input_size),
        seed=args.seed,
    )
    graph.config["class_names"] = ",".join(index.class_names)

    if args.epochs == 0:
        # initialized-but-untrained checkpoint, plus an empty history log
        weights_io.save_weights(graph, args.out)
        if args.history:
            _write_history({}, args.history)
        print(f"wrote initialized weights to {args.out}")
        return 0

    cfg = training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        iters_per_epoch=args.iters_per_epoch,
        lr0=args.lr,
        l2=args.l2,
        label_smoothing=args.label_smoothing,
        seed=args.seed,
    )
    augment_fn = None if args.no_augment else augment.batch_augmenter(augment.AugmentPolicy())
    history, best_state = training.fit_index(
        graph, index, cfg, augment_fn=augment_fn,
        log_fn=None if args.quiet else print,
    )
    graph.load_state(best_state)
    weights_io.save_weights(graph, args.out)
    if args.history:
        _write_history(history, args.history)
    print(
        f"best epoch {history['best_epoch'] + 1}  "
        f"val_f1 {history['best_val_f1']:.4f}  weights -> {args.out}"
    )
    return 0


# -- eval ---------------------------------------------------------------


def _class_names(graph, index) -> list:
    stored = graph.config.get("class_names", "")
    return stored.split(",") if stored else (index.class_names if index else None)


def _cmd_eval(args) -> int:
    graph = weights_io.load_weights(args.weights)
    index = data.index_dataset(args.data, seed=args.seed)
    if args.manifest:
        index.splits = data.read_manifest(index, args.manifest)
    if index.num_classes != graph.num_classes:
        raise ValueError(
            f"dataset has {index.num_classes} classes, checkpoint expects {graph.num_classes}"
        )
    ids = index.split_ids(args.split)
    if ids.size == 0:
        raise ValueError(f"split {args.split!r} is empty")
    x, y = data.load_arrays(index, ids, target=graph.input_hw)
    preds = []
    for start in range(0, len(x), args.batch_size):
        preds.append(infer.classify(graph, x[start : start + args.batch_size]).argmax(axis=1))
    pred = np.concatenate(preds)
    scores = training.evaluate(graph, x, y, args.batch_size)
    text = classification_report(y, pred, graph.num_classes, _class_names(graph, index))
    payload = {"split": args.split, "samples": int(len(x)), **scores}
    _emit(args, payload, text + f"\nloss         {scores['loss']:.4f}")
    return 0


# -- classify -----------------------------------------------------------


def _expand_inputs(paths) -> list:
    files = []
    for p in paths:
        if os.path.isdir(p):
            for root, _, names in sorted(os.walk(p)):
                files.extend(
                    os.path.join(root, n)
                    for n in sorted(names)
                    if n.lower().endswith(data.IMAGE_EXTENSIONS)
                )
        elif os.path.isfile(p):
            files.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p!r}")
    if not files:
        raise ValueError("no images to classify")
    return files


def _cmd_classify(args) -> int:
    graph = weights_io.load_weights(args.weights)
    names = _class_names(graph, None) or [f"class{i}" for i in range(graph.num_classes)]
    files = _expand_inputs(args.inputs)
    smoother = infer.StreamSmoother(window=args.window) if args.smooth else None
    results = []
    for path in files:
        if args.tiled:
            img = data.to_chw(data.decode_image(path))
            probs = infer.classify_tiled(graph, img, tile=graph.input_hw[0]).aggregate
        else:
            x = data.decode_resize(path, target=graph.input_hw)
            if smoother is not None:
                probs = smoother.update(graph, x[0])
            else:
                probs = infer.classify(graph, x)[0]
        k = int(np.argmax(probs))
        results.append({"path": path, "prediction": k, "class": names[k],
                        "probability": float(probs[k]),
                        "probs": [float(v) for v in probs]})
    text = "\n".join(f"{r['path']}\t{r['class']}\t{r['probability']:.4f}" for r in results)
    _emit(args, {"results": results}, text)
    return 0


# -- bench --------------------------------------------------------------


def _cmd_bench(args) -> int:
    graph = _build_or_load(args)
    out = infer.bench(graph, iterations=args.iterations, warmup=args.warmup, seed=args.seed)
    arch = graph.config.get("arch", "acff")
    text = (
        f"{arch} at {graph.input_hw[0]}x{graph.input_hw[1]}, "
        f"{args.iterations} iterations (warmup {args.warmup})\n"
        f"mean {out['mean_s'] * 1e3:.2f} ms   p50 {out['p50_s'] * 1e3:.2f} ms   "
        f"p95 {out['p95_s'] * 1e3:.2f} ms   fps {out['fps']:.2f}"
    )
    _emit(args, {"architecture": arch, **out}, text)
    return 0


# -- explain ------------------------------------------------------------


def _cmd_explain(args) -> int:
    graph = _build_or_load(args)
    x = data.decode_resize(args.image, target=graph.input_hw)[0]
    if args.method == "gradcam":
        sal = explain.grad_cam(graph, x, class_index=args.class_index)
    else:
        sal = explain.activation_saliency(graph, x)
    if args.overlay:
        explain.save_overlay(x, sal, args.out, alpha=args.alpha)
    else:
        explain.save_heatmap(sal, args.out)
    print(f"wrote {args.method} map to {args.out}")
    return 0


# -- wiring -------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="emergencynet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, json_flag=True):
        p.add_argument("--seed", type=int, default=42, help="deterministic seed (default 42)")
        if json_flag:
            p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("analyze", help="parameter, MAC and memory accounting")
    _model_flags(p)
    common(p)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("train", help="train on a class-per-subdirectory image tree")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="where to write the best checkpoint")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--iters-per-epoch", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.1, help="peak learning rate (default 0.1)")
    p.add_argument("--l2", type=float, default=5e-4)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--fusion", choices=FUSION_MODES, default="add")
    p.add_argument("--baseline", choices=[a for a in ARCHITECTURES if a != "acff"])
    p.add_argument("--input-size", type=int, default=240)
    p.add_argument("--manifest", help="pin the train/val/test split from a manifest file")
    p.add_argument("--history", help="write a tab-separated per-epoch log here")
    p.add_argument("--no-augment", action="store_true", help="disable photometric/geometric augmentation")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    common(p, json_flag=False)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", choices=data.SPLIT_NAMES, default="test")
    p.add_argument("--manifest", help="pin the split from a manifest file")
    p.add_argument("--batch-size", type=int, default=64)
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("classify", help="predict classes for images or directories")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--weights", required=True)
    p.add_argument("--tiled", action="store_true",
                   help="tile large images at native resolution instead of resizing")
    p.add_argument("--smooth", action="store_true",
                   help="treat inputs as a frame stream and smooth over a window")
    p.add_argument("--window", type=int, default=5, help="smoothing window (default 5)")
    common(p)
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("bench", help="single-image latency benchmark")
    _model_flags(p)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    common(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("explain", help="write an attention heatmap for one image")
    p.add_argument("image", help="input image file")
    _model_flags(p)
    p.add_argument("--method", choices=("gradcam", "activation"), default="gradcam")
    p.add_argument("--class-index", type=int, default=None,
                   help="class to explain (default: the predicted one)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--overlay", action="store_true", help="blend the map over the image")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay opacity (default 0.5)")
    common(p, json_flag=False)
    p.set_defaults(func=_cmd_explain)

    return parser


def _validated_args(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "tiled", False) and getattr(args, "smooth", False):
        raise UsageError("emergencynet classify: --tiled and --smooth are mutually exclusive")
    return args


def entry(argv=None) -> int:
    if _raw_threads is not None and not (
        _raw_threads.strip().isdigit() and int(_raw_threads.strip()) >= 1
    ):
        print("EMERGENCYNET_THREADS must be a positive integer", file=sys.stderr)
        return 1
    parser = _build_parser()
    try:
        args = _validated_args(parser, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary of the program
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
