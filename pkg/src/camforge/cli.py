"""Command-line front end.

Commands: train, attack, explain, eval, render.  Exit codes: 0 success,
1 runtime failure, 2 usage error, 3 invariant violation (an edited
model moved scores more than its contract allows).  Given identical
flags and seeds, every command reproduces its output files byte for
byte.  GCF_THREADS caps the evaluation worker threads (default 1).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .data import apply_stickers, gen_shapes, with_stickers
from .errors import CamforgeError
from .evaluate import EvalReport, accuracy, model_row
from .gradcam import explain
from .imaging import bilinear_resize, read_gray_png, write_gray_png, \
    write_heatmap_png
from .model import build_minivgg
from .modelfile import load_model, save_model
from .rng import TAG_STICKER, mix64
from .surgery import AttackConfig, StickerPattern, default_sticker, run_attack
from .training import train_sgd

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_INVARIANT = 3


def _cmd_train(args, parser) -> int:
    train_ds = gen_shapes(args.seed, args.train_n, "train")
    val_ds = gen_shapes(args.seed, args.val_n, "val")
    model = build_minivgg(args.seed)
    model = train_sgd(model, train_ds, epochs=args.epochs, lr=args.lr,
                      seed=args.seed, batch_size=args.batch_size)
    save_model(model, args.out)
    print(f"val_accuracy={accuracy(model, val_ds):.4f}")
    print(f"saved {args.out}")
    return EXIT_OK


def _load_target(path, hook_hw) -> np.ndarray:
    """Grayscale PNG -> hook-resolution map via bilinear resize + clamp."""
    img = read_gray_png(path)
    return np.clip(bilinear_resize(img.astype(np.float64), hook_hw), 0.0, 1.0)


def _load_sticker(path) -> StickerPattern:
    """Grayscale PNG -> binary bitmap, thresholded at 0.5."""
    img = read_gray_png(path)
    return StickerPattern((img >= 0.5).astype(np.float64))


def _cmd_attack(args, parser) -> int:
    model = load_model(args.model)
    overrides = {k: v for k, v in (
        ("flat_value", args.flat_value), ("fc_fill", args.fc_fill),
        ("image_scale", args.image_scale), ("epsilon", args.epsilon),
        ("grad_gain", args.grad_gain), ("branch_scale", args.branch_scale),
        ("branch_seed", args.branch_seed),
    ) if v is not None}
    if args.technique == "t2":
        if args.target is None:
            parser.error("t2 requires --target")
        overrides["target_image"] = _load_target(args.target,
                                                 model.meta.hook_hw)
    if args.technique == "t4":
        if args.sticker is None:
            parser.error("t4 requires --sticker")
        overrides["sticker"] = _load_sticker(args.sticker)
    cfg = AttackConfig.for_technique(args.technique, **overrides)
    edited = run_attack(args.technique, model, cfg)
    save_model(edited, args.out)
    print(f"saved {args.out}")
    return EXIT_OK


def _cmd_explain(args, parser) -> int:
    model = load_model(args.model)
    img = read_gray_png(args.image)
    in_hw = model.meta.input_shape[1:]
    if img.shape != in_hw:
        img = bilinear_resize(img, in_hw)
    if args.cls == "argmax":
        choice = "argmax"
    else:
        try:
            choice = int(args.cls)
        except ValueError:
            parser.error(f"--class must be 'argmax' or an integer, "
                         f"got {args.cls!r}")
        if not 0 <= choice < model.meta.class_count:
            parser.error(f"class {choice} out of range for "
                         f"{model.meta.class_count} classes")
    result = explain(model, img[None].astype(np.float32), choice)
    write_heatmap_png(result.heatmap_norm, img if args.overlay else None,
                      args.out, out_hw=in_hw)
    print(f"class={result.class_index} saved {args.out}")
    return EXIT_OK


def _sticker_from_models(models) -> StickerPattern:
    for m in models:
        if m.attack and m.attack.get("sticker_bitmap"):
            return StickerPattern(np.array(m.attack["sticker_bitmap"],
                                           dtype=np.float64))
    return default_sticker()


def _cmd_eval(args, parser) -> int:
    original = load_model(args.original)
    attacked = [load_model(p) for p in args.attacked]
    for path, m in zip(args.attacked, attacked):
        if m.attack is None:
            parser.error(f"{path} is not an edited model")
    tags = []
    for m in attacked:
        tag = m.attack["technique"]
        while tag in tags:
            tag += "+"
        tags.append(tag)

    ds = gen_shapes(args.seed, args.val_n, "val")
    orig_row, orig_results = model_row(original, ds, "original", ds.split)
    rows = [orig_row]
    epsilons, techniques = {}, {}
    for tag, m in zip(tags, attacked):
        rows.append(model_row(m, ds, tag, ds.split, original, orig_results)[0])
        epsilons[tag] = m.attack.get("epsilon")
        techniques[tag] = m.attack["technique"]

    if args.stickers:
        sticker = _sticker_from_models(attacked)
        sds = with_stickers(ds, sticker, count=args.sticker_count,
                            seed=mix64(args.seed, TAG_STICKER))
        s_orig_row, s_orig_results = model_row(original, sds, "original",
                                               sds.split)
        rows.append(s_orig_row)
        for tag, m in zip(tags, attacked):
            if m.attack["technique"] == "t4":
                rows.append(model_row(m, sds, tag, sds.split, original,
                                      s_orig_results)[0])

    report = EvalReport(rows)
    if args.report:
        report.write_csv(args.report)
    print(report.format_table())

    violations = []
    for row in report.rows:
        if row.score_drift is None:
            continue
        eps = epsilons.get(row.model_tag)
        technique = techniques.get(row.model_tag)
        if technique in ("t1", "t2") and row.score_drift != 0.0:
            violations.append(f"{row.model_tag}/{row.dataset_tag}: scores "
                              f"drifted by {row.score_drift!r}, contract is 0")
        if technique in ("t3", "t4") and eps is not None \
                and row.score_drift > eps:
            violations.append(f"{row.model_tag}/{row.dataset_tag}: score drift "
                              f"{row.score_drift!r} exceeds epsilon {eps!r}")
    if violations:
        for v in violations:
            print(f"invariant violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _cmd_render(args, parser) -> int:
    ds = gen_shapes(args.seed, args.n, args.split)
    if not 0 <= args.index < len(ds):
        parser.error(f"--index {args.index} out of range for n={args.n}")
    img = ds.images[args.index]
    if args.stickers:
        img = apply_stickers(img, default_sticker(), count=args.sticker_count,
                             seed=mix64(mix64(args.seed, TAG_STICKER),
                                        args.index))
    write_gray_png(img[0], args.out)
    print(f"saved {args.out}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camforge",
        description="Train, edit, explain and evaluate small CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the bench model on shape data")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--train-n", type=int, default=2000)
    p.add_argument("--val-n", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", help="plant an explanation in a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--technique", required=True,
                   choices=("t1", "t2", "t3", "t4"))
    p.add_argument("--target", help="target image PNG (t2)")
    p.add_argument("--sticker", help="sticker bitmap PNG (t4)")
    p.add_argument("--flat-value", type=float, default=None)
    p.add_argument("--fc-fill", type=float, default=None)
    p.add_argument("--image-scale", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--grad-gain", type=float, default=None)
    p.add_argument("--branch-scale", type=float, default=None)
    p.add_argument("--branch-seed", type=int, default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("explain", help="write a heatmap PNG for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="cls", default="argmax",
                   help="'argmax' or an explicit class index")
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true",
                   help="blend the heatmap in blue over the input")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("eval", help="metric table for edited models")
    p.add_argument("--original", required=True)
    p.add_argument("--attacked", required=True, nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-n", type=int, default=500)
    p.add_argument("--stickers", action="store_true",
                   help="add rows on sticker-pasted data")
    p.add_argument("--sticker-count", type=int, default=3)
    p.add_argument("--report", help="CSV output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render", help="write one dataset image as PNG")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--stickers", action="store_true")
    p.add_argument("--sticker-count", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (CamforgeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
