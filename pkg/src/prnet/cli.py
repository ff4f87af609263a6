"""Command-line entry point: ``prnet {gen,train,eval,analyze,export,demo-degrade}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, PRNetError

log = logging.getLogger("prnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at byte offset {e.pos}") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _arch(path):
    from .detector import ArchConfig
    from .train import seed_override

    cfg = ArchConfig.from_dict(_read_json(path))
    return dataclasses.replace(cfg, seed=seed_override(cfg.seed))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    from .synth import DatasetSpec, gen_dataset
    from .train import seed_override

    spec = DatasetSpec.from_dict(_read_json(args.spec))
    spec = dataclasses.replace(spec, seed=seed_override(spec.seed))
    manifest = gen_dataset(spec, args.out, ppm=args.ppm)
    n_obj = sum(len(e["labels"]) for e in manifest["images"])
    print(f"wrote {len(manifest['images'])} image(s), {n_obj} object(s) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .detector import build_model
    from .synth import Dataset
    from .train import TrainConfig, seed_override, train_loop

    arch = _arch(args.model)
    tdict = _read_json(args.train) if args.train else {}
    if args.epochs is not None:
        tdict["epochs"] = args.epochs
    tcfg = TrainConfig.from_dict(tdict)
    tcfg = dataclasses.replace(tcfg, seed=seed_override(tcfg.seed))
    ds = Dataset(args.data)
    model = build_model(arch)
    res = train_loop(model, ds, tcfg, args.out)
    last = res.history[-1]
    print(f"trained {len(res.history)} epoch(s); final loss {last['loss']:.4f}; "
          f"best AP50 {res.best_ap50:.4f} at epoch {res.best_epoch}")
    print(f"checkpoints and history in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import summarize
    from .synth import Dataset
    from .tensorio import load_checkpoint
    from .train import TrainConfig, evaluate

    model, meta = load_checkpoint(args.ckpt)
    ds = Dataset(args.data)
    indices = ds.indices(args.split) if args.split != "all" else ds.indices()
    if not indices:
        raise ConfigError(f"dataset {args.data} has no '{args.split}' images")
    tcfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else TrainConfig()
    report = evaluate(model, ds, indices, tcfg)
    print(summarize(report))
    if args.json:
        _write_json(args.json, report)
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analyzer import depth_grid, format_csv, format_table, stage_grid, stats, sweep
    from .detector import build_model

    arch = _arch(args.model)
    if args.sweep:
        grid = stage_grid(arch) if args.sweep == "stages" else depth_grid(arch)
        rows = sweep(grid, args.input)
        print(format_table(rows, "config"))
    else:
        rows = stats(build_model(arch), args.input).rows
        print(format_table(rows, "path", total=True))
    if args.csv:
        Path(args.csv).write_text(format_csv(rows))
    return EXIT_OK


def _load_image(path) -> np.ndarray:
    from .synth import read_ppm
    from .tensorio import read_tensor

    p = Path(path)
    if p.suffix.lower() == ".ppm":
        return read_ppm(p)[None]
    arr = read_tensor(p)
    if arr.shape[1] != 3:
        raise ConfigError(f"{path}: expected a 3-channel image, got shape {arr.shape}")
    return arr[:1]


def cmd_export(args) -> int:
    from .detector import decode_predictions, forward
    from .metrics import heatmap_from_predictions, nms
    from .params import set_training
    from .synth import export_pgm
    from .tensor import Tensor, no_grad
    from .tensorio import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    set_training(model, False)
    img = _load_image(args.image)
    with no_grad():
        preds = forward(model, Tensor(img))
    hm = heatmap_from_predictions(preds, args.heatmap, img.shape[2])
    export_pgm(hm, args.out)
    dets = nms(decode_predictions(preds, args.conf, img.shape[2]), 0.6)
    print(f"heatmap {args.heatmap} -> {args.out}; {len(dets)} detection(s) above {args.conf}")
    if args.dets:
        _write_json(args.dets, [{"class": d.class_id, "score": d.score,
                                 "cx": d.box[0], "cy": d.box[1], "w": d.box[2], "h": d.box[3]} for d in dets])
    return EXIT_OK


def cmd_demo_degrade(args) -> int:
    """Block-average the image by 2, 4 and 8, upsample back and report the loss of detail."""
    from .synth import export_ppm

    img = _load_image(args.image)[0].astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, H, W = img.shape
    lines = ["factor,mae"]
    for f in (1, 2, 4, 8):
        if H % f or W % f:
            continue
        small = img.reshape(3, H // f, f, W // f, f).mean(axis=(2, 4))
        back = np.repeat(np.repeat(small, f, axis=1), f, axis=2)
        export_ppm(back, out / f"degrade_x{f}.ppm")
        lines.append(f"{f},{np.abs(back - img).mean():.6f}")
    (out / "degrade.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prnet", description="Small-object detection with progressive refinement necks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="dataset spec JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--ppm", action="store_true", help="also write PPM mirrors")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True)
    t.add_argument("--model", required=True, help="model config JSON")
    t.add_argument("--train", help="training config JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--json")
    e.add_argument("--split", default="val", choices=("train", "val", "all"))
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="parameter and MAC counts")
    a.add_argument("--model", required=True)
    a.add_argument("--input", type=int, default=256)
    a.add_argument("--sweep", choices=("stages", "depth"))
    a.add_argument("--csv")
    a.set_defaults(fn=cmd_analyze)

    x = sub.add_parser("export", help="write an objectness heatmap as PGM")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--image", required=True, help="PRNT or PPM image")
    x.add_argument("--heatmap", required=True, choices=("P2", "P3", "P4"))
    x.add_argument("--out", required=True)
    x.add_argument("--conf", type=float, default=0.25)
    x.add_argument("--dets", help="optional JSON file for detections")
    x.set_defaults(fn=cmd_export)

    d = sub.add_parser("demo-degrade", help="resolution-loss study on one image")
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_demo_degrade)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (PRNetError, OSError, ValueError, KeyError) as e:
        print(f"prnet {args.cmd}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
