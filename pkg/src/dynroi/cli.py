"""``dynroi`` command line: synth, train, eval, infer, checkgrad.

Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import data as D
from . import engine as E
from . import gradcheck
from .config import ConfigError, RunConfig, load_config
from .metrics import vertical_cdr
from .models import REFERENCE_PARAMS, build_model, preset_param_count
from .train import CheckpointError, NonFiniteLoss, evaluate, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("dynroi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_help() -> str:
    lines = ["config keys (key=value, one per line, '#' starts a comment):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name} = {f.default!r}")
    return "\n".join(lines)


def _model_from(cfg: RunConfig):
    return build_model(cfg.model, cfg.model_config(), seed=cfg.seed)


def _load_samples(cfg: RunConfig, root) -> list[D.Sample]:
    samples = D.load_dataset(root, cfg.frame)
    if not samples:
        raise FileNotFoundError(f"no samples under {root}")
    if cfg.clahe:
        samples = D.apply_clahe(samples, cfg.clahe_clip, cfg.clahe_tiles)
    return samples


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    if args.count <= 0:
        raise UsageError("count must be positive")
    samples = D.gen_synthetic(args.count, args.seed, args.size)
    out = D.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def param_report(kind: str, model) -> dict:
    report = {"param_count": E.param_count(model.param_shapes())}
    if kind == "twomodel":
        shapes = model.param_shapes()
        report["param_count_disc"] = E.param_count({k: v for k, v in shapes.items() if k.startswith("disc.")})
        report["param_count_cup"] = E.param_count({k: v for k, v in shapes.items() if k.startswith("cup.")})
    presets = {}
    for name, ref in REFERENCE_PARAMS.items():
        count = preset_param_count(name)
        presets[name] = {"param_count": count, "reference": ref, "ratio": count / ref,
                         "within_factor_3": 1 / 3 <= count / ref <= 3}
    report["full_size_presets"] = presets
    return report


def cmd_train(args) -> int:
    cfg = load_config(args.config, model=args.model, epochs=args.epochs, seed=args.seed)
    data_root = args.data or cfg.data
    out_root = args.out or cfg.out
    if not data_root or not out_root:
        raise UsageError("train needs --data and --out (or data=/out= in the config)")
    samples = _load_samples(cfg, data_root)
    if cfg.validation == "train":
        train_set, val_set = samples, samples
    else:
        train_set, val_set = D.split(samples, cfg.train_frac, cfg.seed)
    model = _model_from(cfg)
    out = _out_dir(out_root)

    def progress(row):
        print(f"epoch {row.epoch:4d} train {row.train_loss:.4f} val {row.val_loss:.4f} "
              f"dice disc {row.val_dice_disc:.4f} cup {row.val_dice_cup:.4f} "
              f"degenerate {row.degenerate_crops}", flush=True)

    t0 = time.perf_counter()
    history, best = train(model, train_set, val_set, cfg.train_config(), cfg.augment_config(), progress)
    wall = time.perf_counter() - t0
    save_checkpoint(best, out / "best.ckpt")
    (out / "history.csv").write_text(history.to_csv())
    (out / "config.txt").write_text(cfg.dumps())
    steps = cfg.epochs * len(train_set)
    summary = {
        "model": cfg.model,
        **param_report(cfg.model, model),
        "train_samples": len(train_set),
        "val_samples": len(val_set),
        "best_epoch": best.epoch,
        "best_val_loss": best.val_loss,
        "degenerate_crop_rate": sum(r.degenerate_crops for r in history.rows) / steps,
        "wall_time_sec": wall,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"param_count {summary['param_count']}")
    for name, p in summary["full_size_presets"].items():
        flag = "ok" if p["within_factor_3"] else "OUT OF RANGE"
        print(f"full-size {name:9s} param_count {p['param_count']:>10,d}  "
              f"reference {p['reference']:>12,.0f}  ratio {p['ratio']:.2f}  {flag}")
    print(f"best epoch {best.epoch} val_loss {best.val_loss:.6f}  "
          f"degenerate-crop rate {summary['degenerate_crop_rate']:.4f}  wall {wall:.1f}s")
    return EXIT_OK


def _restore(cfg: RunConfig, ckpt_path):
    model = _model_from(cfg)
    ckpt = load_checkpoint(ckpt_path)
    ckpt.apply_to(model)
    return model


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = _restore(cfg, args.ckpt)
    samples = _load_samples(cfg, args.data or cfg.data)
    report = evaluate(model, samples, cfg.metrics_config())
    out = Path(args.out)
    if out.suffix != ".csv":
        out = _out_dir(out) / "report.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    m = report.mean()
    print(f"disc dice {m.dice_disc:.4f} iou {m.iou_disc:.4f}")
    print(f"cup  dice {m.dice_cup:.4f} iou {m.iou_cup:.4f}")
    print(f"images/sec {report.images_per_sec:.2f}")
    print(f"report {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    model = _restore(cfg, args.ckpt)
    try:
        image = D.read_image(args.image, cfg.frame)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {args.image}: {exc}") from None
    if cfg.clahe:
        image = D.clahe(image, cfg.clahe_clip, cfg.clahe_tiles)
    pred = model.predict(image)
    out = _out_dir(args.out)
    D.save_mask(pred.disc_mask, out / "disc.png")
    D.save_mask(pred.cup_mask, out / "cup.png")
    try:
        cdr = vertical_cdr(pred.disc_mask, pred.cup_mask)
    except ValueError:
        cdr = float("nan")
    win = pred.window
    lines = []
    if win is not None:
        lines += [f"row0={win.row0}", f"col0={win.col0}", f"height={win.height}", f"width={win.width}"]
    lines += [f"degenerate={'true' if pred.degenerate else 'false'}", f"cdr={cdr!r}"]
    (out / "window.txt").write_text("\n".join(lines) + "\n")
    print(f"cdr {cdr:.4f}")
    if win is not None:
        print(f"window row0={win.row0} col0={win.col0} {win.height}x{win.width} "
              f"degenerate={'true' if pred.degenerate else 'false'}")
    return EXIT_OK


def cmd_checkgrad(args) -> int:
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=args.seed, trials=args.trials)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:32s} max_rel_err {r.max_rel_error:.3e}  trials {r.trials}")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s "
          f"(tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_VERIFY if failed else EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynroi", description="Optic disc/cup segmentation with dynamic RoI cropping.",
                epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic fundus dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model; writes best.ckpt, history.csv, summary.json",
                       epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--model", choices=["psbn", "wroim", "twomodel"], help="override the config's model")
    t.add_argument("--epochs", type=int, help="override the config's epochs")
    t.add_argument("--seed", type=int, help="override the config's seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-image dice/IoU/CDR report for a checkpoint")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True, help="report .csv path or output directory")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image; writes disc.png, cup.png, window.txt")
    i.add_argument("--config")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("checkgrad", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=20)
    g.set_defaults(func=cmd_checkgrad)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, CheckpointError, NonFiniteLoss, E.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
