"""Command-line interface: preprocess, stats, params, train, enhance, eval.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure (NaN/Inf). Every subcommand is deterministic given --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from . import figures, metrics, stats, unet
from .autograd import Tensor, no_grad
from .errors import ConfigError, DataError, NumericError, RelightError
from .image import read_png, to_f32, to_u8, write_png
from .preproc import assemble_nine_channel, format_preproc, parse_preproc
from .train import PairedDataset, checkpoint_metadata, parse_train_config, train
from .unet import PRESETS, ModelConfig, build, count_params


class _Parser(argparse.ArgumentParser):
    # argparse defaults to exit code 2 on usage errors; this CLI reserves 2
    # for data errors, so usage problems exit 1
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="relight", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[], help="apply a frozen preprocessor to a folder")
    p.add_argument("input", help="folder of PNG images")
    p.add_argument("output", help="destination folder (created if missing)")
    p.add_argument("--preproc", required=True,
                   help="gamma:<g> | he | he:rgb | clahe:<clip>:<tiles> | ext:<path>")

    p = sub.add_parser("stats", help="distribution statistics for a folder")
    p.add_argument("folder")
    p.add_argument("--preproc", action="append", default=[],
                   help="variant(s) to measure; 'none' for the raw images (repeatable)")
    p.add_argument("--csv", help="write summary rows to this CSV")
    p.add_argument("--per-image", help="write per-image mu/sigma rows to this CSV "
                                       "(first variant only)")

    p = sub.add_parser("params", help="per-layer parameter table for a model config")
    p.add_argument("--config", required=True, help="tiny | mid | large | key=value file")
    p.add_argument("--fp16-size", action="store_true",
                   help="also print the exact fp16 checkpoint size in bytes")

    p = sub.add_parser("train", help="train the correction network")
    p.add_argument("--config", required=True, help="key=value training config file")
    p.add_argument("--data-root", help="override data_root from the config file")
    p.add_argument("--out-dir", help="override out_dir from the config file")
    p.add_argument("--model", default="tiny", help="tiny | mid | large (default tiny)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, fixed batch order (always on; flag kept for scripts)")
    p.add_argument("--no-plot", action="store_true", help="skip the loss-curve figure")

    p = sub.add_parser("enhance", help="run inference on a folder of PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--preproc1", help="must match the spec recorded in the checkpoint")
    p.add_argument("--preproc2", help="must match the spec recorded in the checkpoint")

    p = sub.add_parser("eval", help="PSNR/SSIM report for predictions vs ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", help="write the report to this CSV (plus a .png chart)")
    p.add_argument("--per-channel-ssim", action="store_true",
                   help="average SSIM over RGB channels instead of the luma plane")
    p.add_argument("--no-plot", action="store_true", help="skip the chart next to the CSV")
    return parser


def _require_folder(path: str) -> Path:
    folder = Path(path)
    if not folder.is_dir():
        raise ConfigError(f"not a folder: {folder}")
    return folder


def _cmd_preprocess(args) -> int:
    kind = parse_preproc(args.preproc)
    in_dir = _require_folder(args.input)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in stats.list_pngs(in_dir):
        img = to_f32(read_png(path))
        from .preproc import apply_preproc

        write_png(to_u8(apply_preproc(kind, img)), out_dir / path.name)
    return 0


def _cmd_stats(args) -> int:
    folder = _require_folder(args.folder)
    specs = args.preproc or ["none"]
    rows = []
    for spec in specs:
        kind = None if spec.lower() == "none" else parse_preproc(spec)
        s = stats.dataset_stats(folder, kind)
        rows.append((spec.lower(), s))
        print(f"{spec.lower():>16}  mu_bar={s.mu_bar:8.3f}  sigma_inter={s.sigma_inter:8.3f}  "
              f"sigma_bar={s.sigma_bar:8.3f}  sigma_intra={s.sigma_intra:8.3f}  n={s.n_images}")
    if args.csv:
        stats.write_stats_csv(rows, args.csv)
    if args.per_image:
        first = specs[0].lower()
        kind = None if first == "none" else parse_preproc(first)
        stats.write_per_image_csv(folder, kind, args.per_image)
    return 0


def _load_model_config(spec: str) -> ModelConfig:
    if spec.lower() in PRESETS:
        return PRESETS[spec.lower()]
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"unknown preset or missing config file: {spec}")
    values: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        try:
            values[key.strip()] = int(value.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return ModelConfig.from_dict(values)


def _cmd_params(args) -> int:
    config = _load_model_config(args.config)
    model = build(config, seed=0)
    rows, total = count_params(model)
    width = max(len(name) for name, _, _ in rows)
    for name, shape, size in rows:
        print(f"{name:<{width}}  {str(shape):<20} {size:>10,}")
    print(f"{'total':<{width}}  {'':<20} {total:>10,}")
    if args.fp16_size:
        print(f"fp16 checkpoint size: {ckpt.fp16_size(model):,} bytes")
    return 0


def _cmd_train(args) -> int:
    cfg, extras = parse_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    data_root = args.data_root or extras.get("data_root")
    out_dir = args.out_dir or extras.get("out_dir")
    if not data_root:
        raise ConfigError("no data_root: set it in the config file or pass --data-root")
    if not out_dir:
        raise ConfigError("no out_dir: set it in the config file or pass --out-dir")
    dataset = PairedDataset(data_root)
    model = build(unet.config_from_preset_or_dict(args.model), seed=cfg.seed)
    if cfg.epochs == 0:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt.save_checkpoint(model, Path(out_dir) / "model.dwun",
                             metadata=checkpoint_metadata(cfg, model))
        print(f"epochs=0: wrote initial checkpoint to {Path(out_dir) / 'model.dwun'}")
        return 0
    logs = train(cfg, dataset, model, out_dir=out_dir,
                 log_fn=lambda r: print(f"epoch {r.epoch:4d}  loss {r.loss:.6f}  "
                                        f"lr {r.lr:.3e}  {r.seconds:.1f}s"))
    if not args.no_plot:
        figures.save_training_curves(logs, Path(out_dir) / "loss_curve.png")
    print(f"finished {cfg.epochs} epochs; final checkpoint {Path(out_dir) / 'model.dwun'}")
    return 0


def _check_preproc_match(flag: Optional[str], recorded: Optional[str], slot: str) -> str:
    if recorded is None:
        if flag is None:
            raise ConfigError(f"checkpoint records no {slot} spec; pass --{slot}")
        return flag
    if flag is not None and format_preproc(parse_preproc(flag)) != recorded:
        raise ConfigError(
            f"{slot} mismatch: checkpoint was trained with {recorded!r}, "
            f"--{slot} says {flag!r}"
        )
    return recorded


def _cmd_enhance(args) -> int:
    model, metadata = ckpt.load_checkpoint(args.ckpt)
    spec1 = _check_preproc_match(args.preproc1, metadata.get("preproc1"), "preproc1")
    spec2 = _check_preproc_match(args.preproc2, metadata.get("preproc2"), "preproc2")
    p1 = parse_preproc(spec1)
    p2 = parse_preproc(spec2)
    in_dir = _require_folder(args.input)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.set_requires_grad(False)
    for path in stats.list_pngs(in_dir):
        low = to_f32(read_png(path))
        nine = assemble_nine_channel(low, p1, p2)
        with no_grad():
            out = unet.forward(model, Tensor(nine.to_chw()[None]),
                               residual_slot=nine.residual_source)
        enhanced = out.data[0].transpose(1, 2, 0)
        from .image import ImageF32

        write_png(to_u8(ImageF32(np.ascontiguousarray(enhanced))), out_dir / path.name)
    return 0


def _cmd_eval(args) -> int:
    report = metrics.evaluate_folder(_require_folder(args.pred), _require_folder(args.gt),
                                     per_channel_ssim=args.per_channel_ssim)
    for r in report.rows:
        print(f"{r.filename:>24}  psnr={metrics._fmt(r.psnr):>8}  ssim={r.ssim:.4f}")
    print(f"{'MEAN':>24}  psnr={metrics._fmt(report.mean_psnr):>8}  "
          f"ssim={report.mean_ssim:.4f}")
    if args.csv:
        metrics.write_report_csv(report, args.csv)
        if not args.no_plot:
            figures.save_metric_chart(report, Path(args.csv).with_suffix(".png"))
    return 0


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "stats": _cmd_stats,
    "params": _cmd_params,
    "train": _cmd_train,
    "enhance": _cmd_enhance,
    "eval": _cmd_eval,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"relight: config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"relight: numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"relight: data error: {exc}", file=sys.stderr)
        return 2
    except RelightError as exc:
        print(f"relight: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
