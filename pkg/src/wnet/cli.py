"""Command-line entry point: ``wnet {synth,train,sr,eval,gradcheck}``.

Exit codes: 0 success, 1 runtime failure (one JSON line on stderr),
2 usage error (argparse prints the usage text).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _cmd_synth(args) -> int:
    from .data import write_dataset

    ids = write_dataset(args.out, args.count, args.size, args.scale, args.seed)
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import TrainConfig, train

    config = TrainConfig.from_file(args.config)
    result = train(config)
    last = result.log[-1] if result.log else None
    if last is not None:
        print(f"step {last['step']} total {last['total']:.6f}")
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def _cmd_sr(args) -> int:
    from . import checkpoint
    from .data import read_image, write_image

    model = checkpoint.load(args.ckpt)
    lr_size = model.config.lr_size
    img = read_image(args.inp, expected_shape=(lr_size, lr_size))
    out = model.infer(img[None].astype(model.dtype()))
    write_image(args.out, out["sr"][0])
    print(f"wrote {args.out} ({model.config.hr_size}x{model.config.hr_size})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .data import read_image
    from .metrics import psnr, ssim, write_report

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_files = sorted(gt_dir.glob("*.png"))
    if not gt_files:
        raise FileNotFoundError(f"no PNG images in {gt_dir}")
    rows = []
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        gt = read_image(gt_path).astype(np.float64)
        pred = read_image(pred_path, expected_shape=gt.shape[1:]).astype(np.float64)
        rows.append((gt_path.stem, psnr(pred, gt), ssim(pred, gt)))
    write_report(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check
    from .model import WNetConfig

    config = WNetConfig(hr_size=args.size, channels=8, ca_reduction=4, seed=args.seed)
    report = grad_check(config, seed=args.seed, h=args.h, tolerance=args.tolerance)
    print(report)
    ok = report.passed(args.tolerance)
    print("PASS" if ok else f"FAIL: max_rel_error >= {args.tolerance:g}")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wnet", description="W-Net face super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic face dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True, help="HR side length")
    p.add_argument("--scale", type=int, choices=(4, 8), default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train from a key/value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sr", help="super-resolve one LR image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM report for a prediction directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--size", type=int, choices=(16, 32), default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return EXIT_RUNTIME


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
