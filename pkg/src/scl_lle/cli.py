"""Command-line entry point: ``scl-lle <command> ...``.

Exit codes: 0 success, 1 per-item failures, 2 configuration/usage errors.
Flags override values from ``--config``; all randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, archive
from .ablation import ABLATION_SWITCHES, UnknownSwitchError, derive_config
from .data import DatasetError
from .enhancer import enhance, load_params
from .gradcheck import GradCheckConfig, gradient_check
from .imageio import IMAGE_SUFFIXES, gamma_darken, load_image, save_image
from .metrics import ReportError, eval_report
from .niqe import NiqeModel, fit_niqe
from .segmenter import CITYSCAPES_CLASSES, make_seg_backend
from .selftest import run_selftest
from .trainer import ConfigError, TrainConfig, train

log = logging.getLogger("scl_lle")

EXIT_OK, EXIT_ITEMS, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"


def _versions() -> dict:
    return {"scl_lle": __version__, "python": platform.python_version(),
            "torch": torch.__version__, "numpy": np.__version__}


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                   checkpoint: str | None = None, **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "checkpoint_sha256": archive.content_hash(checkpoint) if checkpoint else None,
        "started": _now(),
        "finished": None,
        "versions": _versions(),
        **extra,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def finish_manifest(path: Path, **extra) -> None:
    manifest = json.loads(path.read_text())
    manifest.update(extra, finished=_now())
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _resolve_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        base = TrainConfig.from_json(args.config).to_dict()
    overrides = {
        "seed": args.seed, "lr": args.lr, "max_epochs": args.epochs, "max_steps": args.max_steps,
        "batch_size": args.batch_size, "image_size": args.image_size,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out_dir)
    path = write_manifest(out, "train", config.to_dict(), config.seed, args.resume,
                          data_root=str(args.data_root), resume=args.resume)
    final = train(config, args.data_root, out, resume=args.resume)
    finish_manifest(path, final_checkpoint=str(final), final_sha256=archive.content_hash(final))
    print(final)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    switches = [s.strip() for s in args.switches.split(",") if s.strip()]
    try:
        derived = [(s, derive_config(base, s)) for s in switches]
    except UnknownSwitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.include_base:
        derived.insert(0, ("full", base.updated(tag=base.tag or "full")))
    root = Path(args.out_dir)
    top = write_manifest(root, "ablate", base.to_dict(), base.seed, switches=[n for n, _ in derived],
                         data_root=str(args.data_root))
    summary = {}
    for name, cfg in derived:
        out = root / name
        path = write_manifest(out, "ablate", cfg.to_dict(), cfg.seed, switch=name, data_root=str(args.data_root))
        final = train(cfg, args.data_root, out)
        finish_manifest(path, final_checkpoint=str(final))
        summary[name] = str(final)
        print(f"{name}: {final}")
    (root / "ablation_summary.json").write_text(json.dumps(summary, indent=2))
    finish_manifest(top, runs=summary)
    return EXIT_OK


def cmd_enhance(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out)
    params = load_params(args.ckpt)
    path = write_manifest(out_dir, "enhance", {"in": str(in_dir), "ckpt": str(args.ckpt)},
                          params.meta.get("seed"), args.ckpt)
    files = _images(in_dir)
    if not files:
        log.warning("no images found in %s", in_dir)
    failures = []
    for f in files:
        try:
            img = load_image(f)
            with torch.no_grad():
                out, _ = enhance(params, img)
            save_image(out.clamp(0, 1), out_dir / f"{f.stem}.png")
        except Exception as exc:
            log.error("%s: %s", f.name, exc)
            failures.append(f.name)
    finish_manifest(path, processed=len(files) - len(failures), failed=failures)
    return EXIT_ITEMS if failures else EXIT_OK


def cmd_darken(args) -> int:
    if args.gamma < 1:
        print(f"error: --gamma must be >= 1 (got {args.gamma})", file=sys.stderr)
        return EXIT_USAGE
    in_dir, out_dir = Path(args.in_dir), Path(args.out)
    path = write_manifest(out_dir, "darken", {"gamma": args.gamma, "in": str(in_dir)}, None)
    failures = []
    for f in _images(in_dir):
        try:
            dst = out_dir / f"{f.stem}.png"
            if args.gamma == 1 and f.suffix.lower() == ".png":
                shutil.copyfile(f, dst)  # identity: keep the exact bytes
            else:
                save_image(gamma_darken(load_image(f).double(), args.gamma), dst)
        except Exception as exc:
            log.error("%s: %s", f.name, exc)
            failures.append(f.name)
    finish_manifest(path, failed=failures)
    return EXIT_ITEMS if failures else EXIT_OK


def cmd_eval(args) -> int:
    metrics = [m for m in args.metrics.split(",") if m]
    out_dir = Path(args.out)
    path = write_manifest(out_dir, "eval", vars(args) | {"func": None}, args.seed)
    model = NiqeModel.load(args.niqe_model) if "niqe" in metrics and args.niqe_model else None
    seg = None
    if "miou" in metrics:
        seg = make_seg_backend(args.seg_backend, args.num_classes, seed=args.seed or 0, weights=args.seg_weights)
    report = eval_report(args.pred, args.ref, metrics, out_dir, labels_dir=args.labels, niqe_model=model,
                         seg_backend=seg, num_classes=args.num_classes)
    finish_manifest(path, mean=report["mean"])
    print(json.dumps(report["mean"]))
    return EXIT_OK


def cmd_fit_niqe(args) -> int:
    files = _images(Path(args.in_dir))
    if not files:
        print(f"error: no images in {args.in_dir}", file=sys.stderr)
        return EXIT_USAGE
    model = fit_niqe((load_image(f) for f in files), args.patch_size, args.sharpness)
    model.save(args.out)
    print(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check(GradCheckConfig(seed=args.seed or 0, check_params=not args.no_params))
    for name, entry in report["terms"].items():
        print(f"{name:6s} max_rel_dev={entry['max_deviation']:.3e} {'PASS' if entry['passed'] else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return EXIT_OK if report["passed"] else EXIT_ITEMS


def cmd_selftest(args) -> int:
    for k, v in _versions().items():
        print(f"{k} {v}")
    if args.check_archive:
        try:
            archive.load(args.check_archive)
        except archive.ArchiveError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ITEMS
        print(f"archive ok: {args.check_archive}")
    report = run_selftest(args.seed or 0, check_params=not args.quick)
    for name, entry in report["gradient_check"]["terms"].items():
        print(f"grad {name:6s} {'PASS' if entry['passed'] else 'FAIL'} ({entry['max_deviation']:.2e})")
    for name, ok in report["invariants"].items():
        if not name.endswith(".error"):
            print(f"invariant {name} {'PASS' if ok else 'FAIL'}")
    print("selftest", "PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_ITEMS


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror TrainConfig")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--image-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scl-lle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"scl-lle {__version__}")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an enhancer")
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="one training run per ablation switch")
    _train_flags(p)
    p.add_argument("--switches", required=True, help=f"comma list of {sorted(ABLATION_SWITCHES)}")
    p.add_argument("--include-base", action="store_true", help="also train the unmodified config as 'full'")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("enhance", help="enhance every image in a directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("darken", help="gamma-darken every image in a directory")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_darken)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--metrics", default="psnr,ssim")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--niqe-model")
    p.add_argument("--seg-backend", default="tinycnn", choices=["oracle", "tinycnn", "deeplab"])
    p.add_argument("--seg-weights")
    p.add_argument("--num-classes", type=int, default=CITYSCAPES_CLASSES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-niqe", help="fit a NIQE pristine model from a corpus")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=96)
    p.add_argument("--sharpness", type=float, default=0.75)
    p.set_defaults(func=cmd_fit_niqe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-params", action="store_true", help="skip the enhancer-parameter check")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="versions, gradient check and invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="skip the enhancer-parameter gradient check")
    p.add_argument("--check-archive", help="also validate this checkpoint/weights archive")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SCL_LLE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except archive.ArchiveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ITEMS


if __name__ == "__main__":
    sys.exit(main())
