"""``orthoct`` command-line front end.

Exit status: 0 on success, 1 on domain errors (message on stderr), 2 on
argument errors. Data goes to files only; every command leaves a JSON record
of its effective configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import DatasetManifest, generate_phantom, load_projection, load_volume, save_projection, save_volume, split_dataset
from .geometry import Volume, forward_project

MANIFEST_NAME = "manifest.csv"
PNG_WINDOW = (-500.0, 800.0)


class CliError(Exception):
    pass


def window_to_uint8(hu: np.ndarray, window=PNG_WINDOW) -> np.ndarray:
    lo, hi = window
    return np.round(255.0 * np.clip((np.asarray(hu, np.float64) - lo) / (hi - lo), 0.0, 1.0)).astype(np.uint8)


def export_slices(vol: Volume, out_dir: Path) -> list[Path]:
    """Axial slices as 8-bit grayscale PNGs (rows follow y, columns follow x)."""
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    img = window_to_uint8(vol.values)
    for z in range(img.shape[2]):
        p = out_dir / f"slice_{z:03d}.png"
        Image.fromarray(np.ascontiguousarray(img[:, :, z].T)).save(p, optimize=False)
        paths.append(p)
    return paths


def _record(args, cfg: cfgmod.RunConfig, path: Path) -> None:
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    cfgmod.write_effective(cfg, path, {"command": args.command, "arguments": argv})


def _load_cfg(args) -> cfgmod.RunConfig:
    return cfgmod.load_run_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


# -- commands -----------------------------------------------------------------------


def cmd_phantom(args) -> None:
    cfg = _load_cfg(args)
    if args.count < 1:
        raise CliError("--count must be at least 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}") from exc
    spec = cfg.phantom
    dims = tuple(args.dims) if args.dims else spec.dims
    names = []
    for i in range(args.count):
        s = dataclasses.replace(spec, seed=args.seed + i, dims=dims)
        name = f"phantom_{i:04d}.vol"
        save_volume(generate_phantom(s), out / name)
        names.append(name)
    fraction = args.train_fraction if args.train_fraction is not None else cfg.train_fraction
    if args.count == 1:
        manifest = DatasetManifest([(names[0], "train")], args.seed)
    else:
        manifest = split_dataset(names, fraction, args.seed)
    manifest.save(out / MANIFEST_NAME)
    _record(args, cfg, out / "run_config.json")


def cmd_project(args) -> None:
    cfg = _load_cfg(args)
    vol = load_volume(_require(Path(args.volume), "volume"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.volume).stem
    for axis in ("AP", "LAT"):
        save_projection(forward_project(vol, axis), out / f"{stem}_{axis}.proj")
    _record(args, cfg, out / "run_config.json")


def _projections(args):
    ap = load_projection(_require(Path(args.ap), "AP projection"))
    lat = load_projection(_require(Path(args.lat), "LAT projection"))
    return ap, lat


def _write_volume(vol: Volume, args, cfg) -> None:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(vol, out)
    if getattr(args, "export_slices", None):
        export_slices(vol, Path(args.export_slices))
    _record(args, cfg, out.with_name(out.name + ".run.json"))


def cmd_reconstruct_init(args) -> None:
    from .pipeline import reconstruct_init

    cfg = _load_cfg(args)
    ap, lat = _projections(args)
    _write_volume(reconstruct_init(ap, lat), args, cfg)


def cmd_reconstruct(args) -> None:
    from .pipeline import reconstruct

    cfg = _load_cfg(args)
    ap, lat = _projections(args)
    coarse = _require(Path(args.coarse), "stage-1 checkpoint")
    refine = _require(Path(args.refine), "stage-2 checkpoint") if args.refine else None
    _write_volume(reconstruct(ap, lat, coarse, refine), args, cfg)


def _training_volumes(data_dir: Path) -> list[Volume]:
    manifest = DatasetManifest.load(_require(data_dir / MANIFEST_NAME, "dataset manifest"))
    if not manifest.train:
        raise CliError(f"{data_dir / MANIFEST_NAME} lists no training volumes")
    return [load_volume(data_dir / p) for p in manifest.train]


def cmd_train(args) -> None:
    from .pipeline import train_stage1, train_stage2

    cfg = _load_cfg(args)
    stage_cfg = cfg.stage1 if args.stage == 1 else cfg.stage2
    if args.epochs is not None:
        stage_cfg = dataclasses.replace(stage_cfg, epochs=args.epochs)
    if args.stage == 1:
        cfg = dataclasses.replace(cfg, stage1=stage_cfg)
    else:
        cfg = dataclasses.replace(cfg, stage2=stage_cfg)
    out = Path(args.out) if args.out else cfgmod.default_run_dir()
    resume = _require(Path(args.resume), "resume checkpoint") if args.resume else None
    if args.stage == 2:
        coarse = Path(args.coarse) if args.coarse else out / "stage1"
        _require(coarse / "manifest.json", "stage-1 checkpoint")
    volumes = _training_volumes(Path(args.data))
    out.mkdir(parents=True, exist_ok=True)
    _record(args, cfg, out / f"stage{args.stage}_config.json")
    if args.stage == 1:
        train_stage1(volumes, stage_cfg, out, resume=resume, verbose=args.verbose)
    else:
        train_stage2(volumes, coarse, stage_cfg, out, resume=resume, verbose=args.verbose)


def cmd_evaluate(args) -> None:
    from .losses import default_extractor
    from .metrics import evaluate

    cfg = _load_cfg(args)
    pred_dir = _require(Path(args.pred), "prediction directory")
    gt_dir = _require(Path(args.gt), "reference directory")
    pred = {p.name: p for p in sorted(pred_dir.glob("*.vol"))}
    gt = {p.name: p for p in sorted(gt_dir.glob("*.vol"))}
    unpaired = sorted(set(pred) ^ set(gt))
    if unpaired:
        raise CliError("unpaired volumes: " + ", ".join(unpaired))
    if not gt:
        raise CliError(f"no .vol files in {gt_dir}")
    report = evaluate(
        {k: load_volume(v) for k, v in pred.items()}, {k: load_volume(v) for k, v in gt.items()}, default_extractor()
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    _record(args, cfg, out.with_name(out.name + ".run.json"))


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orthoct", description="CT reconstruction from two orthogonal projections.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key config override")
        sp.set_defaults(func=func)
        return sp

    sp = add("phantom", cmd_phantom, "generate synthetic phantoms and a split manifest")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dims", type=int, nargs=3)
    sp.add_argument("--train-fraction", type=float)
    sp.add_argument("--out", required=True)

    sp = add("project", cmd_project, "write AP and LAT projections of a volume")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--out", required=True)

    for name, func, help_text in (
        ("reconstruct-init", cmd_reconstruct_init, "back-projection only (baseline)"),
        ("reconstruct", cmd_reconstruct, "full coarse-to-fine reconstruction"),
    ):
        sp = add(name, func, help_text)
        sp.add_argument("--ap", required=True)
        sp.add_argument("--lat", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--export-slices", metavar="DIR", help="also write windowed axial PNG slices")
        if name == "reconstruct":
            sp.add_argument("--coarse", required=True, help="stage-1 checkpoint directory")
            sp.add_argument("--refine", help="stage-2 checkpoint directory (omit for coarse only)")

    sp = add("train", cmd_train, "train stage 1 or stage 2")
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--data", required=True, help="directory holding volumes and manifest.csv")
    sp.add_argument("--out", help=f"run directory (default ${cfgmod.RUN_DIR_ENV} or ./runs)")
    sp.add_argument("--coarse", help="stage-1 checkpoint for stage 2 (default OUT/stage1)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--verbose", action="store_true")

    sp = add("evaluate", cmd_evaluate, "metric report for paired volume directories")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, cfgmod.ConfigKeyError, ValueError, OSError, RuntimeError) as exc:
        print(f"orthoct {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
