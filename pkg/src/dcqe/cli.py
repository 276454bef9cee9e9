"""Command-line entry point: ``dcqe {train,cycle,experiment,toy,report}``."""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path


from . import __version__, harness, imageio
from .codec import encode_decode
from .config import ConfigError, OperatorSection, RunConfig, parse_config, resolve_paths
from .models import init_params
from .seeding import subseed
from .toy import ToyConfig, ToyDistribution, train_toy, write_toy_outputs
from .training import PatchSet, TrainConfig, train_loop

log = logging.getLogger("dcqe")

FILTER_ARGS = {"identity": (), "box": ("size",), "gaussian": ("sigma",),
               "unsharp": ("amount", "sigma"), "median": ()}


def build_operator(op: OperatorSection) -> harness.EnhanceOperator:
    if op.kind == "model":
        if not op.checkpoint:
            raise ConfigError("cycle.operators", f"operator {op.name!r} needs a checkpoint")
        return harness.EnhanceOperator.from_checkpoint(op.checkpoint, op.name)
    if op.kind == "external":
        if not op.command:
            raise ConfigError("cycle.operators", f"operator {op.name!r} needs a command")
        return harness.EnhanceOperator.external(op.name, op.command)
    if op.filter not in FILTER_ARGS:
        raise ConfigError("cycle.operators", f"unknown filter {op.filter!r}")
    return harness.EnhanceOperator.builtin(op.name, op.filter,
                                           **{k: getattr(op, k) for k in FILTER_ARGS[op.filter]})


def _image_files(paths) -> list[Path]:
    files: list[Path] = []
    for p in resolve_paths(paths):
        files.extend(sorted(p.glob("*.p[gp]m")) if p.is_dir() else [p])
    if not files:
        raise FileNotFoundError(f"no images found in {list(paths)}")
    return sorted(files, key=str)


def load_pairs(paths, quality: int, patch: int, stride: int) -> PatchSet:
    from .codec import CodecConfig

    cfg = CodecConfig(quality)
    comp, raw = [], []
    for f in _image_files(paths):
        img = imageio.load(f)
        comp += imageio.extract_patches(encode_decode(img, cfg), patch, stride)
        raw += imageio.extract_patches(img, patch, stride)
    return PatchSet(imageio.to_tensor(comp).data, imageio.to_tensor(raw).data)


# -- commands -----------------------------------------------------------------

def cmd_train(cfg: RunConfig, out: Path) -> None:
    tc = cfg.train_config()
    spec = cfg.model.spec()
    data = load_pairs(cfg.data.train, cfg.data.quality, tc.patch_size, cfg.data.patch_stride)
    monitor = load_pairs(cfg.data.test, cfg.data.quality, tc.patch_size, cfg.data.patch_stride)
    params = init_params(spec, subseed(cfg.seed, "init"))
    res = train_loop(params, spec, data, tc, cfg.weights, cfg.straightforward, out_dir=out, monitor=monitor)
    last = res.curve[-1]
    print(f"trained {res.iterations} iterations ({tc.mode}); final L_enh={last['L_enh']:.6f} "
          f"L_iden={last['L_iden']:.6f}; checkpoint {Path(cfg.out) / 'model.ckpt'}")


def cmd_cycle(cfg: RunConfig, out: Path) -> None:
    if not cfg.cycle.image:
        raise ConfigError("cycle.image", "no input image given (use --image)")
    ops = tuple(build_operator(o) for o in cfg.cycle.operators)
    spec = harness.CycleSpec(ops, cycles=cfg.cycle.cycles, case=cfg.cycle.case,
                             codecs=tuple(cfg.codec_pool()), seed=cfg.seed,
                             clamp_between_cycles=cfg.cycle.clamp_between_cycles,
                             quantize_between_cycles=cfg.cycle.quantize_between_cycles,
                             metrics=cfg.metrics)
    raw = imageio.load(resolve_paths([cfg.cycle.image])[0])
    rep = harness.run_cycles(raw, cfg.codec_pool()[0], spec)
    (out / "cycle_report.csv").write_text(harness.cycle_report_csv(rep))
    text = harness.cycle_report_csv(rep)
    print(text, end="")
    if rep.error:
        raise RuntimeError(rep.error)


def cmd_experiment(cfg: RunConfig, out: Path) -> None:
    ops = [build_operator(o) for o in cfg.cycle.operators]
    workers = cfg.workers or harness.default_workers()
    rep = harness.run_experiment(resolve_paths(cfg.data.test), ops, cfg.codec_pool(), case=cfg.cycle.case,
                                 cycles=cfg.cycle.cycles, metrics=cfg.metrics, seed=cfg.seed, workers=workers,
                                 clamp_between_cycles=cfg.cycle.clamp_between_cycles,
                                 quantize_between_cycles=cfg.cycle.quantize_between_cycles)
    harness.write_experiment(rep, out)
    table = harness.render_table(rep.summary)
    (out / "report.txt").write_text(table)
    print(table, end="")


def cmd_toy(cfg: RunConfig, out: Path) -> None:
    t = cfg.toy
    dist = ToyDistribution.ring(t.components, t.radius, t.std)
    tc = TrainConfig(learning_rate=t.learning_rate, batch_size=t.batch_size, iterations=t.iterations,
                     patch_size=1, seed=cfg.seed, distance=cfg.train.distance, mode="domain_consistent",
                     log_every=max(1, t.iterations // 10))
    res = train_toy(dist, ToyConfig(t.hidden, t.sigma_ratio, t.train_samples, t.eval_samples, tc), cfg.weights)
    write_toy_outputs(res, out)
    for k, v in res.diagnostics().items():
        print(f"{k}: {v:.6f}")


def cmd_report(cfg: RunConfig, out: Path) -> None:
    if not cfg.report.inputs:
        raise ConfigError("report.inputs", "no summary CSV given (use --input)")
    rows = []
    for p in cfg.report.inputs:
        rows += harness.read_summary(p)
    table = harness.render_table(rows, cfg.report.metric or None)
    (out / "report.txt").write_text(table)
    print(table, end="")


COMMAND_FUNCS = {"train": cmd_train, "cycle": cmd_cycle, "experiment": cmd_experiment,
                 "toy": cmd_toy, "report": cmd_report}


# -- argument handling --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--cycles", type=int)
    common.add_argument("--quality", type=int, help="codec quality (replaces the codec pool)")
    common.add_argument("--case", choices=harness.CASES)
    common.add_argument("--lambda-iden", type=float)
    common.add_argument("--lambda-idem", type=float)
    common.add_argument("--lambda-comp", type=float)
    common.add_argument("--a", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dcqe", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dcqe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train an enhancement model")
    p.add_argument("--mode", choices=("baseline", "straightforward", "domain_consistent"))
    p.add_argument("--iterations", type=int)
    sub.add_parser("cycle", parents=[common], help="multi-enhancement cycles on one image") \
        .add_argument("--image", help="input image (PGM/PPM)")
    p = sub.add_parser("experiment", parents=[common], help="multi-enhancement over a dataset")
    p.add_argument("--dataset", action="append", help="image directory or file (repeatable)")
    sub.add_parser("toy", parents=[common], help="2-D toy check of the training objectives")
    p = sub.add_parser("report", parents=[common], help="render DI tables from summary CSVs")
    p.add_argument("--input", action="append", help="summary.csv (repeatable)")
    p.add_argument("--metric")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    ov = {
        "command": args.command, "seed": args.seed, "workers": args.workers, "out": args.out,
        "cycle.cycles": args.cycles, "cycle.case": args.case,
        "weights.lambda_iden": args.lambda_iden, "weights.lambda_idem": args.lambda_idem,
        "weights.lambda_comp": args.lambda_comp, "weights.a": args.a,
    }
    if args.quality is not None:
        ov["codecs"] = [{"quality": args.quality}]
        ov["data.quality"] = args.quality
    for flag, key in (("mode", "train.mode"), ("iterations", "train.iterations"), ("image", "cycle.image"),
                      ("dataset", "data.test"), ("input", "report.inputs"), ("metric", "report.metric")):
        if getattr(args, flag, None) is not None:
            ov[key] = getattr(args, flag)
    return ov


def run(cfg: RunConfig) -> Path:
    """Execute ``cfg`` writing into a scratch directory that replaces
    ``cfg.out`` only once every artifact is written."""
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        (scratch / "config.json").write_text(cfg.to_json())
        (scratch / "seed.txt").write_text(f"{cfg.seed}\n")
        (scratch / "version.txt").write_text(f"dcqe {__version__}\n")
        COMMAND_FUNCS[cfg.command](cfg, scratch)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for item in scratch.iterdir():
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        os.replace(item, dest)
    scratch.rmdir()
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, overrides_from_args(args))
        run(cfg)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"dcqe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
