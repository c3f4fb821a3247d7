"""Command-line front end.

    oaareg register   [--config run.json] [--estimator fsr ...] [--output report.json]
    oaareg benchmark  [--config run.json] [--sweep-estimators fsr ransac] [--trials 10]
    oaareg make-scene --out-dir scene/ [--rng-seed 3 --overlap-fraction 0.5]

Every ``RunConfig`` field has a long flag named after its JSON key with
underscores turned into dashes; flags override the JSON file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from .errors import RegistrationError
from .pipeline import RunConfig, benchmark_failed, run_benchmark, run_register

log = logging.getLogger("oaareg")


def _flag_type(hint):
    """``(argparse kwargs)`` for a RunConfig annotation."""
    origin = typing.get_origin(hint)
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if origin is typing.Union and len(args) == 1:
        hint, origin = args[0], typing.get_origin(args[0])
    if hint is bool:
        return {"action": argparse.BooleanOptionalAction}
    if hint is list or origin is list:
        return {"nargs": "+", "type": _scalar}
    if hint in (int, float, str):
        return {"type": hint}
    return {"type": _scalar}


def _scalar(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig keys")
    hints = typing.get_type_hints(RunConfig)
    group = p.add_argument_group("run configuration (override --config)")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            default=argparse.SUPPRESS,
            help=f"default: {f.default!r}",
            **_flag_type(hints[f.name]),
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oaareg", description="Overlap-aware coarse-to-fine point cloud registration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="register one synthetic or loaded pair")
    _add_config_flags(reg)

    bench = sub.add_parser("benchmark", help="sweep noise x overlap x estimator and emit CSV")
    _add_config_flags(bench)
    bench.add_argument("--threads", type=int, default=None, help="worker threads (default: OAAREG_THREADS)")

    scene = sub.add_parser("make-scene", help="write a synthetic pair as PLY plus the true transform")
    _add_config_flags(scene)
    scene.add_argument("--out-dir", type=Path, required=True)
    scene.add_argument("--ascii", action="store_true", help="write ASCII instead of binary PLY")
    return parser


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    data = {}
    if getattr(ns, "config", None) is not None:
        with open(ns.config, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{ns.config}: top level must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    data = {k.replace("-", "_"): v for k, v in data.items()}
    data.update({k: v for k, v in vars(ns).items() if k in names})
    return RunConfig.from_dict(data)


def _cmd_register(cfg: RunConfig, ns) -> int:
    report = run_register(cfg)
    if not cfg.output:
        sys.stdout.write(report.to_json())
    return 0


def _cmd_benchmark(cfg: RunConfig, ns) -> int:
    text = run_benchmark(cfg, threads=ns.threads)
    if not cfg.benchmark_csv:
        sys.stdout.write(text)
    return 1 if benchmark_failed(text) else 0


def _cmd_make_scene(cfg: RunConfig, ns) -> int:
    from . import synth
    from .plyio import write_cloud, write_transform

    spec = cfg.scene_spec()
    source, target, truth = synth.generate_pair(spec)
    source, target = synth.simulate_descriptors(source, target, truth, spec)
    ns.out_dir.mkdir(parents=True, exist_ok=True)
    write_cloud(ns.out_dir / "source.ply", source, binary=not ns.ascii)
    write_cloud(ns.out_dir / "target.ply", target, binary=not ns.ascii)
    write_transform(ns.out_dir / "gt.txt", truth.transform)
    return 0


_COMMANDS = {"register": _cmd_register, "benchmark": _cmd_benchmark, "make-scene": _cmd_make_scene}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(ns)
        cfg.validate()
        return _COMMANDS[ns.command](cfg, ns)
    except (RegistrationError, ValueError, OSError) as exc:
        print(f"oaareg {ns.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
