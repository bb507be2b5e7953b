"""Command-line entry point: ``nncompress <command> --config cfg.json --out DIR``.

Every command writes ``DIR/report.json``; commands that produce a model also
write ``DIR/model.slim``.  Exit codes: 0 success, 1 usage or config error,
2 data or format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import CompressError, ConfigError, DataError, NumericError
from ..distill import generate_soft_targets
from ..nn.model import Model
from ..nn.train import train
from .config import ExperimentConfig, load_config
from .metrics import count_params, measure_inference
from .pipeline import DistillPass, PipelineSpec, make_report, run_pipeline
from .report import emit_report, format_table, load_report
from .serialize import load_model, save_model

log = logging.getLogger("nncompress")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_ranks(text: str) -> dict[int, int]:
    try:
        pairs = (item.split(":") for item in text.split(",") if item)
        return {int(i): int(k) for i, k in pairs}
    except ValueError as exc:
        raise ConfigError(f"--ranks expects 'layer:rank,...', got {text!r}") from exc


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _base_model(cfg: ExperimentConfig, data, model_path) -> Model:
    if model_path:
        return load_model(model_path).model
    log.info("no --model given; training the base model from the config")
    return train(cfg.build_model(data), data, cfg.train_config()).model


def _run_spec(args, cfg: ExperimentConfig, passes, model_path=None):
    train_data, test_data = cfg.load_data()
    base = _base_model(cfg, train_data, model_path)
    spec = PipelineSpec(passes, cfg.train_config())
    repeats = None if args.no_timing else cfg.timing.get("repeats", 3)
    result = run_pipeline(spec, base, train_data, test_data, timing_repeats=repeats)
    return result, base


def _finish(args, reports, model=None, mask=None, meta=None):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if model is not None:
        save_model(model, out / "model.slim", mask)
    emit_report(reports, out / "report.json", include_timing=not args.no_timing, meta=meta)
    print(format_table(reports))


def _self_timing(args, cfg, model, test_data):
    if args.no_timing:
        return None
    repeats = cfg.timing.get("repeats", 3)
    return {"data": test_data, "repeats": repeats,
            "baseline_seconds": measure_inference(model, test_data, repeats)}


def cmd_train(args):
    cfg = _load_cfg(args)
    train_data, test_data = cfg.load_data()
    result = train(cfg.build_model(train_data), train_data, cfg.train_config())
    nonzero = count_params(result.model).nonzero
    report = make_report("train", result.model, {}, nonzero, nonzero, test_data,
                         _self_timing(args, cfg, result.model, test_data), {"loss": result.losses})
    _finish(args, [report], result.model, meta={"command": "train", "seed": cfg.seed})


def cmd_prune(args):
    cfg = _load_cfg(args)
    opts = dict(cfg.prune)
    if args.sparsity is not None:
        opts["sparsity"] = args.sparsity
    if args.gradual is not None:
        opts["gradual"] = args.gradual
    opts.setdefault("steps", cfg.train_config().steps)
    spec = PipelineSpec.from_dicts([{"pass": "prune", **opts}], cfg.train_config())
    result, _ = _run_spec(args, cfg, spec.passes, args.model)
    _finish(args, result.reports, result.model, result.mask,
            meta={"command": "prune", "seed": cfg.seed})


def cmd_factorize(args):
    cfg = _load_cfg(args)
    opts = dict(cfg.factorize)
    if args.ranks:
        opts["ranks"] = _parse_ranks(args.ranks)
        opts.pop("energy", None)
    elif args.energy is not None:
        opts["energy"] = args.energy
        opts.pop("ranks", None)
    spec = PipelineSpec.from_dicts([{"pass": "lowrank", **opts}], cfg.train_config())
    result, _ = _run_spec(args, cfg, spec.passes, args.model)
    _finish(args, result.reports, result.model, meta={"command": "factorize", "seed": cfg.seed})


def cmd_distill(args):
    cfg = _load_cfg(args)
    opts = dict(cfg.distill)
    if args.temperature is not None:
        opts["temperature"] = args.temperature
    if args.soft_weight is not None:
        opts["soft_weight"] = args.soft_weight
    opts.setdefault("steps", cfg.train_config().steps)
    spec = PipelineSpec.from_dicts([{"pass": "distill", **opts}], cfg.train_config())
    p: DistillPass = spec.passes[0]
    train_data, _ = cfg.load_data()
    teacher = _base_model(cfg, train_data, args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    generate_soft_targets(teacher, train_data, p.temperature, out / "soft_targets.slmt")
    teacher_path = out / "teacher.slim"
    save_model(teacher, teacher_path)
    result, _ = _run_spec(args, cfg, spec.passes, teacher_path)
    _finish(args, result.reports, result.model, meta={"command": "distill", "seed": cfg.seed})


def cmd_pipeline(args):
    cfg = _load_cfg(args)
    if not cfg.pipeline:
        raise ConfigError("config has no 'pipeline' entry")
    spec = PipelineSpec.from_dicts(cfg.pipeline, cfg.train_config())
    result, _ = _run_spec(args, cfg, spec.passes, args.model)
    _finish(args, result.reports, result.model, result.mask,
            meta={"command": "pipeline", "seed": cfg.seed})


def cmd_eval(args):
    if not args.model:
        raise ConfigError("eval needs --model")
    cfg = _load_cfg(args)
    _, test_data = cfg.load_data()
    loaded = load_model(args.model)
    nonzero = count_params(loaded.model).nonzero
    report = make_report(Path(args.model).stem, loaded.model, loaded.mask, nonzero, nonzero,
                         test_data, _self_timing(args, cfg, loaded.model, test_data))
    _finish(args, [report], meta={"command": "eval", "seed": cfg.seed})


def cmd_report(args):
    if not args.inputs:
        raise ConfigError("report needs at least one --input report file")
    reports = []
    for path in args.inputs:
        reports.extend(load_report(path)[0])
    _finish(args, reports, meta={"command": "report", "inputs": [str(p) for p in args.inputs]})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nncompress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--no-timing", action="store_true",
                       help="omit wall-clock fields so reports are byte-reproducible")
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "train the configured model")
    p = add("prune", cmd_prune, "magnitude-prune a model")
    p.add_argument("--model", type=Path, help="SLIM model to prune (default: train one)")
    p.add_argument("--sparsity", type=float)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gradual", dest="gradual", action="store_true", default=None)
    g.add_argument("--one-shot", dest="gradual", action="store_false")
    p = add("factorize", cmd_factorize, "rewrite conv layers as rank-K V/H pairs")
    p.add_argument("--model", type=Path)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--energy", type=float)
    g.add_argument("--ranks", help="explicit ranks, e.g. '0:2,3:8'")
    p = add("distill", cmd_distill, "distill a teacher into a smaller student")
    p.add_argument("--model", type=Path, help="teacher SLIM model (default: train one)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--soft-weight", type=float)
    p = add("pipeline", cmd_pipeline, "run the configured sequence of passes")
    p.add_argument("--model", type=Path)
    p = add("eval", cmd_eval, "evaluate a saved model")
    p.add_argument("--model", type=Path)
    p = add("report", cmd_report, "merge report files and print a table")
    p.add_argument("--input", dest="inputs", type=Path, action="append")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CompressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
