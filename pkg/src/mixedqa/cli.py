"""Command-line entry point: ``mixedqa {gen-data,train,experiment,analyze,report}``.

Configuration is one JSON file with the sections ``gen`` (GenConfig keys),
``train`` (TrainConfig keys), ``experiment`` (seeds, alphas, objectives,
condition, jobs) plus optional ``data_dir`` and ``output_dir`` strings. Unknown
keys are rejected. Precedence: command-line flags, then the file, then defaults.
Each command writes the fully resolved configuration to ``config.json`` in its
output directory; rerunning with ``--config <out>/config.json`` reproduces the
outputs byte for byte.

When neither ``--out`` nor ``output_dir`` is given, outputs go under
``$MIXEDQA_OUTPUT_ROOT/<command>`` (default root: ``./mixedqa-runs``).

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import data as data_mod
from .evaluate import Measurement, analyze_predictive, report
from .experiment import (
    ConfigKeyError, ExperimentConfig, dump_json, load_config, load_measurements,
    run_experiment, summarize_experiment, write_reports,
)
from .model import InputError, load_params, save_params
from .objectives import Objective
from .training import DivergenceError, train, write_run

log = logging.getLogger("mixedqa")

OUTPUT_ROOT_ENV = "MIXEDQA_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def _resolve_out(args, config: ExperimentConfig | None, command: str) -> Path:
    if args.out:
        return Path(args.out)
    if config is not None and config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "mixedqa-runs")) / command


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _load_bundle(path) -> data_mod.DatasetBundle:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return data_mod.load(path)


def cmd_gen_data(args) -> int:
    config = _config(args)
    out = _resolve_out(args, config, "gen-data")
    bundle = data_mod.generate(config.gen)
    data_mod.check_invariants(bundle, config.train.max_span_len)
    digests = data_mod.save(bundle, out)
    dump_json({"gen_config": dataclasses.asdict(config.gen), "seed": config.gen.seed, "sha256": digests,
               "sizes": {k: len(v) for k, v in bundle.splits().items()}}, out / "manifest.json")
    dump_json(dataclasses.replace(config, output_dir=None).to_dict(), out / "config.json")
    log.info("wrote %s", out)
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    overrides = {}
    if args.objective is not None:
        try:
            overrides["objective"] = Objective.parse(args.objective)
        except ValueError as err:
            raise UsageError(str(err)) from None
    if args.alpha is not None:
        if args.alpha < 0:
            raise UsageError("--alpha must be non-negative")
        overrides["alpha"] = args.alpha
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = dataclasses.replace(config, train=dataclasses.replace(config.train, **overrides))
    data_dir = args.data or config.data_dir
    if not data_dir:
        raise UsageError("train needs --data or data_dir in the config")
    bundle = _load_bundle(data_dir)
    out = _resolve_out(args, config, "train")
    out.mkdir(parents=True, exist_ok=True)
    dump_json(dataclasses.replace(config, data_dir=str(data_dir), output_dir=None).to_dict(), out / "config.json")
    started = time.perf_counter()
    record, params = train(config.train, bundle)
    log.info("trained %s in %.1fs", config.train.objective.name, time.perf_counter() - started)
    write_run(record, out)
    save_params(params, out / "model.ckpt")
    return 0


def cmd_experiment(args) -> int:
    config = _config(args)
    out = _resolve_out(args, config, "experiment")
    if args.data or config.data_dir:
        bundle = _load_bundle(args.data or config.data_dir)
        config = dataclasses.replace(config, gen=bundle.gen_config)
    else:
        bundle = data_mod.generate(config.gen)
        data_mod.save(bundle, out / "data")
    config = dataclasses.replace(config, data_dir=None, output_dir=None)
    if args.jobs is not None:
        config = dataclasses.replace(config, experiment=dataclasses.replace(config.experiment, jobs=args.jobs))
    started = time.perf_counter()
    result = run_experiment(config, bundle, out)
    log.info("experiment finished in %.1fs with %d failed cells", time.perf_counter() - started,
             len(result.failures))
    print((out / "table1_fine_f1.txt").read_text(encoding="utf-8"), end="")
    return 3 if result.failures else 0


def cmd_analyze(args) -> int:
    params = load_params(args.checkpoint)
    bundle = _load_bundle(args.data)
    if params.config.vocab_size != bundle.gen_config.vocab_size:
        raise UsageError(f"checkpoint vocab_size {params.config.vocab_size} does not match "
                         f"the dataset's {bundle.gen_config.vocab_size}")
    max_span_len = 10
    if args.config:
        config = load_config(args.config)
        expected = config.train.model_config(bundle.gen_config.vocab_size)
        if expected != params.config:
            raise UsageError(f"checkpoint model config {params.config} does not match {expected}")
        max_span_len = config.train.max_span_len
    if args.max_span_len is not None:
        max_span_len = args.max_span_len
    out = _resolve_out(args, None, "analyze")
    res = analyze_predictive(params, bundle.coarse_train, max_span_len)
    ms = [Measurement("coarse_train", args.name, 0, k, getattr(res, k))
          for k in ("entropy", "xent_gold", "err2_gold", "passage_mrr")]
    text, _ = report(ms, ["entropy", "xent_gold", "err2_gold", "passage_mrr"], out, title="table3_predictive")
    dump_json({"checkpoint": str(args.checkpoint), "data": str(args.data), "name": args.name,
               "max_span_len": max_span_len}, out / "config.json")
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    src = Path(args.experiment_dir)
    if not (src / "measurements.json").is_file():
        raise UsageError(f"{src} has no measurements.json")
    ms = load_measurements(src)
    summary = json.loads((src / "summary.json").read_text(encoding="utf-8"))
    failures = json.loads((src / "failures.json").read_text(encoding="utf-8"))
    alphas = {k: {int(s): a for s, a in v.items()} for k, v in summary["selected_alpha"].items()}
    out = Path(args.out) if args.out else src
    write_reports(summarize_experiment(ms, alphas, failures), out)
    print((out / "table1_fine_f1.txt").read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixedqa", description=__doc__.split("\n\n")[0],
                                     epilog="Flags override config-file values, which override defaults.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every evaluation step")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset bundle")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--out")
    p.add_argument("--objective", help="supervised, mtl, mml, pd-xent (alias em) or pd-err2")
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="all objectives across seeds and the alpha grid")
    p.add_argument("--config")
    p.add_argument("--data", help="use this dataset instead of generating one")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, help="concurrent training cells")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("analyze", help="predictive-distribution analysis of one checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="check the checkpoint against this config's model settings")
    p.add_argument("--name", default="model", help="row label in the report")
    p.add_argument("--max-span-len", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="re-render the tables of a finished experiment")
    p.add_argument("experiment_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "experiment" else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigKeyError as err:
        print(f"mixedqa: config error: {err}", file=sys.stderr)
        return 2
    except (UsageError, InputError, data_mod.ConfigError, data_mod.DatasetParseError, FileNotFoundError) as err:
        print(f"mixedqa: error: {err}", file=sys.stderr)
        return 2
    except DivergenceError as err:
        print(f"mixedqa: training diverged at step {err.step}: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
