"""Command-line experiment runner.

Every subcommand reads a JSON config (``--config``), validates it against a
versioned schema, writes ``manifest.json`` before starting, then CSV/JSON
artifacts into ``--out``, and finalises the manifest.  Identical configs and
seeds give byte-identical CSVs regardless of ``--threads``.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis
from .head import DdpmTau, DpmSolver, GaussianMixture, run_head
from .loss import LossConfig, loss_exact
from .masking import ToyDataset, copy_dataset, random_dataset, uniform_dataset
from .models import LearnedCatModel, OptimizerConfig, OracleModel, TabularModel, train_model
from .sampler import SamplerConfig, generate
from .schedule import SCHEDULE_KINDS, MaskSchedule, weight

SCHEMA_VERSION = 1

_schedule = {"oneOf": [{"type": "string", "enum": list(SCHEDULE_KINDS)},
                       {"type": "object", "required": ["name"], "additionalProperties": False,
                        "properties": {"name": {"enum": list(SCHEDULE_KINDS)},
                                       "rate": {"type": "number", "exclusiveMinimum": 0}}}]}
_dataset = {"type": "object", "additionalProperties": False,
            "properties": {"path": {"type": "string"},
                           "builtin": {"enum": ["random", "copy", "uniform"]},
                           "N": {"type": "integer", "minimum": 1},
                           "V": {"type": "integer", "minimum": 2},
                           "num_classes": {"type": "integer", "minimum": 0},
                           "seed": {"type": "integer"},
                           "concentration": {"type": "number", "exclusiveMinimum": 0},
                           "flip": {"type": "number", "minimum": 0, "maximum": 1}}}
_model = {"oneOf": [{"const": "oracle"},
                    {"type": "object", "required": ["checkpoint"], "additionalProperties": False,
                     "properties": {"checkpoint": {"type": "string"}}}]}
_cfg = {"type": "object", "additionalProperties": False,
        "properties": {"mode": {"enum": ["none", "standard", "mask"]},
                       "scale": {"type": "number", "minimum": 0},
                       "schedule": {"enum": ["constant", "linear"]},
                       "t_min": {"type": "number", "minimum": 0, "maximum": 1},
                       "t_max": {"type": "number", "minimum": 0, "maximum": 1}}}
_sampler = {"type": "object", "additionalProperties": False,
            "properties": {"steps": {"type": "integer", "minimum": 1}, "schedule": _schedule,
                           "unmask_rule": {"enum": ["stochastic", "topk", "one-at-a-time"]},
                           "cfg": _cfg, "seed": {"type": "integer"}}}
_loss = {"type": "object", "additionalProperties": False,
         "properties": {"schedule": _schedule, "weight": {"enum": ["constant", "mdm"]},
                        "t_min": {"type": "number", "minimum": 0, "maximum": 1},
                        "t_max": {"type": "number", "minimum": 0, "maximum": 1},
                        "masking": {"enum": ["independent", "fixed"]},
                        "mc_samples": {"type": "integer", "minimum": 1},
                        "quadrature_points": {"type": "integer", "minimum": 16}}}


def _schema(**props):
    return {"type": "object", "additionalProperties": False,
            "properties": {"schema_version": {"const": SCHEMA_VERSION}, **props}}


SCHEMAS = {
    "schedules": _schema(resolution={"type": "integer", "minimum": 2},
                         rate={"type": "number", "exclusiveMinimum": 0},
                         epsilon={"type": "number", "exclusiveMinimum": 0}),
    "simulate": _schema(schedules={"type": "array", "items": _schedule, "minItems": 1},
                        N={"type": "integer", "minimum": 1}, T={"type": "integer", "minimum": 1},
                        trials={"type": "integer", "minimum": 1}),
    "train": _schema(dataset=_dataset, loss=_loss,
                     model={"type": "object", "additionalProperties": False,
                            "properties": {"hidden": {"type": "integer", "minimum": 1},
                                           "init_scale": {"type": "number", "minimum": 0}}},
                     optimizer={"type": "object", "additionalProperties": False,
                                "properties": {"step_size": {"type": "number", "exclusiveMinimum": 0},
                                               "steps": {"type": "integer", "minimum": 0},
                                               "batch_size": {"type": "integer", "minimum": 1},
                                               "uncond_prob": {"type": "number", "minimum": 0, "maximum": 1},
                                               "uncond": {"enum": ["mask", "fake"]},
                                               "gradient": {"enum": ["mc", "exact"]},
                                               "decay": {"type": "number", "minimum": 0}}}),
    "generate": _schema(dataset=_dataset, model=_model, sampler=_sampler,
                        n_samples={"type": "integer", "minimum": 1},
                        **{"class": {"type": ["integer", "null"]}}),
    "eval": _schema(dataset=_dataset, samples={"type": "string"}, reference=_dataset,
                    **{"class": {"type": ["integer", "null"]}}),
    "sweep": _schema(dataset=_dataset, model=_model, sampler=_sampler,
                     n_samples={"type": "integer", "minimum": 1},
                     t_mins={"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                     t_maxs={"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}}),
    "equivalence": _schema(sizes={"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                                              "minItems": 2, "maxItems": 2}},
                           n_random={"type": "integer", "minimum": 0}),
    "head": _schema(mixture={"type": "object"}, n_samples={"type": "integer", "minimum": 1},
                    samplers={"type": "array", "items": {"type": "object"}}),
}

DEFAULTS = {
    "schedules": {"resolution": 101, "rate": 5.0, "epsilon": 1e-8},
    "simulate": {"schedules": ["linear", "cosine", "exp"], "N": 256, "T": 16, "trials": 10000},
    "train": {"dataset": {"builtin": "copy", "N": 2, "V": 2},
              "loss": {"schedule": "exp", "weight": "constant", "t_min": 0.2, "t_max": 1.0},
              "model": {"hidden": 32, "init_scale": 0.5},
              "optimizer": {"step_size": 0.02, "steps": 500, "batch_size": 32}},
    "generate": {"dataset": {"builtin": "random", "N": 3, "V": 2}, "model": "oracle",
                 "sampler": {}, "n_samples": 10000, "class": None},
    "eval": {"dataset": {"builtin": "random", "N": 3, "V": 2}, "class": None},
    "sweep": {"dataset": {"builtin": "copy", "N": 4, "V": 3, "num_classes": 2}, "model": "oracle",
              "sampler": {"steps": 16, "cfg": {"mode": "mask", "scale": 2.0}}, "n_samples": 4000,
              "t_mins": [0.0, 0.1, 0.2, 0.3, 0.5], "t_maxs": [0.3, 0.5, 0.7, 1.0]},
    "equivalence": {"sizes": [[1, 2], [2, 2], [3, 2], [4, 2], [1, 3], [2, 3], [3, 3], [4, 3]],
                    "n_random": 20},
    "head": {"mixture": {"weights": [0.3, 0.5, 0.2], "means": [[-2.0], [0.5], [3.0]],
                         "vars": [[0.09], [0.25], [0.04]]},
             "n_samples": 20000,
             "samplers": [{"kind": "ddpm", "tau": 1.0, "steps": 100},
                          {"kind": "dpm", "order": 1, "steps": 10},
                          {"kind": "dpm", "order": 2, "steps": 10}]},
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("; ".join(problems))


def validate(command: str, config: dict):
    validator = jsonschema.Draft7Validator(SCHEMAS[command])
    problems = sorted(f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
                      for e in validator.iter_errors(config))
    if problems:
        raise ConfigError(problems)


def load_dataset(spec: dict, base: Path = Path(".")) -> ToyDataset:
    if "path" in spec:
        return ToyDataset.load(base / spec["path"])
    kind = spec.get("builtin", "random")
    n, v, c = spec.get("N", 3), spec.get("V", 2), spec.get("num_classes", 0)
    if kind == "uniform":
        return uniform_dataset(n, v)
    if kind == "copy":
        return copy_dataset(n, v, spec.get("flip", 0.1), c)
    return random_dataset(n, v, c, spec.get("concentration", 0.3), spec.get("seed", 0))


def load_model(spec, dataset: ToyDataset, base: Path = Path(".")):
    if spec == "oracle":
        return OracleModel(dataset)
    return LearnedCatModel.load(base / spec["checkpoint"])


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# Subcommands ---------------------------------------------------------------


def cmd_schedules(cfg, seed, out: Path, threads):
    t = np.linspace(0.0, 1.0, cfg["resolution"])
    header, cols = ["t"], [t]
    for kind in SCHEDULE_KINDS:
        sched = MaskSchedule(kind, cfg["rate"])
        name = kind.replace("-", "_")
        header += [f"{name}_gamma", f"{name}_gamma_prime", f"{name}_weight"]
        cols += [sched.gamma(t), sched.gamma_prime(t), weight("mdm", sched, t, cfg["epsilon"])]
    analysis.write_csv(out / "schedules.csv", header, np.column_stack(cols).tolist())
    return {"rows": len(t)}, ["schedules.csv"]


def cmd_simulate(cfg, seed, out: Path, threads):
    files, results = [], {}
    for spec in cfg["schedules"]:
        sched = MaskSchedule.from_config(spec)
        prof = analysis.simulate_unmask_counts(sched, cfg["N"], cfg["T"], cfg["trials"], seed, threads)
        name = f"step_profile_{sched.kind.replace('-', '_')}.csv"
        prof.write_csv(out / name)
        files.append(name)
        results[sched.kind] = {"mean_total": float(prof.mean.sum())}
    return results, files


def cmd_train(cfg, seed, out: Path, threads):
    data = load_dataset(cfg["dataset"])
    loss_cfg = LossConfig.from_dict(cfg["loss"])
    mcfg = cfg.get("model", {})
    model = LearnedCatModel.init(data.num_positions, data.vocab_size, data.num_classes,
                                 mcfg.get("hidden", 32), np.random.default_rng([seed, 1]),
                                 mcfg.get("init_scale", 0.5))
    opt = OptimizerConfig(**{**cfg.get("optimizer", {}), "seed": seed})
    result = train_model(model, data, loss_cfg, opt)
    result.model.save(out / "checkpoint.json")
    analysis.write_csv(out / "loss_curve.csv", ["step", "loss"],
                       ((i + 1, v) for i, v in enumerate(result.losses)))
    oracle = loss_exact(OracleModel(data), data, loss_cfg)
    return ({"initial_exact": result.initial_exact, "final_exact": result.final_exact,
             "oracle_exact": oracle}, ["checkpoint.json", "loss_curve.csv"])


def _write_samples(path, samples):
    n = samples.shape[1]
    analysis.write_csv(path, [f"x{i}" for i in range(n)], samples.tolist())


def _read_samples(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)


def cmd_generate(cfg, seed, out: Path, threads):
    data = load_dataset(cfg["dataset"])
    model = load_model(cfg["model"], data)
    sampler = SamplerConfig.from_dict({**cfg["sampler"], "seed": seed})
    samples, trace = generate(model, cfg.get("class"), sampler, cfg["n_samples"], threads=threads)
    _write_samples(out / "samples.csv", samples)
    analysis.write_csv(out / "trace.csv",
                       ["step", "t", "s", "masked_before", "revealed", "cfg_applied", "nfe_cumulative"],
                       (list(r.values()) for r in trace.rows()))
    cls = cfg.get("class")
    tv = analysis.tv_distance(analysis.empirical_joint(samples, data.num_positions, data.vocab_size),
                              data.joint(cls if data.num_classes else None))
    return {"nfe": trace.nfe, "tv": tv}, ["samples.csv", "trace.csv"]


def cmd_eval(cfg, seed, out: Path, threads):
    data = load_dataset(cfg["dataset"])
    cls = cfg.get("class")
    target = data.joint(cls if data.num_classes else None)
    if "samples" in cfg:
        samples = _read_samples(cfg["samples"])
        other = analysis.empirical_joint(samples, data.num_positions, data.vocab_size)
        n = len(samples)
    elif "reference" in cfg:
        ref = load_dataset(cfg["reference"])
        other = ref.joint(cls if ref.num_classes else None)
        n = 0
    else:
        raise ConfigError(["<root>: eval needs either 'samples' or 'reference'"])
    tv = analysis.tv_distance(other, target)
    analysis.write_csv(out / "eval.csv", ["metric", "value"], [("tv", tv), ("n_samples", n)])
    return {"tv": tv}, ["eval.csv"]


def cmd_sweep(cfg, seed, out: Path, threads):
    data = load_dataset(cfg["dataset"])
    model = load_model(cfg["model"], data)
    sampler = SamplerConfig.from_dict({**cfg["sampler"], "seed": seed})
    result = analysis.interval_sweep(model, data, sampler, cfg["t_mins"], cfg["t_maxs"],
                                     cfg["n_samples"], threads=threads)
    result.write_csv(out / "sweep.csv")
    return {"cells": len(result.rows)}, ["sweep.csv"]


def cmd_equivalence(cfg, seed, out: Path, threads):
    rng = np.random.default_rng(seed)
    datasets, models = {}, {}
    for n, v in cfg["sizes"]:
        key = f"N{n}V{v}"
        datasets[key] = random_dataset(n, v, seed=int(rng.integers(2 ** 31)))
        models[f"oracle-{key}"] = (OracleModel(datasets[key]), key)
    keys = list(datasets)
    for j in range(cfg["n_random"]):
        key = keys[j % len(keys)]
        d = datasets[key]
        models[f"tabular{j}-{key}"] = (TabularModel(d.num_positions, d.vocab_size, rng=rng), key)
    rows = analysis.equivalence_report(models, datasets)
    analysis.write_equivalence_csv(out / "equivalence.csv", rows)
    return {"max_rel_gap": max(r[3] for r in rows)}, ["equivalence.csv"]


def cmd_head(cfg, seed, out: Path, threads):
    gm = GaussianMixture.from_dict(cfg["mixture"])
    x1 = np.random.default_rng([seed, 0]).standard_normal((cfg["n_samples"], gm.dim))
    rows = []
    for k, spec in enumerate(cfg["samplers"]):
        if spec["kind"] == "ddpm":
            sampler = DdpmTau(spec.get("tau", 1.0), spec["steps"])
        else:
            sampler = DpmSolver(spec.get("order", 2), spec["steps"], spec.get("grid", "time"))
        x = run_head(gm, x1, sampler, np.random.default_rng([seed, k + 1]))
        label = "ddpm" if spec["kind"] == "ddpm" else f"dpm{sampler.order}"
        rows.append((label, sampler.steps, analysis.w1_empirical(x, gm)))
    analysis.write_csv(out / "head_w1.csv", ["sampler", "steps", "w1"], rows)
    return {"w1": {f"{r[0]}@{r[1]}": r[2] for r in rows}}, ["head_w1.csv"]


COMMANDS = {"schedules": cmd_schedules, "simulate": cmd_simulate, "train": cmd_train,
            "generate": cmd_generate, "eval": cmd_eval, "sweep": cmd_sweep,
            "equivalence": cmd_equivalence, "head": cmd_head}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config; keys override the defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("runs") / name)
        p.add_argument("--threads", type=int, default=1)
        if name == "simulate":
            p.add_argument("--trials", type=int)
    return parser


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    started = time.time()
    manifest = {"command": args.command, "seed": args.seed, "threads": args.threads,
                "git_describe": _git_describe(), "status": "running"}
    try:
        user = json.loads(args.config.read_text()) if args.config else {}
        if not isinstance(user, dict):
            raise ConfigError(["<root>: config must be a JSON object"])
        validate(args.command, user)
        config = _merge({"schema_version": SCHEMA_VERSION, **DEFAULTS[args.command]}, user)
        if args.command == "simulate" and args.trials is not None:
            config["trials"] = args.trials
        validate(args.command, config)
        manifest["config"] = config
        manifest_path.write_text(json.dumps(manifest, indent=2))
        results, files = COMMANDS[args.command](config, args.seed, out, args.threads)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        record = {"status": "error", "error": type(exc).__name__, "message": str(exc),
                  "problems": getattr(exc, "problems", [])}
        manifest.update(record, wall_time_s=time.time() - started)
        manifest_path.write_text(json.dumps(manifest, indent=2, default=str))
        (out / "error.json").write_text(json.dumps(record, indent=2))
        print(json.dumps(record), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    manifest.update(status="ok", results=results, outputs=[str(out / f) for f in files],
                    wall_time_s=time.time() - started)
    manifest_path.write_text(json.dumps(manifest, indent=2, default=float))
    print(json.dumps({"status": "ok", "out": str(out), "results": results}, default=float))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
