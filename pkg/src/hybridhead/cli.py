"""Command line: train, eval, analyze, cache, export.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numeric
failure (non-finite loss), 4 file errors (missing input, refused overwrite).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .cache import CostModel, cache_report, flops_estimate, reconciliation_table
from .checkpoint import Checkpoint, CheckpointError, load, save
from .config import ConfigError, ModelConfig, config_from_mapping, parse_text, preset
from .meta_tokens import precompute_init
from .model import build
from .numerics import ContractError, RngStream
from .runconfig import RunConfig
from .training import (
    EpisodeBatch,
    NeedleTask,
    TrainingDivergedError,
    encode,
    eval_kv_recall,
    eval_loss,
    eval_needle,
    kv_recall_episode,
    needle_grid,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class OutputExists(OSError):
    pass


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _claim(paths: list[Path], force: bool) -> None:
    taken = [str(p) for p in paths if p.exists()]
    if taken and not force:
        raise OutputExists(f"refusing to overwrite {', '.join(taken)} (use --force)")
    for p in paths:
        p.parent.mkdir(parents=True, exist_ok=True)


def _write(outputs: dict[Path, str | bytes], force: bool) -> None:
    _claim(list(outputs), force)
    for p, data in outputs.items():
        if isinstance(data, bytes):
            p.write_bytes(data)
        else:
            p.write_text(data)


def _emit(text: str, out: str | None, force: bool) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        _write({Path(out): text}, force)


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# -- train ----------------------------------------------------------------------------


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return RunConfig.from_text(text, overrides)


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    out = Path(args.out)
    files = {name: out / name for name in ("checkpoint.bin", "loss.csv", "config.txt", "summary.json")}
    _claim(list(files.values()), args.force)
    model = build(run.model, seed=run.seed, dtype=run.dtype)
    if args.init_from:
        start = load(args.init_from).model
        if start.config != run.model:
            raise ConfigError(["--init-from checkpoint model config differs from the run config's model.* keys"])
        model.load_state_dict({k: v.astype(run.dtype) for k, v in start.state_dict().items()})
    sampler = run.task.sampler(run.train)
    before = eval_loss(model, sampler)

    def log(step, lr, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step} lr {lr:.3e} loss {loss:.4f}", file=sys.stderr)

    result = train(model, sampler, run.train.schedule(), seed=run.seed,
                   optimizer=run.train.optimizer(model.parameters()), callback=log)
    after = eval_loss(model, sampler)
    summary = {
        "steps": run.train.steps,
        "eval_loss_initial": before,
        "eval_loss_final": after,
        "loss_reduction": 1.0 - after / before,
        "fingerprint": model.fingerprint(),
        "num_parameters": model.num_parameters,
    }
    meta = {"steps": run.train.steps, "seed": run.seed}
    if args.init_from:
        meta["init_from"] = start.fingerprint()
    ckpt = Checkpoint(model, meta, precompute_init(model))
    save(files["checkpoint.bin"], ckpt)
    files["loss.csv"].write_text(result.trace_csv())
    files["config.txt"].write_text(run.to_text())
    files["summary.json"].write_text(_dump_json(summary))
    print(_dump_json(summary), end="")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model = load(args.checkpoint).model
    out = Path(args.out)
    if args.task == "kv_recall":
        rows = [(p, eval_kv_recall(model, p, args.seed, args.episodes, args.cached)) for p in _ints(args.pairs)]
        result = {"task": "kv_recall", "seed": args.seed, "cached": args.cached,
                  "results": [{"n_pairs": p, "accuracy": a} for p, a in rows]}
        table = _csv(["n_pairs", "accuracy"], rows)
    else:
        depths = tuple(_floats(args.depths))
        if args.lengths:
            grid = [NeedleTask(n, d) for n in _ints(args.lengths) for d in depths]
        else:
            grid = needle_grid(args.train_len, depths)
        cells = eval_needle(model, grid, args.seed, args.episodes, args.cached)
        result = {"task": "needle", "seed": args.seed, "cached": args.cached, "results": cells}
        table = _csv(["length", "depth", "accuracy"], [(c["length"], c["depth"], c["accuracy"]) for c in cells])
    _write({out / "eval.json": _dump_json(result), out / "eval.csv": table}, args.force)
    print(_dump_json(result), end="")
    return EXIT_OK


# -- analyze --------------------------------------------------------------------------


def _analysis_tokens(args) -> np.ndarray:
    if args.tokens:
        return np.array(_ints(args.tokens), dtype=np.int64)
    if args.input:
        return encode(Path(args.input).read_text())
    if args.text is not None:
        return encode(args.text)
    raise ConfigError("one of --text, --input or --tokens is required")


def _importance_eval(args):
    rng = RngStream(args.seed).child("importance")
    batch = EpisodeBatch([kv_recall_episode(rng, args.pairs) for _ in range(args.episodes)])
    return batch.accuracy


def cmd_analyze(args) -> int:
    model = load(args.checkpoint).model
    kinds = tuple(k for k in args.kinds.split(",") if k)
    bad = set(kinds) - {"attn", "ssm"}
    if bad:
        raise ConfigError(f"--kinds accepts attn,ssm; got {sorted(bad)}")
    which = args.which
    if which == "importance":
        sweep = analysis.importance_sweep(model, _importance_eval(args))
        result = {"which": which, "task": {"kind": "kv_recall", "n_pairs": args.pairs, "episodes": args.episodes,
                                           "seed": args.seed}, **sweep}
        rows = []
        for layer, row in enumerate(sweep["deltas"]):
            for col, v in zip(sweep["columns"], row):
                rows.append((layer, "", col, "accuracy_delta", "" if v is None else v))
    else:
        tokens = _analysis_tokens(args)
        report = analysis.build_report(model, tokens, kinds, limit=args.limit)
        result = {"which": which, "kinds": list(kinds), "length": report.length,
                  "meta_count": report.meta_count}
        if which == "maps":
            result.update(report.to_json())
            result["branch_rms"] = report.branch_rms
            rows = [(e.layer, e.head, e.kind, f"M[{i},{j}]", float(e.matrix[i, j]))
                    for e in report.maps for i in range(e.matrix.shape[0]) for j in range(i + 1)]
        elif which == "entropy":
            ent = analysis.entropy(report)
            result["entropy"] = ent
            rows = [(layer, "", kind, "entropy", v) for kind, vals in ent.items() for layer, v in enumerate(vals)]
            if args.compare:
                other = load(args.compare).model
                result["comparison"] = analysis.entropy_comparison(
                    report, analysis.build_report(other, tokens, kinds, limit=args.limit))
                rows += analysis.long_rows(result["comparison"])
        elif which == "erf":
            result["erf"] = analysis.erf_from_rows(report.last_rows(kinds))
            result["per_kind"] = {k: analysis.erf_from_rows(report.last_rows((k,)))
                                  for k in kinds if report.select((k,))}
            rows = [("", "", ",".join(kinds), "erf", result["erf"])]
            rows += [("", "", k, "erf", v) for k, v in result["per_kind"].items()]
        else:
            cats = analysis.categorize(report)
            result.update(cats)
            rows = analysis.long_rows(cats["per_map"])
            if args.compare:
                other = load(args.compare).model
                ref = analysis.categorize(analysis.build_report(other, tokens, kinds, limit=args.limit))
                result["comparison"] = {"mean_by_kind": ref["mean_by_kind"]}
    header = ["layer", "head", "kind", "metric", "value"]
    out = Path(args.out)
    _write({out / f"{which}.json": _dump_json(result), out / f"{which}.csv": _csv(header, rows)}, args.force)
    return EXIT_OK


# -- cache ----------------------------------------------------------------------------


def _model_config(args) -> ModelConfig:
    if args.config:
        values = parse_text(Path(args.config).read_text())
        base = preset(values.pop("preset")) if "preset" in values else None
        values = {k.removeprefix("model."): v for k, v in values.items()}
        return config_from_mapping(ModelConfig, values, base).validate()
    return preset(args.preset)


def cmd_cache(args) -> int:
    cfg = _model_config(args)
    cm = CostModel(seq_len=args.seq_len, bytes_per_element=args.bytes_per_element,
                   include_ssm_state=not args.no_ssm_state, include_conv_state=not args.no_conv_state)
    rep = cache_report(cfg, args.seq_len, cm)
    if cfg.use_ssm:
        rep["reconciliation"] = {"target_MB": args.target_mb,
                                 "rows": reconciliation_table(cfg, args.seq_len, args.target_mb)}
    if args.flops:
        rep["flops"] = flops_estimate(cfg, args.seq_len)
    _emit(_dump_json(rep), args.out, args.force)
    return EXIT_OK


# -- export ---------------------------------------------------------------------------


def parameter_stats(ckpt: Checkpoint) -> dict:
    model = ckpt.model
    params = []
    for name, t in model.named_parameters():
        a = t.data.astype(np.float64)
        params.append({"name": name, "shape": list(a.shape), "dtype": str(t.data.dtype),
                       "mean": float(a.mean()), "std": float(a.std()), "min": float(a.min()),
                       "max": float(a.max()), "l2": float(math.sqrt(float(np.sum(a * a))))})
    return {"config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in parse_text(model.config.to_text()).items()},
            "fingerprint": model.fingerprint(), "num_parameters": model.num_parameters,
            "metadata": ckpt.meta, "has_init": ckpt.init is not None, "parameters": params}


def cmd_export(args) -> int:
    _emit(_dump_json(parameter_stats(load(args.checkpoint))), args.out, args.force)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridhead", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", help="run config file (key = value)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--force", action="store_true", help="overwrite existing outputs")
    t.add_argument("--init-from", metavar="CHECKPOINT", help="start from these weights (e.g. fine-tuning)")
    t.add_argument("--log-every", type=int, default=0, help="print progress to stderr every N steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a synthetic task")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=["kv_recall", "needle"], required=True)
    e.add_argument("--pairs", default="1,2,4", help="kv-recall pair counts")
    e.add_argument("--train-len", type=int, default=256, help="needle grid base length")
    e.add_argument("--lengths", help="explicit needle lengths, overrides --train-len")
    e.add_argument("--depths", default="0,0.5,1")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--cached", action="store_true", help="decode through the inference cache")
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="attention/SSM map analysis")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--which", choices=["maps", "entropy", "erf", "categories", "importance"], required=True)
    src = a.add_mutually_exclusive_group()
    src.add_argument("--text", help="input text (BOS is prepended)")
    src.add_argument("--input", help="file with input text")
    src.add_argument("--tokens", help="comma-separated token ids, used verbatim")
    a.add_argument("--kinds", default="attn,ssm")
    a.add_argument("--limit", type=int, default=analysis.DEFAULT_LIMIT)
    a.add_argument("--compare", help="second checkpoint for entropy/categories comparisons")
    a.add_argument("--pairs", type=int, default=1, help="importance: kv-recall pairs")
    a.add_argument("--episodes", type=int, default=100, help="importance: episodes")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("cache", help="cache size report")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--preset", default="hybrid-1.5b")
    g.add_argument("--config", help="model config file (key = value, optional 'preset' key)")
    c.add_argument("--seq-len", type=int, default=8000)
    c.add_argument("--bytes-per-element", type=int, default=2)
    c.add_argument("--no-ssm-state", action="store_true")
    c.add_argument("--no-conv-state", action="store_true")
    c.add_argument("--target-mb", type=float, default=79.0, help="reference total for the reconciliation table")
    c.add_argument("--flops", action="store_true", help="include a MAC estimate")
    c.add_argument("--out", help="output file (stdout if omitted)")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_cache)

    x = sub.add_parser("export", help="parameter statistics as canonical JSON")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", help="output file (stdout if omitted)")
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

if __name__ == "__main__":
    sys.exit(main())
