"""Command-line entry point wiring all modules together.

Subcommands: gen, train, eval, bench, cost, fit, sweep, score. Every run
writes a ``manifest.json`` into its output directory with the resolved
configuration, seeds, input digests, and timings — enough to reproduce the
run bit-identically.

Exit codes are a stable contract for CI: 0 success, 2 config/schema error,
3 numerical abort (non-finite values), 4 cache/checkpoint fingerprint
mismatch.

Randomness discipline: each run takes one ``--seed``; module-level streams
are derived as sha256(seed, stream-name), so adding a consumer never shifts
the draws of another.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, analysis
from .config import GeneratorConfig, ModelConfig
from .errors import (ConfigError, EmbeddingLookupError, NumericalError,
                     StaleCacheError, UndefinedMetricError)
from .inputs import Candidate, generate_dataset, load_dataset, save_dataset
from .model import (LongRecModel, OptConfig, SumPoolingModel, eval_metrics,
                    temporal_split, train)
from .serving import ScoreRequest, bench_serving, score_request

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_FINGERPRINT = 4


def seed_for(seed: int, stream: str) -> int:
    """Named substream of the run seed (documented splitting scheme)."""
    digest = hashlib.sha256(f"{seed}/{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, args: dict, resolved: dict,
                    outputs: dict, started: float) -> None:
    manifest = {
        "command": command,
        "args": args,
        "resolved_config": resolved,
        "outputs": outputs,
        "artifact_version": __version__,
        "started_unix": started,
        "wall_seconds": time.time() - started,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


def _model_config(args) -> ModelConfig:
    payload = _load_json(args.config) if args.config else {}
    cfg = ModelConfig.from_dict(payload)
    updates = {}
    if getattr(args, "seq_len", None):
        updates["L"] = args.seq_len
    if getattr(args, "k", None):
        updates["k"] = args.k
    if getattr(args, "query_strategy", None):
        strategy, count = _parse_strategy(args.query_strategy)
        updates["query_strategy"] = strategy
        if count is not None:
            updates["k"] = count
    if getattr(args, "lr", None):
        updates["lr"] = args.lr
    if updates:
        merged = cfg.to_dict()
        merged.update(updates)
        cfg = ModelConfig.from_dict(merged)
    return cfg


def _parse_strategy(text: str):
    """Accept names like 'recent' or 'recent100' (strategy plus query count)."""
    stem = text.rstrip("0123456789")
    digits = text[len(stem):]
    return stem, (int(digits) if digits else None)


# ----------------------------- subcommands -----------------------------


def cmd_gen(args) -> int:
    started = time.time()
    gen_cfg = GeneratorConfig.from_dict(_load_json(args.config))
    os.makedirs(args.out, exist_ok=True)
    dataset = generate_dataset(gen_cfg, seed_for(args.seed, "gen"))
    data_path = os.path.join(args.out, "dataset.jsonl" + (".gz" if args.gzip else ""))
    save_dataset(dataset, data_path)
    _write_manifest(args.out, "gen",
                    {"config": args.config, "seed": args.seed, "gzip": args.gzip},
                    gen_cfg.to_dict(),
                    {"dataset": data_path, "samples": len(dataset),
                     "dataset_sha256": _sha256_file(data_path)},
                    started)
    print(f"wrote {len(dataset)} samples to {data_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = _model_config(args)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    model = LongRecModel(cfg, seed=seed_for(args.seed, "model-init"))
    opt = OptConfig(seed=seed_for(args.seed, "shuffle"),
                    eval_fraction=args.eval_fraction)
    report = train(model, dataset, args.epochs, opt)
    report_path = os.path.join(args.out, "train_report.csv")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    model.save(ckpt_path)
    _write_manifest(args.out, "train",
                    {"config": args.config, "data": args.data, "seed": args.seed,
                     "epochs": args.epochs,
                     "data_sha256": _sha256_file(args.data)},
                    cfg.to_dict(),
                    {"report": report_path, "checkpoint": ckpt_path,
                     "final_auc": report.final.auc,
                     "final_logloss": report.final.logloss},
                    started)
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    model = LongRecModel.load(args.checkpoint)
    if args.config:
        want = ModelConfig.from_dict(_load_json(args.config))
        if want.to_dict() != model.cfg.to_dict():
            raise StaleCacheError("checkpoint config does not match --config")
    dataset = load_dataset(args.data)
    _, eval_idx = temporal_split(dataset.samples, args.eval_fraction)
    eval_samples = [dataset.samples[int(i)] for i in eval_idx] or dataset.samples
    rows = [("model",) + _finite_metrics(model, eval_samples)]
    if args.baseline == "sumpooling":
        base = SumPoolingModel(model.cfg, seed=seed_for(args.seed, "baseline-init"))
        opt = OptConfig(seed=seed_for(args.seed, "baseline-shuffle"),
                        eval_fraction=args.eval_fraction)
        train(base, dataset, args.epochs, opt)
        rows.append(("sumpooling",) + _finite_metrics(base, eval_samples))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "eval.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("model,auc,logloss\n")
        for name, a, ll in rows:
            fh.write(f"{name},{a!r},{ll!r}\n")
    _write_manifest(args.out, "eval",
                    {"checkpoint": args.checkpoint, "data": args.data,
                     "baseline": args.baseline, "seed": args.seed},
                    model.cfg.to_dict(),
                    {"eval": out_path, "rows": [list(r) for r in rows]},
                    started)
    for name, a, ll in rows:
        print(f"{name}: auc={a:.5f} logloss={ll:.5f}")
    return EXIT_OK


def _finite_metrics(model, samples):
    a, ll = eval_metrics(model, samples)
    if not (math.isfinite(ll) and (math.isfinite(a) or math.isnan(a))):
        raise NumericalError("non-finite evaluation metrics")
    if not math.isfinite(a):
        raise NumericalError("AUC could not be computed on the evaluation split")
    return a, ll


def cmd_bench(args) -> int:
    started = time.time()
    if args.checkpoint:
        model = LongRecModel.load(args.checkpoint)
    else:
        model = LongRecModel(_model_config(args),
                             seed=seed_for(args.seed, "model-init"))
    cfg = model.cfg
    gen_cfg = GeneratorConfig(n_users=args.users, vocab=cfg.vocab, L_max=cfg.L,
                              L_min=cfg.L, n_actions=cfg.n_actions,
                              n_profiles=cfg.n_profiles,
                              n_interests=min(8, cfg.vocab))
    users = generate_dataset(gen_cfg, seed_for(args.seed, "bench-users")).samples
    report = bench_serving(model, users, args.candidates, args.reps,
                           seed=seed_for(args.seed, "bench-candidates"),
                           use_cache=not args.no_cache)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "bench.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    _write_manifest(args.out, "bench",
                    {"users": args.users, "candidates": args.candidates,
                     "reps": args.reps, "no_cache": args.no_cache,
                     "seed": args.seed},
                    cfg.to_dict(), {"bench": out_path}, started)
    print(report.to_csv(), end="")
    if report.rows:
        r = report.rows[0]
        ratio = r.cached_muladds / r.naive_muladds
        print(f"cached/naive mul-adds: {ratio:.4f}")
    return EXIT_OK


def cmd_cost(args) -> int:
    report = analysis.cost_report(args.seq_len, args.width, args.merge,
                                  args.inner_layers)
    payload = report.to_dict()
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(f"{'quantity':<24}{'value':>20}")
        print("-" * 44)
        for key in ("flops_vanilla", "flops_merged", "flops_inner_trans",
                    "params_per_block", "params_merged_block"):
            print(f"{key:<24}{payload[key]:>20,}")
        pct = 100.0 * payload["reduction_ratio"]
        print(f"{'reduction':<24}{pct:>19.3f}%")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "cost.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_fit(args) -> int:
    xs, ys = [], []
    with open(args.csv, "r", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                continue  # header or junk line
            xs.append(x)
            ys.append(y)
    result = analysis.fit_power_law(xs, ys)
    payload = result.to_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "fit.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


_SWEEP_AXES = ("seq_len", "depth", "width", "flops")


def cmd_sweep(args) -> int:
    """Train one model per grid point, record metrics, fit the scaling curve."""
    started = time.time()
    sweep = _load_json(args.config)
    axis = sweep.get("axis")
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {_SWEEP_AXES}, got {axis!r}")
    grid = sweep.get("grid")
    if not isinstance(grid, list) or not grid:
        raise ConfigError("sweep config needs a non-empty 'grid' list")
    epochs = int(sweep.get("epochs", 2))
    base_model = sweep.get("model", {})
    gen_payload = sweep.get("generator")
    if gen_payload is None:
        raise ConfigError("sweep config needs a 'generator' object")
    gen_cfg = GeneratorConfig.from_dict(gen_payload)
    os.makedirs(args.out, exist_ok=True)
    dataset = generate_dataset(gen_cfg, seed_for(args.seed, "gen"))

    rows = []
    for value in grid:
        payload = dict(base_model)
        payload.update(_axis_update(axis, int(value), base_model))
        try:
            cfg = ModelConfig.from_dict(payload)
            model = LongRecModel(cfg, seed=seed_for(args.seed, "model-init"))
            opt = OptConfig(seed=seed_for(args.seed, "shuffle"))
            report = train(model, dataset, epochs, opt)
            x = _axis_x(axis, cfg)
            rows.append({"point": int(value), "x": x, "auc": report.final.auc,
                         "logloss": report.final.logloss, "status": "ok"})
        except (ConfigError, NumericalError, UndefinedMetricError) as exc:
            rows.append({"point": int(value), "x": float("nan"),
                         "auc": float("nan"), "logloss": float("nan"),
                         "status": f"failed: {exc}"})
        print(f"sweep point {value}: {rows[-1]['status']} "
              f"auc={rows[-1]['auc']}")

    points_path = os.path.join(args.out, "sweep.csv")
    with open(points_path, "w", encoding="utf-8") as fh:
        fh.write("point,x,auc,logloss,status\n")
        for r in rows:
            fh.write(f"{r['point']},{r['x']!r},{r['auc']!r},{r['logloss']!r},"
                     f"\"{r['status']}\"\n")

    ok = [r for r in rows if r["status"] == "ok" and math.isfinite(r["auc"])]
    fit_payload = None
    if len(ok) >= 4:
        fit = analysis.fit_power_law([r["x"] for r in ok], [r["auc"] for r in ok])
        fit_payload = fit.to_dict()
        with open(os.path.join(args.out, "fit.json"), "w", encoding="utf-8") as fh:
            json.dump(fit_payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"fit: alpha={fit.alpha:.6g} beta={fit.beta:.6g} "
              f"gamma={fit.gamma:.6g} r2={fit.r_squared:.6f}")
    else:
        print(f"only {len(ok)} usable grid points; need 4 to fit, emitting points only")

    _write_manifest(args.out, "sweep",
                    {"config": args.config, "seed": args.seed},
                    {"sweep": sweep, "generator": gen_cfg.to_dict()},
                    {"points": points_path, "rows": rows, "fit": fit_payload},
                    started)
    return EXIT_OK


def _axis_update(axis: str, value: int, base: dict) -> dict:
    if axis == "seq_len":
        K = int(base.get("K", ModelConfig().K))
        out = {"L": value}
        k = base.get("k")
        if k is None or int(k) > value // K:
            out["k"] = max(1, value // K)
        return out
    if axis in ("depth", "flops"):
        return {"N": value}
    if axis == "width":
        return {"d": value, "d_item": value}
    raise ConfigError(f"unhandled axis {axis}")


def _axis_x(axis: str, cfg: ModelConfig) -> float:
    if axis == "seq_len":
        return float(cfg.L)
    if axis == "depth":
        return float(cfg.N)
    if axis == "width":
        return float(cfg.D)
    # flops axis: analytic per-pass cost of the attention stack
    per_layer = analysis.flops_merged(cfg.L_padded, cfg.d, cfg.K)
    return float((cfg.N + 1) * per_layer)


def cmd_score(args) -> int:
    started = time.time()
    model = LongRecModel.load(args.checkpoint)
    dataset = load_dataset(args.data)
    store = {s.user_features.uid: s for s in dataset.samples}
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "responses.jsonl")
    n = 0
    with open(args.requests, "r", encoding="utf-8") as fin, \
            open(out_path, "w", encoding="utf-8") as fout:
        for line in fin:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                request = ScoreRequest(
                    user_id=int(rec["user_id"]),
                    candidates=[Candidate(int(c["item_id"]), int(c["timestamp"]))
                                for c in rec["candidates"]])
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ConfigError(f"malformed score request: {exc}") from exc
            response = score_request(model, store, request)
            fout.write(json.dumps(response.to_json_dict(), separators=(",", ":")))
            fout.write("\n")
            n += 1
    _write_manifest(args.out, "score",
                    {"checkpoint": args.checkpoint, "data": args.data,
                     "requests": args.requests},
                    model.cfg.to_dict(),
                    {"responses": out_path, "count": n}, started)
    print(f"scored {n} requests -> {out_path}")
    return EXIT_OK


# ----------------------------- parser / dispatch -----------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longrec",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", required=True, help="GeneratorConfig JSON path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--gzip", action="store_true")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model on a JSONL dataset")
    t.add_argument("--config", help="ModelConfig JSON path (defaults apply)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-fraction", type=float, default=0.1)
    t.add_argument("--seq-len", type=int, help="override config L")
    t.add_argument("--k", type=int, help="override config k")
    t.add_argument("--lr", type=float, help="override config lr")
    t.add_argument("--query-strategy",
                   help="strategy name, optionally with a count: recent100")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="assert the checkpoint matches this config")
    e.add_argument("--baseline", choices=["sumpooling"],
                   help="also train and report the pooling baseline")
    e.add_argument("--epochs", type=int, default=2,
                   help="baseline training epochs")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--eval-fraction", type=float, default=0.1)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="KV-cache serving micro-benchmark")
    b.add_argument("--config", help="ModelConfig JSON path")
    b.add_argument("--checkpoint")
    b.add_argument("--users", type=int, default=8)
    b.add_argument("--candidates", type=int, default=100)
    b.add_argument("--reps", type=int, default=1)
    b.add_argument("--no-cache", action="store_true",
                   help="run both paths naively (ratio 1.0)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("cost", help="analytic FLOPs / parameter report")
    c.add_argument("--seq-len", type=int, required=True)
    c.add_argument("--width", type=int, required=True)
    c.add_argument("--merge", type=int, default=4, help="merge group size K")
    c.add_argument("--inner-layers", type=int, default=1)
    c.add_argument("--json", action="store_true")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_cost)

    f = sub.add_parser("fit", help="fit y = alpha*x^beta + gamma to CSV points")
    f.add_argument("--csv", required=True, help="two-column x,y file")
    f.add_argument("--out")
    f.set_defaults(fn=cmd_fit)

    s = sub.add_parser("sweep", help="scaling sweep: train per grid point and fit")
    s.add_argument("--config", required=True, help="sweep JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    sc = sub.add_parser("score", help="batch-score JSONL requests with a cache")
    sc.add_argument("--checkpoint", required=True)
    sc.add_argument("--data", required=True, help="user store (dataset JSONL)")
    sc.add_argument("--requests", required=True)
    sc.add_argument("--out", required=True)
    sc.set_defaults(fn=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, EmbeddingLookupError, UndefinedMetricError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StaleCacheError as exc:
        print(f"fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
