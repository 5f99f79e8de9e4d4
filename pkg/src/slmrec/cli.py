"""Command-line pipeline: one binary, eight subcommands.

    prepare-data    ingest a TSV (or generate the synthetic corpus) and
                    write the split manifest + index maps
    pretrain-embed  train the small self-attention baseline, save its
                    item-embedding table and metrics
    train-teacher   train a full-depth decoder
    distill         train a student under the composite objective
                    (offline against a checkpoint, or online)
    prune-sweep     depth-retention experiments, writes sweep.csv
    evaluate        rank a checkpoint on the valid/test view
    verify-theory   numeric checks of the descent propositions
    report          consolidate run.json records into CSV tables

Exit codes: 0 ok, 1 usage/config, 2 data error, 3 training error.
SLMREC_THREADS caps BLAS kernel parallelism for reproducible timing.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3

log = logging.getLogger("slmrec")

_thread_limiter = None


def _configure_threads() -> None:
    global _thread_limiter
    requested = os.environ.get("SLMREC_THREADS")
    if not requested:
        return
    try:
        limit = int(requested)
    except ValueError:
        raise SystemExit(f"SLMREC_THREADS must be an integer, got {requested!r}")
    from threadpoolctl import threadpool_limits

    _thread_limiter = threadpool_limits(limits=limit)


# -- shared helpers -----------------------------------------------------------


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="KEY=VALUE", help="override a config key (repeatable)",
    )


def _build_cfg(args):
    from .config import build_config

    return build_config(args.config, args.overrides)


def _load_split(args, cfg):
    from .data import load_split

    data_dir = args.data if getattr(args, "data", None) else cfg["data.dir"]
    return load_split(data_dir)


def _metrics_json(report) -> dict:
    return report.to_dict()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _write_train_log(out: Path, history: list[dict]) -> None:
    from .training import LOG_COLUMNS

    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS))
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, 0.0) for k in LOG_COLUMNS})


def _load_embedding(path: str | Path) -> "object":
    from .checkpoint import load_checkpoint

    _, tensors = load_checkpoint(path)
    return tensors["id_embedding"]


def _timed_eval(model, split, which, settings, config_hash):
    from .metrics import evaluate_model

    t0 = time.perf_counter()
    report = evaluate_model(
        model, split, which, seed=settings.eval_seed,
        negatives=settings.eval_negatives, batch_size=settings.eval_batch_size,
        config_hash=config_hash,
    )
    return report, time.perf_counter() - t0


def _base_record(command, role, cfg, settings) -> dict:
    return {
        "command": command,
        "role": role,
        "config": {k: str(v) for k, v in cfg.as_dict().items()},
        "config_hash": cfg.hash(),
        "seed": settings.seed,
    }


def _pretrain_settings(cfg):
    from .training import TrainSettings

    return TrainSettings(
        max_steps=cfg["pretrain.steps"], lr=cfg["pretrain.lr"],
        batch_size=cfg["pretrain.batch_size"],
        warmup_steps=max(cfg["pretrain.steps"] // 10, 1),
        eval_steps=max(cfg["pretrain.steps"], 1), seed=cfg["train.seed"],
        eval_negatives=cfg["eval.negatives"], eval_seed=cfg["eval.seed"],
        eval_batch_size=cfg["eval.batch_size"],
    )


def _pretrain_table(cfg, split, seed):
    from .training import pretrain_id_embeddings

    table, _, _ = pretrain_id_embeddings(
        split, cfg["data.seq_len"], id_dim=cfg["model.id_dim"],
        n_layers=cfg["pretrain.layers"], heads=cfg["pretrain.heads"],
        settings=_pretrain_settings(cfg), seed=seed,
    )
    return table


# -- subcommands ---------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    from .data import (build_dataset, generate_synthetic, load_interactions,
                       save_split)
    from .errors import ConfigError

    if bool(args.input) == bool(args.synthetic is not None):
        raise ConfigError("provide exactly one of --input or --synthetic")

    if args.input:
        records = load_interactions(args.input)
    else:
        spec = {}
        for token in args.synthetic:
            if "=" not in token:
                raise ConfigError(f"--synthetic expects key=value tokens, got {token!r}")
            key, _, value = token.partition("=")
            spec[key] = value
        known = {"users": "n_users", "items": "n_items", "seed": "seed",
                 "min_len": "min_len", "max_len": "max_len"}
        kwargs = {}
        for key, value in spec.items():
            if key not in known:
                raise ConfigError(f"unknown synthetic parameter {key!r}")
            kwargs[known[key]] = int(value)
        records = generate_synthetic(**kwargs)

    split = build_dataset(records)
    out = Path(args.out)
    save_split(split, out)
    stats = split.stats()
    manifest_hash = hashlib.sha256((out / "manifest.tsv").read_bytes()).hexdigest()[:16]
    _write_json(out / "stats.json", {**stats, "manifest_sha256": manifest_hash})
    print(
        "prepared split: |U|={users} |V|={items} |E|={interactions} "
        "density={density:.6f} manifest={h}".format(**stats, h=manifest_hash)
    )
    return EXIT_OK


def cmd_pretrain_embed(args) -> int:
    from .checkpoint import save_checkpoint
    from .model import ModelConfig, parameter_count
    from .reporting import write_run_record
    from .training import TrainSettings, pretrain_id_embeddings

    t_start = time.perf_counter()
    cfg = _build_cfg(args)
    split = _load_split(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    settings = _pretrain_settings(cfg)
    table, valid, test = pretrain_id_embeddings(
        split, cfg["data.seq_len"], id_dim=cfg["model.id_dim"],
        n_layers=cfg["pretrain.layers"], heads=cfg["pretrain.heads"],
        settings=settings, seed=cfg["train.seed"],
    )
    save_checkpoint(out / "embed.ckpt",
                    {"id_dim": cfg["model.id_dim"], "n_items": split.n_items},
                    {"id_embedding": table})
    _write_json(out / "metrics_valid.json", _metrics_json(valid))
    _write_json(out / "metrics_test.json", _metrics_json(test))

    baseline_cfg = ModelConfig(
        n_items=split.n_items, n_layers=cfg["pretrain.layers"],
        hidden=cfg["model.id_dim"], heads=cfg["pretrain.heads"],
        id_dim=cfg["model.id_dim"], prefix_len=0, seq_len=cfg["data.seq_len"],
        freeze_id_embedding=False,
    )
    record = _base_record("pretrain-embed", "baseline", cfg, settings)
    record.update({
        "wall_time_s": time.perf_counter() - t_start,
        "params_total": parameter_count(baseline_cfg),
        "metrics_valid": _metrics_json(valid),
        "metrics_test": _metrics_json(test),
    })
    write_run_record(out, record)
    print(test.render_table())
    return EXIT_OK


def _train_plain(args, layers_key: str, role: str, ckpt_prefix: str) -> int:
    from .model import DecoderModel
    from .reporting import write_run_record
    from .training import train_model

    t_start = time.perf_counter()
    cfg = _build_cfg(args)
    split = _load_split(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.train_settings()

    if args.embed:
        table = _load_embedding(args.embed)
        pretrain_s = 0.0
    else:
        log.info("no --embed given; pretraining the embedding table inline")
        t0 = time.perf_counter()
        table = _pretrain_table(cfg, split, settings.seed)
        pretrain_s = time.perf_counter() - t0

    config = cfg.model_config(split.n_items, cfg[layers_key])
    model = DecoderModel.init(config, seed=settings.seed, id_embedding=table)
    result = train_model(model, split, settings, out_dir=out, ckpt_prefix=ckpt_prefix)
    _write_train_log(out, result.history)

    valid_report, _ = _timed_eval(model, split, "valid", settings, cfg.hash())
    test_report, infer_s = _timed_eval(model, split, "test", settings, cfg.hash())
    _write_json(out / "metrics_valid.json", _metrics_json(valid_report))
    _write_json(out / "metrics_test.json", _metrics_json(test_report))

    record = _base_record(f"train-{role}", role, cfg, settings)
    record.update({
        "wall_time_s": time.perf_counter() - t_start,
        "setup_s": result.setup_s + pretrain_s,
        "train_s": result.train_s,
        "eval_s": result.eval_s,
        "infer_s": infer_s,
        "avg_step_s": result.avg_step_s,
        "params_total": model.n_parameters(),
        "params_trainable": sum(p.data.size for p in model.trainable().values()),
        "best_step": result.best_step,
        "best_valid_mrr": result.best_valid_mrr,
        "metrics_valid": _metrics_json(valid_report),
        "metrics_test": _metrics_json(test_report),
    })
    write_run_record(out, record)
    print(test_report.render_table())
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    return _train_plain(args, "teacher.layers", "teacher", "teacher")


def cmd_distill(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .distill import distill_offline, distill_online
    from .errors import ConfigError
    from .model import DecoderModel, ModelConfig
    from .reporting import write_run_record

    t_start = time.perf_counter()
    cfg = _build_cfg(args)
    split = _load_split(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.train_settings()
    dcfg = cfg.distill_config()

    if dcfg.mode == "offline":
        if not args.teacher:
            raise ConfigError("offline distillation requires --teacher CHECKPOINT")
        raw_cfg, tensors = load_checkpoint(args.teacher)
        teacher_config = ModelConfig.from_dict(raw_cfg)
        model_tensors = {k: v for k, v in tensors.items() if not k.startswith("adapters.")}
        teacher = DecoderModel.from_tensors(teacher_config, model_tensors, trainable=False)
        student_config = teacher_config.with_layers(cfg["student.layers"])
        student, distiller, result = distill_offline(
            teacher, student_config, split, dcfg, settings, out_dir=out
        )
    else:
        if args.embed:
            table = _load_embedding(args.embed)
        else:
            log.info("online mode without --embed; pretraining the table inline")
            table = _pretrain_table(cfg, split, settings.seed)
        teacher_config = cfg.teacher_config(split.n_items)
        student_config = cfg.student_config(split.n_items)
        teacher, student, distiller, result = distill_online(
            teacher_config, student_config, split, dcfg, settings,
            out_dir=out, id_embedding=table,
        )
        save_checkpoint(out / "teacher_final.ckpt", teacher.config.to_dict(),
                        teacher.to_arrays())

    _write_train_log(out, result.history)
    valid_report, _ = _timed_eval(student, split, "valid", settings, cfg.hash())
    test_report, infer_s = _timed_eval(student, split, "test", settings, cfg.hash())
    _write_json(out / "metrics_valid.json", _metrics_json(valid_report))
    _write_json(out / "metrics_test.json", _metrics_json(test_report))

    n_total = student.n_parameters() + sum(t.data.size for t in distiller.adapters.values())
    n_trainable = sum(p.data.size for p in student.trainable().values()) + sum(
        t.data.size for t in distiller.adapters.values()
    )
    record = _base_record("distill", "student", cfg, settings)
    record.update({
        "wall_time_s": time.perf_counter() - t_start,
        "setup_s": result.setup_s,
        "train_s": result.train_s,
        "eval_s": result.eval_s,
        "infer_s": infer_s,
        "avg_step_s": result.avg_step_s,
        "params_total": n_total,
        "params_trainable": n_trainable,
        "best_step": result.best_step,
        "best_valid_mrr": result.best_valid_mrr,
        "metrics_valid": _metrics_json(valid_report),
        "metrics_test": _metrics_json(test_report),
    })
    write_run_record(out, record)
    print(test_report.render_table())
    return EXIT_OK


def cmd_prune_sweep(args) -> int:
    from .checkpoint import load_checkpoint
    from .errors import ConfigError
    from .model import DecoderModel, ModelConfig
    from .prune import SWEEP_COLUMNS, SweepSpec, run_sweep
    from .reporting import write_csv, write_run_record
    from .training import TrainSettings

    t_start = time.perf_counter()
    cfg = _build_cfg(args)
    split = _load_split(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.train_settings()

    layers = [int(x) for x in args.layers.split(",")]
    spec = SweepSpec(layers=layers, mode=args.mode, teacher_ckpt=args.teacher)

    teacher = None
    if spec.mode == "direct_inference":
        raw_cfg, tensors = load_checkpoint(spec.teacher_ckpt)
        model_tensors = {k: v for k, v in tensors.items() if not k.startswith("adapters.")}
        teacher = DecoderModel.from_tensors(ModelConfig.from_dict(raw_cfg),
                                            model_tensors, trainable=False)
        bad = [l for l in layers if l > teacher.config.n_layers]
        if bad:
            raise ConfigError(f"probe layers {bad} exceed model depth "
                              f"{teacher.config.n_layers}")

    pretrain_settings = TrainSettings(
        max_steps=cfg["pretrain.steps"], lr=cfg["pretrain.lr"],
        batch_size=cfg["pretrain.batch_size"],
        warmup_steps=max(cfg["pretrain.steps"] // 10, 1),
        eval_steps=max(cfg["pretrain.steps"], 1), seed=settings.seed,
        eval_negatives=settings.eval_negatives, eval_seed=settings.eval_seed,
        eval_batch_size=settings.eval_batch_size,
    )
    rows = run_sweep(
        spec, split, cfg.teacher_config(split.n_items), settings,
        pretrain_settings=pretrain_settings,
        pretrain_layers=cfg["pretrain.layers"], pretrain_heads=cfg["pretrain.heads"],
        teacher=teacher,
    )
    write_csv(out / "sweep.csv", rows, SWEEP_COLUMNS)

    record = _base_record("prune-sweep", "sweep", cfg, settings)
    record.update({"wall_time_s": time.perf_counter() - t_start, "mode": spec.mode,
                   "layers": layers})
    write_run_record(out, record)
    for row in rows:
        print(f"l={row['l']:<3} mode={row['mode']:<18} MRR={row['MRR']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate_model
    from .model import DecoderModel, ModelConfig

    cfg = _build_cfg(args)
    split = _load_split(args, cfg)
    raw_cfg, tensors = load_checkpoint(args.ckpt)
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("adapters.")}
    model = DecoderModel.from_tensors(ModelConfig.from_dict(raw_cfg),
                                      model_tensors, trainable=False)
    report = evaluate_model(
        model, split, args.view, seed=cfg["eval.seed"],
        negatives=cfg["eval.negatives"], batch_size=cfg["eval.batch_size"],
        layer=args.layer, config_hash=cfg.hash(),
    )
    print(report.render_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"metrics_{args.view}.json", report.to_dict())
    else:
        print(report.to_json())
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    from .reporting import write_csv
    from .theory import run_grid, run_prop1_trials

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    prop1 = run_prop1_trials(trials=args.trials, seed=args.seed)
    worst1 = max(r.max_abs_err for r in prop1)
    ok1 = all(r.passed for r in prop1)
    print(f"single-layer identity: {len(prop1)} trials, "
          f"max error {worst1:.3e}, {'pass' if ok1 else 'FAIL'}")

    depths = [int(x) for x in args.depths.split(",")]
    tokens = [int(x) for x in args.tokens.split(",")]
    dims = [int(x) for x in args.dims.split(",")]
    mus = [float(x) for x in args.mus.split(",")]
    rows = run_grid(depths, tokens, dims, mus, seed=args.seed)
    write_csv(out / "theory.csv", rows, ("K", "n_tok", "d", "mu", "max_err", "pass"))
    ok2 = all(r["pass"] for r in rows)
    worst2 = max(r["max_err"] for r in rows)
    print(f"stacked identity: {len(rows)} grid cells, "
          f"max error {worst2:.3e}, {'pass' if ok2 else 'FAIL'}")
    return EXIT_OK if ok1 and ok2 else EXIT_TRAINING


def cmd_report(args) -> int:
    from .reporting import (EFFICIENCY_COLUMNS, METRICS_COLUMNS, build_report,
                            write_csv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metric_rows, efficiency_rows = build_report(args.runs)
    write_csv(out / "report_metrics.csv", metric_rows, METRICS_COLUMNS)
    write_csv(out / "report_efficiency.csv", efficiency_rows, EFFICIENCY_COLUMNS)
    for row in efficiency_rows:
        print(
            f"{row['run']:<24} {row['role']:<10} params={row['params_total']} "
            f"step={row['avg_step_s']}"
        )
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slmrec",
        description="Desk-scale decoder recommender with block-wise distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="ingest or synthesize a corpus")
    p.add_argument("--input", help="interaction TSV")
    p.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                   help="generate a corpus, e.g. users=2000 items=500 seed=7")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("pretrain-embed", help="train the embedding baseline")
    p.add_argument("--data", help="split directory (default: config data.dir)")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain_embed)

    p = sub.add_parser("train-teacher", help="train a full-depth decoder")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--embed", help="embedding checkpoint from pretrain-embed")
    _add_config_args(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student under the composite objective")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--teacher", help="teacher checkpoint (offline mode)")
    p.add_argument("--embed", help="embedding checkpoint (online mode)")
    _add_config_args(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("prune-sweep", help="depth-retention experiments")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="truncated_training",
                   choices=["truncated_training", "direct_inference"])
    p.add_argument("--layers", default="1,2,4,8")
    p.add_argument("--teacher", help="checkpoint for direct_inference")
    _add_config_args(p)
    p.set_defaults(func=cmd_prune_sweep)

    p = sub.add_parser("evaluate", help="rank a checkpoint on a held-out view")
    p.add_argument("--data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--view", default="test", choices=["valid", "test"])
    p.add_argument("--layer", type=int, help="probe an intermediate layer")
    p.add_argument("--out")
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-theory", help="check the descent propositions")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--depths", default="1,2,4,8")
    p.add_argument("--tokens", default="2,8,16")
    p.add_argument("--dims", default="4,16")
    p.add_argument("--mus", default="0.1,0.5,1,2")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("report", help="consolidate run records")
    p.add_argument("runs", nargs="+", help="run directories containing run.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _configure_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    from .errors import (CheckpointError, ConfigError, DataError,
                         EvaluationError, TrainingError)

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
