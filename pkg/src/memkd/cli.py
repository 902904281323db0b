"""Command-line entry point: ``memkd <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .config import RunConfig, load_config
from .errors import ConfigError, LabelError, MemkdError, RunError, TrainingDivergedError
from .metrics import evaluate
from .model import ModelBundle, load_model, param_count, predict_proba, save_model
from .report import build_report, load_runs, write_report
from .training import (
    METHODS,
    RunResult,
    aggregate,
    distill_student,
    dump_json,
    gradient_check_model,
    grid_search_beta,
    train_teacher,
    write_run,
)

logger = logging.getLogger("memkd")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_raw(cfg: RunConfig, data_flag: str | None) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    if data_flag or cfg.data.path:
        prefix = data_flag or cfg.data.path
        train_path, test_path = data_mod.split_paths(prefix)
        if not train_path.exists():
            raise UsageError(f"no training file {train_path}")
        return data_mod.load_split_pair(prefix)
    if cfg.data.synthetic is not None:
        s = cfg.data.synthetic
        return data_mod.make_synthetic(s.classes, s.train, s.test, s.length, s.noise, s.seed)
    raise UsageError("no data: pass --data PREFIX or set data.path / data.synthetic in the config")


def _pipeline(cfg: RunConfig) -> dict:
    return {"target_length": cfg.data.target_length, "znormalize": True,
            "val_fraction": cfg.data.val_fraction, "split_seed": cfg.data.split_seed}


def _prepare(cfg: RunConfig, data_flag: str | None):
    train_raw, test_raw = _load_raw(cfg, data_flag)
    train = data_mod.preprocess(train_raw, cfg.data.target_length)
    test = data_mod.preprocess(test_raw, cfg.data.target_length)
    fit_set, val = data_mod.split_train_val(train, cfg.data.val_fraction, cfg.data.split_seed)
    return fit_set, val, test


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    train, test = data_mod.make_synthetic(args.classes, args.train, args.test, args.length, args.noise, args.seed,
                                          name=Path(args.out).name)
    train_path, test_path = data_mod.split_paths(args.out)
    train_path.parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_ucr(train_path, train)
    data_mod.write_ucr(test_path, test)
    for split, ds, path in (("train", train, train_path), ("test", test, test_path)):
        counts = " ".join(f"{c}:{n}" for c, n in enumerate(ds.class_counts()))
        print(f"{split}: {len(ds)} samples -> {path}  per-class {counts}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    fit_set, val, test = _prepare(cfg, args.data)
    out = _out_dir(args.out)
    bundle, results = train_teacher(fit_set, val, cfg.teacher_train(), cfg.teacher.hidden, cfg.teacher.layers,
                                    test=test, metadata=_pipeline(cfg))
    model_path = out / f"{fit_set.name}__teacher.mkd"
    save_model(bundle, model_path)
    for r in results:
        write_run(out, r)
        if r.ok:
            flag = "  (selected)" if r.selected else ""
            print(f"seed {r.seed}: val AUC-PRC {r.val_metrics.auc_prc:.4f} best epoch {r.best_epoch}{flag}")
        else:
            print(f"seed {r.seed}: FAILED ({r.failure})")
    print(f"teacher: {param_count(bundle.config)} parameters -> {model_path}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg.kd.method
    if method not in METHODS:
        raise UsageError(f"unsupported method {method!r}; supported: {', '.join(METHODS)}")
    teacher = load_model(args.teacher)
    target = int(teacher.metadata.get("target_length", cfg.data.target_length))
    if target != cfg.data.target_length:
        logger.info("using the teacher's target length %d", target)
        cfg.data.target_length = target
    fit_set, val, test = _prepare(cfg, args.data)
    if fit_set.label_map != teacher.label_map:
        raise LabelError("data labels do not match the teacher's label map")
    out = _out_dir(args.out)
    tcfg = cfg.student_train(method)
    arch = {"hidden_dim": cfg.student.hidden, "num_layers": cfg.student.layers}

    grid_runs: list[RunResult] = []
    if method == "none":
        beta = 0.0
    elif cfg.beta_grid() is None:
        beta = float(cfg.kd.beta)
    else:
        beta, grid_runs = grid_search_beta(teacher, fit_set, val, tcfg, cfg.beta_grid(), **arch)
        for r in grid_runs:
            write_run(out, r)
            score = "FAILED" if not r.ok else f"{r.val_metrics.auc_prc:.4f}"
            print(f"grid beta={r.beta:g}: val AUC-PRC {score}")
        print(f"selected beta={beta:g}")

    runs, best = [], None
    for seed in tcfg.run_seeds():
        try:
            bundle, result = distill_student(teacher, fit_set, val, tcfg, beta, seed, test=test, **arch)
        except TrainingDivergedError as exc:
            bundle, result = None, RunResult("student", method, beta, seed, fit_set.name, failure=str(exc))
        runs.append(result)
        write_run(out, result)
        if bundle is not None and (best is None or result.val_metrics.auc_prc > best[1].val_metrics.auc_prc):
            best = (bundle, result)
        if result.ok:
            print(f"seed {seed}: test AUC-PRC {result.test_metrics.auc_prc:.4f} accuracy {result.test_metrics.accuracy:.4f}")
        else:
            print(f"seed {seed}: FAILED ({result.failure})")
    agg = aggregate(runs)
    if best is None:
        raise RunError("every student seed failed")
    model_path = out / f"{fit_set.name}__{method}__student.mkd"
    save_model(best[0], model_path)
    summary = {"dataset": fit_set.name, "method": method, "beta": beta,
               "grid": [{"beta": r.beta, "val_auc_prc": r.val_metrics.auc_prc if r.ok else None} for r in grid_runs],
               **agg.to_dict()}
    dump_json(out / f"{fit_set.name}__{method}__aggregate.json", summary)
    print(f"mean test AUC-PRC {agg.mean['auc_prc']:.4f} (std {agg.std['auc_prc']:.4f}) over {agg.completed} seed(s)")
    return 0


def cmd_evaluate(args) -> int:
    bundle = load_model(args.model)
    path = Path(args.data)
    if not path.is_file():
        train_path, test_path = data_mod.split_paths(args.data)
        path = train_path if args.split == "train" else test_path
    raw = data_mod.load_ucr(path, label_map=bundle.label_map)
    ds = data_mod.preprocess(raw, int(bundle.metadata.get("target_length", data_mod.TARGET_LENGTH)),
                             bool(bundle.metadata.get("znormalize", True)))
    report = evaluate_bundle(bundle, ds)
    payload = {"model": str(args.model), "data": str(path), **report}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"accuracy {report['accuracy']:.4f}  AUC-ROC {report['auc_roc']:.4f}  AUC-PRC {report['auc_prc']:.4f}")
    return 0


def evaluate_bundle(bundle: ModelBundle, ds: data_mod.Dataset) -> dict:
    return evaluate(predict_proba(bundle.params, bundle.config, ds.X), ds.y).to_dict()


def cmd_report(args) -> int:
    report = build_report(load_runs(args.runs), tol=args.tol)
    for message in report.warnings:
        logger.warning(message)
    table, summary = write_report(report, args.out)
    for row in report.summary:
        rank = "" if row["avg_rank"] is None else f"{row['avg_rank']:.3f}"
        print(f"{row['method']:8s} AUC-PRC {row['auc_prc_mean']:.4f}  avg rank {rank}")
    print(f"wrote {table} and {summary}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for method in METHODS:
        reports = [gradient_check_model(method, seed) for seed in range(args.seed, args.seed + args.seeds)]
        worst = max(reports, key=lambda r: r.max_rel_error)
        passed = all(r.passed for r in reports)
        ok &= passed
        print(worst.line() if not passed else worst.line().replace("FAIL", "PASS"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memkd", description="Memory-discrepancy distillation for LSTM classifiers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic UCR-format dataset")
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX_TRAIN and PREFIX_TEST")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-teacher", help="train teachers over several seeds and keep the best")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset prefix (PREFIX_TRAIN / PREFIX_TEST)")
    p.add_argument("--out", required=True, help="output directory for the model and run records")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train students with a distillation objective")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data")
    p.add_argument("--method", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="score a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="UCR file, or prefix of a split pair")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="build comparison tables from run records")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True, help="CSV path; a _summary.csv is written next to it")
    p.add_argument("--tol", type=float, default=1e-4, help="win/tie/loss tolerance")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"memkd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MemkdError, OSError) as exc:
        print(f"memkd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
