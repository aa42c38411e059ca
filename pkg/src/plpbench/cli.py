"""``plpbench`` command-line interface."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, study, synthgen
from .omop_lite import StoreError, load_store, validate_store

log = logging.getLogger("plpbench")


def _config(args) -> study.StudyConfig:
    cfg = study.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.profile is not None:
        cfg = cfg.with_profile(args.profile)
    if getattr(args, "output", None):
        cfg = replace(cfg, output_dir=args.output)
    return cfg


def _exit_code(records) -> int:
    failed = study.failed_count(records)
    if failed:
        log.error("%d record(s) failed", failed)
    return 1 if failed else 0


def cmd_generate(args) -> int:
    if args.config:
        gen, risk = synthgen.load_generator_document(args.config)
        if args.seed is not None:
            gen = replace(gen, seed=args.seed)
    else:
        gen, risk = synthgen.planted_scenario(n_persons=args.n_persons, seed=args.seed or 1, name=args.name,
                                              concept_id_offset=args.concept_id_offset)
    store, truth = synthgen.generate(gen, risk, workers=args.jobs)
    out = synthgen.export(store, truth, args.out)
    print(f"wrote {store.n_persons} persons to {out}")
    return 0


def cmd_validate(args) -> int:
    code = 0
    for path in args.stores:
        try:
            report = validate_store(load_store(path))
        except StoreError as exc:
            print(f"{path}: ERROR {exc}")
            code = 1
            continue
        for w in report.warnings:
            print(f"{path}: warning: {w}")
        for e in report.errors:
            print(f"{path}: error: {e}")
        print(f"{path}: {'ok' if report.ok else 'INVALID'} ({len(report.errors)} errors, {len(report.warnings)} warnings)")
        code = code or (0 if report.ok else 1)
    return code


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    results = study.run_study(cfg, model_root=out / "models", jobs=args.jobs)
    study.emit_report(results, out)
    print(f"{len(results.records)} records written to {out / 'records.csv'}")
    return _exit_code(results.records)


def _persisted(root: Path):
    """(task, development store, method, directory) for every persisted model."""
    for d in sorted(root.glob("*/*/*")):
        if (d / "dictionary.json").exists():
            yield d.parts[-3], d.parts[-2], d.parts[-1], d


def cmd_external(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    stores = study._Stores(cfg)
    tasks = {t.name: t for t in cfg.tasks}
    records = []
    for task_name, dev, method, d in _persisted(Path(args.models or out / "models")):
        if task_name not in tasks:
            continue
        model, dictionary = study.load_persisted(d)
        for val in cfg.validation_stores:
            records.append(study.run_external_validation(model, dictionary, stores.store(val), tasks[task_name],
                                                         cfg, dev, stores.cohort(val, tasks[task_name])))
    out.mkdir(parents=True, exist_ok=True)
    (out / "external_records.csv").write_text(study.records_csv(records))
    print(f"{len(records)} external records written to {out / 'external_records.csv'}")
    return _exit_code(records)


def cmd_curve(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    if not cfg.learning_curve_outcome_targets:
        print("no learning_curve_outcome_targets configured")
        return 0
    stores = study._Stores(cfg)
    tasks = {t.name: t for t in cfg.tasks}
    points = []
    for task_name, dev_name, method, d in _persisted(Path(args.models or out / "models")):
        if task_name not in tasks or method not in cfg.curve_methods or dev_name not in cfg.development_stores:
            continue
        model, _ = study.load_persisted(d)
        task = tasks[task_name]
        dev = study.prepare_development(stores.store(dev_name), task, cfg, stores.cohort(dev_name, task))
        points += study.run_learning_curve(dev, model, cfg.learning_curve_outcome_targets, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "learning_curves.csv").write_text(study.curves_csv(points))
    print(f"{len(points)} learning-curve points written to {out / 'learning_curves.csv'}")
    return 1 if any(p.status == "failed" for p in points) else 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    records = study.read_records_csv(args.records or out / "records.csv")
    summary = study.compare(records, cfg, out)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    """Rebuild the bundle from an existing records.csv (and learning curves if present)."""
    cfg = _config(args)
    out = Path(cfg.output_dir)
    records = study.read_records_csv(out / "records.csv")
    curves = study.read_curves_csv(out / "learning_curves.csv") if (out / "learning_curves.csv").exists() else []
    chars = study.characterizations(cfg, study._Stores(cfg))
    results = study.StudyResults(cfg, records, curves, chars, study.derived_seeds(cfg))
    study.emit_report(results, out)
    print(f"report written to {out}")
    return _exit_code(records)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plpbench", description="Patient-level prediction benchmark engine.")
    p.add_argument("--version", action="version", version=f"plpbench {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="study configuration (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--profile", choices=sorted(study.PROFILES), default=None)
        sp.add_argument("--output", default=None, help="override the output directory")
        return sp

    g = sub.add_parser("generate", help="write a synthetic event store")
    g.add_argument("--config", help="generator document with 'config' and 'risk_model'; default: planted scenario")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--n-persons", type=int, default=11000)
    g.add_argument("--name", default="synthetic")
    g.add_argument("--concept-id-offset", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate-data", help="check event stores for integrity errors and warnings")
    v.add_argument("stores", nargs="+")
    v.set_defaults(func=cmd_validate)

    common(sub.add_parser("run", help="run the full study and write the report bundle")).set_defaults(func=cmd_run)
    e = common(sub.add_parser("external", help="validate persisted models on the validation stores"))
    e.add_argument("--models", default=None)
    e.set_defaults(func=cmd_external)
    c = common(sub.add_parser("curve", help="learning curves from persisted models"))
    c.add_argument("--models", default=None)
    c.set_defaults(func=cmd_curve)
    cm = common(sub.add_parser("compare", help="performance matrices, rank tests and CD diagrams"))
    cm.add_argument("--records", default=None)
    cm.set_defaults(func=cmd_compare)
    common(sub.add_parser("report", help="rebuild the report bundle from records.csv")).set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (study.StudyError, StoreError, ValueError, OSError) as exc:
        print(f"plpbench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
