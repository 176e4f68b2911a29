"""Command-line entry point: generate, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure (including a failed gradient check). Every command is deterministic
under a fixed seed; the only nondeterministic output fields are the wall_s
timing entries in the training log. The default output directory comes from
--out, then the TOKMOE_OUT_DIR environment variable, then ./tokmoe_out.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import figures
from .data import (Schema, bayes_rate, generate_synthetic, load_dataset,
                   load_schema, load_signal_spec, normalize_dataset,
                   save_dataset, split_dataset)
from .errors import ConfigError, DataError, NumericError
from .gradcheck import check_gradients, small_check_schema
from .metrics import (evaluate, write_expert_load_csv, write_importance_csv,
                      write_metrics_json, write_predictions_csv)
from .model import (VARIANTS, ModelConfig, build_model, load_checkpoint,
                    save_checkpoint)
from .optim import TrainConfig, train

ABLATION_VARIANTS = ("full", "token_avg", "token_moe_tim",
                     "token_trans_tim", "token_trans_avg")

log = logging.getLogger("tokmoe.cli")


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors map to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("TOKMOE_OUT_DIR") or "tokmoe_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _add_common(p) -> None:
    p.add_argument("--out", default=None,
                   help="output directory (default: $TOKMOE_OUT_DIR or ./tokmoe_out)")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")


def _add_model_flags(p) -> None:
    p.add_argument("--variant", default="full", choices=VARIANTS,
                   help="architecture variant")
    p.add_argument("--dim", type=int, default=128, help="token embedding dimension")
    p.add_argument("--cross-layers", type=int, default=3,
                   help="cross-token transformer depth")
    p.add_argument("--cross-heads", type=int, default=1,
                   help="cross-token attention heads")
    p.add_argument("--experts", type=int, default=4, help="expert count")
    p.add_argument("--tau-e", type=float, default=1.0, help="gate temperature")
    p.add_argument("--tau-p", type=float, default=1.0, help="importance temperature")
    p.add_argument("--intra-layers", type=int, default=1,
                   help="within-measure transformer depth")
    p.add_argument("--intra-heads", type=int, default=1,
                   help="within-measure attention heads")


def _add_train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4, help="base learning rate")
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--no-stratify", action="store_true",
                   help="split without preserving label balance")
    p.add_argument("--modality-filter", default=None,
                   help="comma-separated measure group tags to keep "
                        "(e.g. STR or FUN,HORM)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def _model_config(args, variant: str | None = None) -> ModelConfig:
    cfg = ModelConfig(
        variant=variant or args.variant,
        dim=args.dim,
        cross_layers=args.cross_layers,
        cross_heads=args.cross_heads,
        n_experts=args.experts,
        tau_e=args.tau_e,
        tau_p=args.tau_p,
        intra_layers=args.intra_layers,
        intra_heads=args.intra_heads,
        seed=args.seed,
    )
    cfg.validate()
    return cfg


def _train_config(args) -> TrainConfig:
    tconf = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr,
        weight_decay=args.weight_decay,
        warmup_epochs=args.warmup_epochs,
        shuffle_seed=args.seed,
    )
    tconf.validate()
    return tconf


def _load_data_dir(data: str) -> tuple[Schema, list]:
    base = Path(data)
    if not base.is_dir():
        raise DataError(f"--data must be a dataset directory, got {base}")
    schema = load_schema(base / "schema.json")
    records = load_dataset(base / "subjects.csv", schema)
    return schema, records


def _write_schema_json(path: Path, schema: Schema) -> None:
    path.write_text(json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n")


def _metric_line(group: str, row) -> str:
    def s(v):
        return "undefined" if v is None else f"{v:.4f}"

    return (f"  {group:8s} acc={s(row.accuracy)} sens={s(row.sensitivity)} "
            f"spec={s(row.specificity)} f1={s(row.f1)}")


def _write_reports(out: Path, result, meta: dict, render: bool) -> None:
    write_metrics_json(out / "metrics.json", result, meta)
    write_importance_csv(out / "importance.csv", result)
    write_expert_load_csv(out / "expert_load.csv", result)
    write_predictions_csv(out / "predictions.csv", result)
    if render:
        figures.save_importance_figure(out / "importance.png", result)
        figures.save_sex_difference_figure(out / "sex_difference.png", result)
        figures.save_expert_load_figure(out / "expert_load.png", result)


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    spec = load_signal_spec(args.spec)
    schema = load_schema(spec.schema_ref)
    records = generate_synthetic(schema, spec, args.seed)
    out = _out_dir(args)
    _write_schema_json(out / "schema.json", schema)
    save_dataset(out / "subjects.csv", records, schema)
    balance = sum(r.label for r in records) / len(records)
    bayes = bayes_rate(schema, spec, seed=args.seed + 1)
    meta = {
        "spec": str(args.spec),
        "schema": schema.name,
        "seed": args.seed,
        "n_subjects": len(records),
        "label_balance": balance,
        "bayes_rate_estimate": round(bayes, 4),
        "female_fraction": spec.female_fraction,
    }
    (out / "generation.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"generated {len(records)} subjects under schema {schema.name} "
          f"(label balance {balance:.3f}, estimated Bayes accuracy {bayes:.4f})")
    print(f"wrote {out / 'schema.json'}, {out / 'subjects.csv'}, "
          f"{out / 'generation.json'}")
    return 0


def cmd_train(args) -> int:
    schema_full, records = _load_data_dir(args.data)
    schema = schema_full
    if args.modality_filter:
        groups = [g.strip() for g in args.modality_filter.split(",") if g.strip()]
        schema = schema_full.subset(groups)
        print(f"modality filter {groups}: {schema.token_count} of "
              f"{schema_full.token_count} tokens kept")
    train_raw, test_raw = split_dataset(records, args.train_fraction, args.seed,
                                        stratify=not args.no_stratify)
    norm_train = normalize_dataset(train_raw, schema)
    norm_test = normalize_dataset(test_raw, schema)

    config = _model_config(args)
    params = build_model(config, schema)
    tconf = _train_config(args)
    print(f"training variant={config.variant} on {len(norm_train)} subjects "
          f"({len(norm_test)} held out), {params.n_params()} parameters")

    def report(entry):
        print(f"epoch {entry['epoch'] + 1}/{tconf.epochs} "
              f"loss={entry['mean_loss']:.4f} lr={entry['lr']:.2e} "
              f"({entry['wall_s']:.1f}s)")

    tlog = train(params, norm_train, tconf, schema, on_epoch=report)

    out = _out_dir(args)
    with (out / "train_log.jsonl").open("w") as fh:
        for entry in tlog:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    meta = {
        "train_ids": [r.sid for r in train_raw],
        "test_ids": [r.sid for r in test_raw],
        "split_seed": args.seed,
        "train_fraction": args.train_fraction,
        "stratified": not args.no_stratify,
        "epochs": tconf.epochs,
        "final_mean_loss": tlog[-1]["mean_loss"],
    }
    save_checkpoint(out / "checkpoint.bin", params, meta)

    split_dir = out / "test_split"
    split_dir.mkdir(exist_ok=True)
    _write_schema_json(split_dir / "schema.json", schema_full)
    save_dataset(split_dir / "subjects.csv", test_raw, schema_full)

    result = evaluate(params, norm_test, schema)
    meta = {"variant": config.variant, "model_seed": config.seed,
            "schema_fingerprint": schema.fingerprint()}
    _write_reports(out, result, meta, render=not args.no_figures)
    if not args.no_figures:
        figures.save_training_curve(out / "training_curve.png", tlog)

    print("test-split metrics:")
    for g, row in result.rows.items():
        print(_metric_line(g, row))
    print(f"wrote {out / 'checkpoint.bin'} and reports under {out}")
    return 0


def _project_schema(ckpt_schema: Schema, data_schema: Schema) -> None:
    """Refuse evaluation unless every checkpoint measure exists identically."""
    if ckpt_schema.fingerprint() == data_schema.fingerprint():
        return
    for m in ckpt_schema.measures:
        try:
            other = data_schema.measure(m.name)
        except Exception as exc:
            raise DataError(
                f"checkpoint schema needs measure {m.name!r}, absent from the "
                f"dataset schema {data_schema.name!r}") from exc
        if other.to_dict() != m.to_dict():
            raise DataError(
                f"measure {m.name!r} differs between checkpoint and dataset "
                f"schemas; refusing to evaluate")


def cmd_eval(args) -> int:
    params, _meta = load_checkpoint(args.checkpoint)
    data_schema, records = _load_data_dir(args.data)
    _project_schema(params.schema, data_schema)
    norm = normalize_dataset(records, params.schema)
    result = evaluate(params, norm, params.schema)
    out = _out_dir(args)
    meta = {"variant": params.config.variant, "model_seed": params.config.seed,
            "schema_fingerprint": params.schema.fingerprint()}
    _write_reports(out, result, meta, render=not args.no_figures)
    print(f"evaluated {len(records)} subjects with variant={params.config.variant}:")
    for g, row in result.rows.items():
        print(_metric_line(g, row))
    print(f"wrote reports under {out}")
    return 0


def cmd_ablate(args) -> int:
    schema_full, records = _load_data_dir(args.data)
    schema = schema_full
    if args.modality_filter:
        groups = [g.strip() for g in args.modality_filter.split(",") if g.strip()]
        schema = schema_full.subset(groups)
    train_raw, test_raw = split_dataset(records, args.train_fraction, args.seed,
                                        stratify=not args.no_stratify)
    norm_train = normalize_dataset(train_raw, schema)
    norm_test = normalize_dataset(test_raw, schema)
    tconf = _train_config(args)
    out = _out_dir(args)

    table: list[dict] = []
    overall_rows: list[dict] = []
    for variant in ABLATION_VARIANTS:
        config = _model_config(args, variant=variant)
        params = build_model(config, schema)
        print(f"[{variant}] training on {len(norm_train)} subjects...")
        train(params, norm_train, tconf, schema)
        result = evaluate(params, norm_test, schema)
        vdir = out / "variants" / variant
        vdir.mkdir(parents=True, exist_ok=True)
        meta = {"variant": variant, "model_seed": config.seed,
                "schema_fingerprint": schema.fingerprint()}
        _write_reports(vdir, result, meta, render=not args.no_figures)
        for g, row in result.rows.items():
            table.append({"variant": variant, "group": g, **row.to_dict()})
        overall = result.rows["overall"]
        overall_rows.append({"variant": variant, **overall.to_dict()})
        print(_metric_line(variant, overall))

    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "group", "accuracy", "sensitivity",
                         "specificity", "f1"])
        for row in table:
            writer.writerow([row["variant"], row["group"], row["accuracy"],
                             row["sensitivity"], row["specificity"], row["f1"]])
    (out / "ablation.json").write_text(
        json.dumps(table, indent=2, sort_keys=True) + "\n")
    if not args.no_figures:
        figures.save_ablation_figure(out / "ablation.png", overall_rows)
    print(f"wrote {out / 'ablation.csv'} ({len(ABLATION_VARIANTS)} variants)")
    return 0


def cmd_gradcheck(args) -> int:
    schema = small_check_schema()
    config = _model_config(args)
    params = build_model(config, schema)
    rng = np.random.default_rng(args.seed)
    values = {}
    for m in schema.measures:
        if m.kind == "vector":
            values[m.name] = rng.standard_normal((args.batch, m.length))
        else:
            values[m.name] = rng.standard_normal(args.batch)
    labels = rng.integers(0, 2, size=args.batch)
    samples = None if args.exhaustive else args.samples
    reports = check_gradients(params, values, labels,
                              samples_per_group=samples, sample_seed=args.seed)
    worst = 0.0
    failures = 0
    for r in reports:
        ok = r.passed(args.tol)
        failures += 0 if ok else 1
        worst = max(worst, r.max_rel_err)
        print(f"{'PASS' if ok else 'FAIL'} {r.name} "
              f"checked={r.n_checked} max_rel_err={r.max_rel_err:.3e}")
    verdict = "PASS" if failures == 0 else "FAIL"
    print(f"gradcheck: {len(reports)} parameter groups, worst {worst:.3e}, "
          f"tolerance {args.tol:.1e}: {verdict}")
    return 0 if failures == 0 else 3


# ---------------------------------------------------------------------------
# parser wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="tokmoe",
                     description="Multimodal tabular classifier kit: measure "
                                 "tokenization, cross-token transformer, soft "
                                 "mixture of experts, interpretable pooling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--spec", required=True,
                   help="synthetic spec: built-in name (linear, interaction, "
                        "sexdiff, null) or a JSON file path")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="split, normalize, train, evaluate")
    p.add_argument("--data", required=True, help="dataset directory")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--no-figures", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all ablation variants")
    p.add_argument("--data", required=True, help="dataset directory")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every parameter group")
    _add_common(p)
    _add_model_flags(p)
    p.set_defaults(dim=16, cross_layers=2, experts=3)
    p.add_argument("--batch", type=int, default=2, help="probe batch size")
    p.add_argument("--samples", type=int, default=4,
                   help="coordinates checked per parameter group")
    p.add_argument("--exhaustive", action="store_true",
                   help="check every coordinate of every group")
    p.add_argument("--tol", type=float, default=1e-4,
                   help="max allowed relative error")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
