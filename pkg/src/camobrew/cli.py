"""Batch command-line interface.

Subcommands: gen-data, train, brew-poison, brew-camo, run, ablate, report.
Each reads a JSON config file (strict schema, see config.py) plus repeated
`--set dotted.key=value` overrides. Exit codes: 0 success, 2 config/usage
error, 3 data/format error, 4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .ablate import (
    augmentation_sweep,
    budget_sweep,
    feature_distance_profile,
    random_deletion,
    transfer_matrix,
)
from .augment import AugmentationPolicy
from .brew import brew_camouflages, brew_poisons, TargetSpec
from .config import LoadedConfig, load_config_file
from .errors import (
    CamobrewError,
    ConfigError,
    DataError,
    DegenerateGradientError,
    FileFormatError,
    ModelError,
)
from .io import (
    RunReport,
    emit_report,
    histogram_csv_text,
    load_model,
    load_perturbations,
    save_csv_dataset,
    save_model,
    save_perturbations,
    summary_csv_text,
    sweep_csv_text,
    _atomic_write_text,
)
from .models import train
from .pipeline import (
    STAGE_BREW_CAMO,
    STAGE_BREW_POISON,
    STAGE_CLEAN_TRAIN,
    STAGE_TRAIN_POISONED,
    derive_seed,
    derive_trial_plan,
    perturbation_entries,
    run_trials,
)
from .data import ROLE_POISON


def _parse_override(raw: str) -> tuple[str, object]:
    if "=" not in raw:
        raise ConfigError(f"override {raw!r} must look like key=value")
    key, value = raw.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key, parsed


def _load(args) -> LoadedConfig:
    overrides = dict(_parse_override(item) for item in (args.set or []))
    if getattr(args, "trials", None) is not None:
        overrides["trials"] = args.trials
    if getattr(args, "output_dir", None) is not None:
        overrides["output_dir"] = args.output_dir
    return load_config_file(args.config, overrides)


def _stage_config(loaded: LoadedConfig, seed: int):
    return replace(loaded.scenario.train_config, seed=seed)


def cmd_gen_data(args) -> int:
    loaded = _load(args)
    out = loaded.output_dir
    out.mkdir(parents=True, exist_ok=True)
    save_csv_dataset(loaded.scenario.train_dataset, out / "train.csv")
    save_csv_dataset(loaded.scenario.validation_dataset, out / "validation.csv")
    print(f"wrote {out / 'train.csv'} and {out / 'validation.csv'}")
    return 0


def cmd_train(args) -> int:
    loaded = _load(args)
    scenario = loaded.scenario
    seed = derive_seed(scenario.master_seed, STAGE_CLEAN_TRAIN)
    params = train(scenario.model_spec, scenario.train_dataset, _stage_config(loaded, seed))
    out = loaded.output_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model-clean.camobrew"
    save_model(scenario.model_spec, params, path)
    print(f"trained clean model (final loss {params.final_train_loss}); wrote {path}")
    return 0


def _brew_poison_set(loaded: LoadedConfig, trial_index: int):
    scenario = loaded.scenario
    plan = derive_trial_plan(scenario, trial_index)
    seed = derive_seed(scenario.master_seed, STAGE_CLEAN_TRAIN)
    theta_clean = train(scenario.model_spec, scenario.train_dataset, _stage_config(loaded, seed))
    target = scenario.validation_dataset.by_id(plan.target_id)
    target_spec = TargetSpec(
        targets=((target, plan.target_label),), adversarial_label=plan.adversarial_label
    )
    bases = [scenario.train_dataset.by_id(i) for i in plan.poison_base_ids]
    brew_cfg = replace(
        scenario.brew_config,
        seed=derive_seed(scenario.master_seed, trial_index, STAGE_BREW_POISON),
        quantize_deltas=scenario.resolved_quantize(),
    )
    pset = brew_poisons(
        scenario.model_spec, theta_clean, target_spec, bases,
        scenario.threat_model, brew_cfg, scenario.train_dataset.feature_range,
    )
    return plan, target_spec, pset, brew_cfg


def cmd_brew_poison(args) -> int:
    loaded = _load(args)
    scenario = loaded.scenario
    plan, _, pset, brew_cfg = _brew_poison_set(loaded, args.trial)
    out = loaded.output_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"poisons-trial{args.trial}.pert"
    save_perturbations(
        pset, path, scenario.train_dataset.content_hash(), scenario.model_spec, brew_cfg
    )
    print(
        f"brewed {len(pset)} poisons (loss {pset.loss_value:.6f}) "
        f"for target {plan.target_id}; wrote {path}"
    )
    return 0


def cmd_brew_camo(args) -> int:
    loaded = _load(args)
    scenario = loaded.scenario
    plan = derive_trial_plan(scenario, args.trial)
    train_ds = scenario.train_dataset
    if args.poisons:
        pset, _ = load_perturbations(args.poisons, dataset=train_ds)
        brew_cfg = scenario.brew_config
    else:
        plan, _, pset, brew_cfg = _brew_poison_set(loaded, args.trial)
    poison_entries = perturbation_entries(pset, train_ds, ROLE_POISON, train_ds.next_id())
    poisoned_ds = train_ds.with_examples_added(poison_entries)
    seed_cp = derive_seed(scenario.master_seed, args.trial, STAGE_TRAIN_POISONED)
    theta_poisoned = train(scenario.model_spec, poisoned_ds, _stage_config(loaded, seed_cp))
    target = scenario.validation_dataset.by_id(plan.target_id)
    target_spec = TargetSpec(
        targets=((target, plan.target_label),), adversarial_label=plan.adversarial_label
    )
    camo_bases = [train_ds.by_id(i) for i in plan.camouflage_base_ids]
    camo_cfg = replace(
        scenario.brew_config,
        seed=derive_seed(scenario.master_seed, args.trial, STAGE_BREW_CAMO),
        quantize_deltas=scenario.resolved_quantize(),
    )
    camo_set = brew_camouflages(
        scenario.model_spec, theta_poisoned, target_spec, camo_bases,
        scenario.threat_model, camo_cfg, train_ds.feature_range,
    )
    out = loaded.output_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"camouflages-trial{args.trial}.pert"
    save_perturbations(camo_set, path, train_ds.content_hash(), scenario.model_spec, camo_cfg)
    print(
        f"brewed {len(camo_set)} camouflages (loss {camo_set.loss_value:.6f}); wrote {path}"
    )
    return 0


def cmd_run(args) -> int:
    loaded = _load(args)
    report = RunReport.build(loaded.scenario, run_trials(loaded.scenario))
    out = loaded.output_dir
    out.mkdir(parents=True, exist_ok=True)
    written = emit_report(report, out / "report", include_volatile=args.volatile)
    summary = report.summary
    print(
        f"poisoning rate {summary['poisoning_rate']:.0%}, "
        f"camouflaging rate "
        + (
            f"{summary['camouflaging_rate']:.0%}"
            if summary["camouflaging_rate"] is not None
            else "n/a"
        )
    )
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    loaded = _load(args)
    if loaded.ablation is None:
        raise ConfigError("ablate requires an 'ablation' config section")
    scenario = loaded.scenario
    section = loaded.ablation
    kind = section.get("kind")
    out = loaded.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if kind == "budget":
        rows = budget_sweep(scenario, [tuple(cell) for cell in section.get("grid", [])])
    elif kind == "deletion":
        rows = random_deletion(
            scenario, [tuple(pair) for pair in section.get("fraction_pairs", [])]
        )
    elif kind == "transfer":
        from .config import parse_model_spec

        brew_specs = [
            parse_model_spec(m, scenario.train_dataset) for m in section.get("brew_models", [])
        ]
        victim_specs = [
            parse_model_spec(m, scenario.train_dataset)
            for m in section.get("victim_models", [])
        ]
        rows = transfer_matrix(scenario, brew_specs, victim_specs)
    elif kind == "augmentation":
        policies = [
            AugmentationPolicy(kind=p.get("kind", "none"), p=p.get("p", 0.5))
            for p in section.get("policies", [])
        ]
        rows = augmentation_sweep(scenario, policies)
    elif kind == "distance":
        return _run_distance_profile(loaded, section, out)
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    csv_path = out / f"ablation-{kind}.csv"
    _atomic_write_text(csv_path, sweep_csv_text(rows))
    json_path = out / f"ablation-{kind}.json"
    doc = {"kind": kind, "rows": [r.to_dict() for r in rows]}
    _atomic_write_text(json_path, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _run_distance_profile(loaded: LoadedConfig, section: dict, out: Path) -> int:
    scenario = loaded.scenario
    results = run_trials(replace(scenario, num_trials=1))
    result = results[0]
    if result.failed:
        raise CamobrewError(f"distance profiling trial failed: {result.error}")
    plan = result.plan
    train_ds = scenario.train_dataset
    # Rebuild the corrupted dataset for the profiled trial.
    from .pipeline import run_trial  # noqa: F401  (documented entry point)

    seed = derive_seed(scenario.master_seed, STAGE_CLEAN_TRAIN)
    theta_clean = train(scenario.model_spec, train_ds, _stage_config(loaded, seed))
    target = scenario.validation_dataset.by_id(plan.target_id)
    profile = feature_distance_profile(
        scenario.model_spec, theta_clean, train_ds, target, bins=section.get("bins", 30)
    )
    path = out / "distance-profile.csv"
    _atomic_write_text(path, histogram_csv_text(profile))
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    try:
        text = Path(args.input).read_text()
    except OSError as exc:
        raise FileFormatError(f"cannot read {args.input}: {exc}") from exc
    report = RunReport.from_json(text)
    if not report.trials:
        raise ConfigError("report has no trials")
    print(summary_csv_text(report), end="")
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.csv"
        _atomic_write_text(path, summary_csv_text(report))
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camobrew",
        description="Camouflaged data-poisoning attacks against unlearning pipelines",
    )
    sub = parser.add_subparsers(dest="command")

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="dotted-path config override (repeatable)",
        )
        p.add_argument("--output-dir", help="override the output directory")

    p = sub.add_parser("gen-data", help="generate synthetic datasets as CSV")
    add_common(p)

    p = sub.add_parser("train", help="train the clean model and save it")
    add_common(p)

    p = sub.add_parser("brew-poison", help="brew a poison set for one trial")
    add_common(p)
    p.add_argument("--trial", type=int, default=0)

    p = sub.add_parser("brew-camo", help="brew a camouflage set for one trial")
    add_common(p)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--poisons", help="reuse a saved poison perturbation file")

    p = sub.add_parser("run", help="run the full pipeline for all trials")
    add_common(p)
    p.add_argument("--trials", type=int, help="override the trial count")
    p.add_argument("--volatile", action="store_true", help="include timings in the report")

    p = sub.add_parser("ablate", help="run the configured ablation sweep")
    add_common(p)

    p = sub.add_parser("report", help="render a saved report as CSV")
    p.add_argument("--input", required=True, help="report JSON file")
    p.add_argument("--output-dir")
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "brew-poison": cmd_brew_poison,
        "brew-camo": cmd_brew_camo,
        "run": cmd_run,
        "ablate": cmd_ablate,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (DataError, FileFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ModelError, DegenerateGradientError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except CamobrewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
