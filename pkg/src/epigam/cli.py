"""Command-line entry points for all pipelines.

Every command writes its outputs plus a ``run_manifest.json`` recording the
configuration, content hashes of inputs and outputs, and library versions.
Reruns with identical configuration produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .datasets import SCENARIO_FILES, ValidationFailure, infection_panel_from_bundle, validate_and_load
from .rng import scheme_name
from .util import sha256_file, write_csv, write_json


class PipelineError(RuntimeError):
    pass


def _manifest(command: str, config: dict, inputs: list[Path], outputs: list[Path],
              out_dir: Path) -> None:
    import scipy

    payload = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, (Path, date)) else v)
                   for k, v in config.items()},
        "inputs": {str(p): sha256_file(p) for p in sorted(inputs)},
        "outputs": {p.name: sha256_file(p) for p in sorted(outputs)},
        "rng_scheme": scheme_name(),
        "versions": {
            "epigam": __version__,
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    write_json(payload, out_dir / "run_manifest.json")


def _input_files(data_dir: Path, scenario: str) -> list[Path]:
    return [data_dir / name for name in SCENARIO_FILES[scenario]]


def _cmd_simulate(args) -> int:
    from . import synth

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.scenario == "infection":
        scenario = synth.InfectionScenario(n_districts=args.districts or 12,
                                           n_weeks=args.weeks or 16)
        panel, pop, truth = synth.simulate_infection_scenario(scenario, args.seed)
        for name, df in synth.infection_tables(panel, pop).items():
            outputs.append(write_csv(df, out / name))
    elif args.scenario == "nowcast":
        scenario = synth.NowcastScenario(n_days=args.days or 70, d_max=args.dmax or 25)
        line_list, truth = synth.simulate_nowcast_linelist(scenario, args.seed)
        outputs.append(write_csv(line_list, out / "hosp_linelist.csv"))
    elif args.scenario == "hosp":
        scenario = synth.HospScenario(n_districts=args.districts or 20,
                                      n_days=args.days or 60)
        panel_df, pop_df, coords_df, truth = synth.simulate_hosp_scenario(scenario, args.seed)
        outputs.append(write_csv(
            panel_df[["date", "district", "age_group", "gender", "reported_count"]],
            out / "hosp_panel.csv"))
        outputs.append(write_csv(panel_df, out / "hosp_panel_with_truth.csv"))
        outputs.append(write_csv(pop_df, out / "population_g.csv"))
        outputs.append(write_csv(coords_df, out / "district_coords.csv"))
        f_rows = []
        for age, vals in truth["true_f_by_age"].items():
            for t, f in enumerate(vals, start=1):
                f_rows.append({"t": t, "age_group": age, "F": f})
        outputs.append(write_csv(pd.DataFrame(f_rows), out / "true_f.csv"))
    elif args.scenario == "icu":
        scenario = synth.IcuScenario(n_districts=args.districts or 40,
                                     n_weeks=args.weeks or 24)
        icu_df, inc_df, coords_df, truth = synth.simulate_icu_scenario(scenario, args.seed)
        outputs.append(write_csv(icu_df, out / "icu_panel.csv"))
        outputs.append(write_csv(inc_df, out / "incidence.csv"))
        outputs.append(write_csv(coords_df, out / "district_coords.csv"))
    else:
        raise PipelineError(f"unknown scenario {args.scenario!r}")
    outputs.append(write_json(truth, out / "truth.json"))
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    _manifest("simulate", cfg, [], outputs, out)
    return 0


def _cmd_validate(args) -> int:
    data_dir = Path(args.data)
    try:
        validate_and_load(data_dir, args.scenario)
    except ValidationFailure as exc:
        print(str(exc.report), file=sys.stderr)
        return 1
    print(f"validation passed for scenario {args.scenario!r} under {data_dir}")
    return 0


def _cmd_infection_fit(args) -> int:
    from .infection import coefficient_table, fit_infection_model

    data_dir, out = Path(args.data), Path(args.out)
    bundle = validate_and_load(data_dir, "infection")
    panel, pop = infection_panel_from_bundle(bundle)
    fits = fit_infection_model(panel, pop, delta=args.delta)
    table = coefficient_table(fits, panel.age_groups)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [write_csv(table, out / "infection_coefficients.csv")]
    fit_docs = {str(a): json.loads(f.to_json()) for a, f in zip(panel.age_groups, fits)}
    outputs.append(write_json(fit_docs, out / "infection_fits.json"))
    _manifest("infection fit", {"data": args.data, "delta": args.delta},
              _input_files(data_dir, "infection"), outputs, out)
    return 0


def _cmd_infection_cdr_study(args) -> int:
    from .infection import run_cdr_study

    out = Path(args.out)
    result = run_cdr_study(
        n_replicates=args.replicates, n_districts=args.districts, n_weeks=args.weeks,
        n_age_groups=args.age_groups, mean_cdr=args.mean_cdr,
        concentration=args.concentration, seed=args.seed, adversarial=args.adversarial,
    )
    out.mkdir(parents=True, exist_ok=True)
    outputs = [write_csv(result.summary, out / "cdr_study.csv")]
    outputs.append(write_json({
        "fraction_within_3se": result.fraction_within_3se,
        "replicates_with_any_outside": result.replicates_with_any_outside,
        "n_replicates": result.n_replicates,
        "adversarial": result.adversarial,
    }, out / "cdr_summary.json"))
    cfg = {k: getattr(args, k) for k in
           ("replicates", "districts", "weeks", "age_groups", "mean_cdr",
            "concentration", "seed", "adversarial")}
    _manifest("infection cdr-study", cfg, [], outputs, out)
    return 0


def _cmd_nowcast_fit(args) -> int:
    from .nowcast import bootstrap_ci, build_triangle, fit_delay_model

    data_dir, out = Path(args.data), Path(args.out)
    bundle = validate_and_load(data_dir, "nowcast")
    line_list = bundle["hosp_linelist.csv"]
    as_of = date.fromisoformat(args.as_of)
    triangle = build_triangle(line_list, as_of, d_max=args.dmax)
    model = fit_delay_model(triangle)
    result = bootstrap_ci(triangle, model, n_boot=args.bootstrap, seed=args.seed,
                          draw_remainder=True)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [write_csv(result.frame(), out / "nowcast.csv")]
    (out / "delay_model.json").write_text(model.to_json() + "\n", encoding="utf-8")
    outputs.append(out / "delay_model.json")
    cfg = {"data": args.data, "as_of": args.as_of, "dmax": args.dmax,
           "bootstrap": args.bootstrap, "seed": args.seed}
    _manifest("nowcast fit", cfg, _input_files(data_dir, "nowcast"), outputs, out)
    return 0


def _cmd_hosp_fit(args) -> int:
    from .hosp import HospPanel, build_hosp_design, emit_effect_grids, fit_hosp_model
    from .nowcast import DelayModelFit

    data_dir, out = Path(args.data), Path(args.out)
    bundle = validate_and_load(data_dir, "hosp")
    panel = HospPanel(
        bundle["hosp_panel.csv"], bundle["population_g.csv"],
        bundle["district_coords.csv"], as_of=date.fromisoformat(args.as_of),
    )
    inputs = _input_files(data_dir, "hosp")
    if args.nowcast_model:
        f_source = DelayModelFit.from_json(Path(args.nowcast_model).read_text(encoding="utf-8"))
        inputs.append(Path(args.nowcast_model))
    elif args.f_table:
        f_df = pd.read_csv(args.f_table)
        f_source = {age: grp.sort_values("t")["F"].to_numpy()
                    for age, grp in f_df.groupby("age_group")}
        inputs.append(Path(args.f_table))
    else:
        raise PipelineError("hosp fit needs --nowcast-model or --f-table")
    dmax = args.dmax
    bundle_design = build_hosp_design(panel, f_source, d_max=dmax)
    fit = fit_hosp_model(bundle_design, lam=args.lam if args.lam else "select")
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, df in emit_effect_grids(fit, bundle_design).items():
        outputs.append(write_csv(df, out / name))
    (out / "hosp_fit.json").write_text(fit.to_json() + "\n", encoding="utf-8")
    outputs.append(out / "hosp_fit.json")
    cfg = {"data": args.data, "as_of": args.as_of, "dmax": args.dmax,
           "nowcast_model": args.nowcast_model, "f_table": args.f_table, "lam": args.lam}
    _manifest("hosp fit", cfg, inputs, outputs, out)
    return 0


def _load_icu_panel(data_dir: Path):
    from .icu import panel_from_frames

    bundle = validate_and_load(data_dir, "icu")
    return panel_from_frames(bundle["icu_panel.csv"], bundle["incidence.csv"],
                             bundle["district_coords.csv"])


def _cmd_icu_fit(args) -> int:
    from .icu import build_icu_design, coefficient_table, fit_icu_model

    data_dir, out = Path(args.data), Path(args.out)
    panel = _load_icu_panel(data_dir)
    design = build_icu_design(panel, delta=args.delta)
    fit = fit_icu_model(design, lam=args.lam if args.lam else "select")
    out.mkdir(parents=True, exist_ok=True)
    outputs = [write_csv(coefficient_table(fit), out / "icu_coefficients.csv")]
    (out / "icu_fit.json").write_text(fit.to_json() + "\n", encoding="utf-8")
    outputs.append(out / "icu_fit.json")
    cfg = {"data": args.data, "delta": args.delta, "lam": args.lam}
    _manifest("icu fit", cfg, _input_files(data_dir, "icu"), outputs, out)
    return 0


def _cmd_icu_forecast(args) -> int:
    from .icu import rolling_forecast, score_frame, score_table

    data_dir, out = Path(args.data), Path(args.out)
    panel = _load_icu_panel(data_dir)
    records = rolling_forecast(panel, window=args.window)
    scores = score_frame(records)
    table = score_table(records, n_perm=args.n_perm, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [
        write_csv(scores, out / "forecast_scores.csv"),
        write_csv(table, out / "score_table.csv"),
    ]
    cfg = {"data": args.data, "window": args.window, "n_perm": args.n_perm,
           "seed": args.seed}
    _manifest("icu forecast", cfg, _input_files(data_dir, "icu"), outputs, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epigam",
        description="Penalized GAM pipelines for epidemic surveillance data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset bundle")
    sim.add_argument("--scenario", required=True,
                     choices=("infection", "nowcast", "hosp", "icu"))
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--districts", type=int)
    sim.add_argument("--weeks", type=int)
    sim.add_argument("--days", type=int)
    sim.add_argument("--dmax", type=int)
    sim.set_defaults(func=_cmd_simulate)

    val = sub.add_parser("validate", help="validate a data directory")
    val.add_argument("--scenario", required=True, choices=sorted(SCENARIO_FILES))
    val.add_argument("--data", required=True)
    val.set_defaults(func=_cmd_validate)

    infection = sub.add_parser("infection", help="autoregressive infection models")
    inf_sub = infection.add_subparsers(dest="subcommand", required=True)
    inf_fit = inf_sub.add_parser("fit")
    inf_fit.add_argument("--data", required=True)
    inf_fit.add_argument("--out", required=True)
    inf_fit.add_argument("--delta", type=float, default=1.0)
    inf_fit.set_defaults(func=_cmd_infection_fit)
    cdr = inf_sub.add_parser("cdr-study")
    cdr.add_argument("--replicates", type=int, default=100)
    cdr.add_argument("--districts", type=int, default=200)
    cdr.add_argument("--weeks", type=int, default=20)
    cdr.add_argument("--age-groups", type=int, default=3)
    cdr.add_argument("--mean-cdr", type=float, default=0.4)
    cdr.add_argument("--concentration", type=float, default=100.0)
    cdr.add_argument("--seed", type=int, required=True)
    cdr.add_argument("--adversarial", action="store_true")
    cdr.add_argument("--out", required=True)
    cdr.set_defaults(func=_cmd_infection_cdr_study)

    now = sub.add_parser("nowcast", help="reporting-delay nowcasting")
    now_sub = now.add_subparsers(dest="subcommand", required=True)
    now_fit = now_sub.add_parser("fit")
    now_fit.add_argument("--data", required=True)
    now_fit.add_argument("--out", required=True)
    now_fit.add_argument("--as-of", required=True)
    now_fit.add_argument("--dmax", type=int, default=40)
    now_fit.add_argument("--bootstrap", type=int, default=1000)
    now_fit.add_argument("--seed", type=int, required=True)
    now_fit.set_defaults(func=_cmd_nowcast_fit)

    hosp = sub.add_parser("hosp", help="hospitalisation incidence model")
    hosp_sub = hosp.add_subparsers(dest="subcommand", required=True)
    hosp_fit = hosp_sub.add_parser("fit")
    hosp_fit.add_argument("--data", required=True)
    hosp_fit.add_argument("--out", required=True)
    hosp_fit.add_argument("--as-of", required=True)
    hosp_fit.add_argument("--dmax", type=int, default=40)
    hosp_fit.add_argument("--nowcast-model")
    hosp_fit.add_argument("--f-table")
    hosp_fit.add_argument("--lam", type=float, default=None)
    hosp_fit.set_defaults(func=_cmd_hosp_fit)

    icu = sub.add_parser("icu", help="multinomial ICU occupancy")
    icu_sub = icu.add_subparsers(dest="subcommand", required=True)
    icu_fit = icu_sub.add_parser("fit")
    icu_fit.add_argument("--data", required=True)
    icu_fit.add_argument("--out", required=True)
    icu_fit.add_argument("--delta", type=float, default=1.0)
    icu_fit.add_argument("--lam", type=float, default=None)
    icu_fit.set_defaults(func=_cmd_icu_fit)
    icu_fc = icu_sub.add_parser("forecast")
    icu_fc.add_argument("--data", required=True)
    icu_fc.add_argument("--out", required=True)
    icu_fc.add_argument("--window", type=int, default=8)
    icu_fc.add_argument("--n-perm", type=int, default=9999)
    icu_fc.add_argument("--seed", type=int, required=True)
    icu_fc.set_defaults(func=_cmd_icu_forecast)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(str(exc.report), file=sys.stderr)
        return 1
    except (PipelineError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
