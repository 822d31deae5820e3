"""Batch front-end: CSV ingestion, model runs, and report emission.

``tnma run`` fits one model to a dataset and writes ``summary.json``,
``curves.csv``, optional ``samples.csv``, and companion figures into the
output directory.  ``tnma simstudy`` runs the 3-scenario x 3-model
comparison grid on a skeleton network and writes per-scenario reports plus
an overall metrics table.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import plots, posterior, simulate
from .data import (
    ArmRecord,
    Dataset,
    DatasetError,
    build_dataset,
    impute_date,
    network_summary,
    select_baseline,
)
from .kernels import NumericalError
from .model import ModelKind, ModelSpec
from .sampler import PosteriorSamples, SamplerConfig, run as run_sampler

__all__ = [
    "EXPECTED_HEADER",
    "REPORT_FORMAT_VERSION",
    "RunConfig",
    "UsageError",
    "ingest",
    "main",
    "run_analysis",
    "run_simstudy",
    "write_dataset_csv",
]

EXPECTED_HEADER = ["study", "date", "treatment", "events", "total"]
REPORT_FORMAT_VERSION = "1"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    """Bad flags or an inconsistent run configuration."""


class IngestError(DatasetError):
    """Malformed input file; carries the offending line number."""


@dataclass(frozen=True)
class RunConfig:
    """Everything one analysis run needs."""

    input: Path
    model: str
    out: Path
    baseline: Optional[str] = None
    time_varying: tuple[str, ...] = ()
    chains: int = 4
    iters: int = 20_000
    burnin: int = 10_000
    thin: int = 10
    seed: int = 0
    grid: int = 101
    write_samples: bool = False
    report_format_version: str = REPORT_FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.model not in ("bnma", "meta", "tbnma"):
            raise UsageError(f"unknown model kind {self.model!r}")
        if self.model in ("meta", "tbnma") and not self.time_varying:
            raise UsageError(f"{self.model} requires a nonempty --time-varying set")
        if self.model == "bnma" and self.time_varying:
            raise UsageError("bnma does not accept --time-varying treatments")
        if self.grid < 2:
            raise UsageError("--grid must be >= 2")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            n_chains=self.chains,
            n_iter=self.iters,
            burn_in=self.burnin,
            thin=self.thin,
            seed=self.seed,
        )


def ingest(path: str | Path) -> Dataset:
    """Parse and validate an arm-level CSV file.

    The header must be exactly ``study,date,treatment,events,total``; dates
    are ISO ``YYYY-MM-DD`` or ``YYYY-MM`` (month precision imputes day 15).
    Row-level problems are reported with their line number.
    """
    path = Path(path)
    records: list[ArmRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if [h.strip() for h in header] != EXPECTED_HEADER:
            raise IngestError(
                f"{path}: bad header {header!r}, expected {','.join(EXPECTED_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise IngestError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            study, date_text, treatment, events, total = (c.strip() for c in row)
            try:
                record = ArmRecord(
                    study=study,
                    date=impute_date(date_text),
                    treatment=treatment,
                    events=int(events),
                    total=int(total),
                )
            except (DatasetError, ValueError) as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            if record.events > record.total:
                raise IngestError(
                    f"{path}:{lineno}: events {record.events} > total {record.total}"
                )
            records.append(record)
    return build_dataset(records)


def write_dataset_csv(data: Dataset, path: str | Path) -> Path:
    """Write a dataset back out in the ingestion format."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPECTED_HEADER)
        for s in data.studies:
            for a in s.arms:
                writer.writerow(
                    [s.key, s.date.isoformat(), data.label_of(a.treatment),
                     a.successes, a.size]
                )
    return path


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _resolve_spec(data: Dataset, config: RunConfig) -> tuple[Dataset, ModelSpec]:
    summary = network_summary(data)
    override = None if config.baseline is None else data.index_of(config.baseline)
    baseline = select_baseline(summary, override)
    data = data.with_baseline(baseline)
    tv = frozenset(data.index_of(lab) for lab in config.time_varying)
    spec = ModelSpec(
        kind=ModelKind(config.model), baseline=baseline, time_varying=tv
    )
    return data, spec


def _curve_treatments(data: Dataset, spec: ModelSpec) -> list[int]:
    # Time-varying treatments carry the curves; the constant-effect model
    # reports flat curves for every non-baseline treatment instead.
    if spec.time_varying:
        return sorted(spec.time_varying)
    return [k for k in range(data.K) if k != spec.baseline]


def _write_curves_csv(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["treatment", "time", "mean", "q025", "q50", "q975"])
        for row in rows:
            writer.writerow(row)


def _summary_json(
    data: Dataset,
    spec: ModelSpec,
    config: RunConfig,
    samples: PosteriorSamples,
    diagnostics: dict,
) -> dict:
    effects = []
    for k in range(data.K):
        eff = posterior.end_of_period_effect(samples, spec, data, k)
        effects.append(
            {
                "label": eff.label,
                "mean": float(eff.mean),
                "q025": float(eff.q025),
                "q975": float(eff.q975),
                "prob_below": float(eff.prob_below),
                "prob_above": float(eff.prob_above),
            }
        )
    warnings = [
        f"split R-hat {d['rhat']:.3f} > 1.05 for {name}"
        for name, d in diagnostics.items()
        if d["rhat"] is not None and d["rhat"] > 1.05
    ]
    warnings.extend(
        f"degenerate chain for {name}"
        for name, d in diagnostics.items()
        if d["degenerate"]
    )
    return {
        "report_format_version": config.report_format_version,
        "created_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        "model": spec.kind.value,
        "baseline": data.label_of(spec.baseline),
        "seed": config.seed,
        "config": {
            "chains": config.chains,
            "iters": config.iters,
            "burnin": config.burnin,
            "thin": config.thin,
            "grid": config.grid,
            "time_varying": sorted(data.label_of(k) for k in spec.time_varying),
        },
        "treatments": [t.label for t in data.treatments],
        "time_origin": float(data.time_origin),
        "time_scale": float(data.time_scale),
        "end_of_period": effects,
        "diagnostics": {
            name: {
                "rhat": None if d["rhat"] is None else float(d["rhat"]),
                "ess": None if d["ess"] is None else float(d["ess"]),
                "degenerate": bool(d["degenerate"]),
            }
            for name, d in diagnostics.items()
        },
        "acceptance": {
            name: float(np.mean(rates))
            for name, rates in samples.acceptance.items()
        },
        "warnings": warnings,
    }


def validate_summary(summary: dict) -> None:
    """Validate a summary report against the shipped schema."""
    schema = json.loads(
        resources.files("tnma").joinpath("schemas/summary.schema.json").read_text()
    )
    jsonschema.validate(summary, schema)


def run_analysis(config: RunConfig) -> dict:
    """Fit one model and write the report files; returns the summary dict."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    data, spec = _resolve_spec(ingest(config.input), config)
    samples = run_sampler(data, spec, config.sampler_config())
    diagnostics = samples.diagnostics()

    summary = _summary_json(data, spec, config, samples, diagnostics)
    validate_summary(summary)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    grid = posterior.default_grid(config.grid)
    curve_rows = []
    curves = []
    for k in _curve_treatments(data, spec):
        curve = posterior.effect_curve(samples, spec, data, k, grid)
        curves.append((spec.kind.value, curve))
        for j in range(len(grid)):
            curve_rows.append(
                (
                    curve.label,
                    _fmt(curve.years[j]),
                    _fmt(curve.mean[j]),
                    _fmt(curve.q025[j]),
                    _fmt(curve.q50[j]),
                    _fmt(curve.q975[j]),
                )
            )
    _write_curves_csv(out / "curves.csv", curve_rows)

    if config.write_samples:
        _write_samples_csv(out / "samples.csv", samples)

    if curves:
        plots.plot_effect_curves(
            curves, out / "curves.png", title="effect vs baseline over time"
        )
    endpoint_rows = posterior.compare_models([samples], data)
    if endpoint_rows:
        plots.plot_endpoint_comparison(
            endpoint_rows, out / "effects.png", title="end-of-period effects"
        )
    return summary


def _write_samples_csv(path: Path, samples: PosteriorSamples) -> None:
    names = samples.monitored_scalars()
    columns = {name: samples.scalar(name) for name in names}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "draw"] + names)
        for c in range(samples.n_chains):
            for i in range(samples.n_kept):
                writer.writerow(
                    [c, i] + [_fmt(columns[name][c, i]) for name in names]
                )


def run_simstudy(
    skeleton_path: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    chains: int = 4,
    iters: int = 20_000,
    burnin: int = 10_000,
    thin: int = 10,
    grid_size: int = 101,
) -> dict:
    """Run the 3-scenario x 3-model comparison grid on a skeleton network.

    The most common treatment receives the injected time-varying effect and
    the second most common serves as the baseline.  Per scenario the report
    records, for each model, the RMSE of the posterior-mean curve against the
    generated truth, the 95% band's pointwise coverage, its mean width, and
    the worst split R-hat.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    skeleton = ingest(skeleton_path)
    counts = network_summary(skeleton).occurrence
    order = sorted(range(skeleton.K), key=lambda k: (-counts[k], k))
    target, baseline = order[0], order[1]
    skeleton = skeleton.with_baseline(baseline)

    grid = posterior.default_grid(grid_size)
    years = np.asarray(skeleton.to_years(grid), dtype=float)
    scenarios = simulate.default_scenarios(target, seed=seed)
    report: dict = {
        "seed": seed,
        "skeleton": str(skeleton_path),
        "target": skeleton.label_of(target),
        "baseline": skeleton.label_of(baseline),
        "scenarios": [],
    }
    table_rows: list[list] = []

    for s_idx, scenario in enumerate(scenarios):
        sim_data, truth = simulate.generate(skeleton, scenario)
        true_curve = np.asarray(truth.true_contrast(target, baseline, grid))
        scen_dir = out / f"scenario_{scenario.shape.value}"
        scen_dir.mkdir(exist_ok=True)
        write_dataset_csv(sim_data, scen_dir / "dataset.csv")

        scen_report = {"shape": scenario.shape.value, "models": {}}
        runs = []
        curves = []
        curve_rows = []
        for m_idx, kind in enumerate(("bnma", "meta", "tbnma")):
            tv = frozenset() if kind == "bnma" else frozenset({target})
            spec = ModelSpec(kind=ModelKind(kind), baseline=baseline, time_varying=tv)
            config = SamplerConfig(
                n_chains=chains,
                n_iter=iters,
                burn_in=burnin,
                thin=thin,
                seed=seed + 100 * s_idx + 10 * m_idx,
            )
            samples = run_sampler(sim_data, spec, config)
            runs.append(samples)
            curve = posterior.effect_curve(samples, spec, sim_data, target, grid)
            curves.append((kind, curve))
            for j in range(len(grid)):
                curve_rows.append(
                    (
                        kind,
                        curve.label,
                        _fmt(years[j]),
                        _fmt(curve.mean[j]),
                        _fmt(curve.q025[j]),
                        _fmt(curve.q50[j]),
                        _fmt(curve.q975[j]),
                    )
                )
            rmse = float(np.sqrt(np.mean((curve.mean - true_curve) ** 2)))
            covered = (curve.q025 <= true_curve) & (true_curve <= curve.q975)
            diagnostics = samples.diagnostics()
            rhats = [d["rhat"] for d in diagnostics.values() if d["rhat"] is not None]
            scen_report["models"][kind] = {
                "rmse": rmse,
                "coverage": float(np.mean(covered)),
                "mean_width": float(np.mean(curve.width)),
                "max_rhat": float(max(rhats)) if rhats else None,
                "degenerate": sorted(
                    name for name, d in diagnostics.items() if d["degenerate"]
                ),
                "rhat": {
                    name: None if d["rhat"] is None else float(d["rhat"])
                    for name, d in diagnostics.items()
                },
            }
            table_rows.append(
                [
                    scenario.shape.value,
                    kind,
                    _fmt(rmse),
                    _fmt(float(np.mean(covered))),
                    _fmt(float(np.mean(curve.width))),
                    _fmt(float(max(rhats))) if rhats else "",
                ]
            )

        with open(scen_dir / "curves.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["model", "treatment", "time", "mean", "q025", "q50", "q975"]
            )
            writer.writerows(curve_rows)
        endpoint_rows = posterior.compare_models(runs, sim_data)
        with open(scen_dir / "endpoints.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "treatment", "mean", "q025", "q975", "width"])
            for r in endpoint_rows:
                writer.writerow(
                    [
                        r["model"],
                        r["label"],
                        _fmt(r["mean"]),
                        _fmt(r["q025"]),
                        _fmt(r["q975"]),
                        _fmt(r["width"]),
                    ]
                )
        plots.plot_effect_curves(
            curves,
            scen_dir / "curves.png",
            truth=(years, true_curve),
            title=f"{scenario.shape.value} scenario: "
            f"{skeleton.label_of(target)} vs {skeleton.label_of(baseline)}",
        )
        plots.plot_endpoint_comparison(
            endpoint_rows,
            scen_dir / "endpoints.png",
            title=f"{scenario.shape.value} scenario: end-of-period effects",
        )
        report["scenarios"].append(scen_report)

    with open(out / "simstudy.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "simstudy.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["scenario", "model", "rmse", "coverage", "mean_width", "max_rhat"]
        )
        writer.writerows(table_rows)
    return report


# ---------------------------------------------------------------------------
# argparse front-end
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tnma", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="fit one model and write reports")
    run_p.add_argument("input", help="arm-level CSV file")
    run_p.add_argument("--model", required=True, choices=["bnma", "meta", "tbnma"])
    run_p.add_argument("--baseline", default=None, help="baseline treatment label")
    run_p.add_argument(
        "--time-varying",
        default="",
        help="comma-separated treatment labels with time-varying effects",
    )
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--samples", action="store_true", help="also write samples.csv")
    _add_sampler_flags(run_p)

    sim_p = sub.add_parser("simstudy", help="run the 3x3 simulation comparison")
    sim_p.add_argument("skeleton", help="skeleton CSV providing the network")
    sim_p.add_argument("--out", required=True, help="output directory")
    _add_sampler_flags(sim_p)
    return parser


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=20_000)
    p.add_argument("--burnin", type=int, default=10_000)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=101)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "run":
            tv = tuple(t.strip() for t in args.time_varying.split(",") if t.strip())
            config = RunConfig(
                input=Path(args.input),
                model=args.model,
                out=Path(args.out),
                baseline=args.baseline,
                time_varying=tv,
                chains=args.chains,
                iters=args.iters,
                burnin=args.burnin,
                thin=args.thin,
                seed=args.seed,
                grid=args.grid,
                write_samples=args.samples,
            )
            run_analysis(config)
        else:
            run_simstudy(
                args.skeleton,
                args.out,
                seed=args.seed,
                chains=args.chains,
                iters=args.iters,
                burnin=args.burnin,
                thin=args.thin,
                grid_size=args.grid,
            )
        return EXIT_OK
    except UsageError as exc:
        print(f"tnma: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"tnma: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"tnma: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"tnma: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
