"""matchdid CLI - matched difference-in-differences from the command line."""

from __future__ import annotations

import logging
import math
import sys
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Annotated, Any

import click
import typer
from pydantic import BaseModel, ValidationError

from matchdid.config import (
    PanelColumns,
    RunConfig,
    load_environment,
    load_run_config,
    log_level,
)
from matchdid.errors import MatchDidError
from matchdid.estimators.registry import EstimateOptions, get_registry
from matchdid.matching import Replacement
from matchdid.panel import (
    CohortLabel,
    CohortShares,
    PanelDataset,
    PeriodSelector,
    format_cohort,
    is_never_treated,
    parse_cohort,
)

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="matchdid",
    help="Matching-based difference-in-differences for staggered adoption panels.",
    no_args_is_help=True,
)
estimate_app = typer.Typer(help="Estimate treatment effects on a panel CSV.", no_args_is_help=True)
simulate_app = typer.Typer(help="Run the Monte Carlo designs.", no_args_is_help=True)
app.add_typer(estimate_app, name="estimate")
app.add_typer(simulate_app, name="simulate")


# Shared options. Every default is None so that config-file values survive
# unless a flag is given explicitly.
InputOpt = Annotated[Path | None, typer.Option("--input", "-i", help="Long-format panel CSV")]
ConfigOpt = Annotated[Path | None, typer.Option("--config", "-c", help="TOML run config")]
CohortOpt = Annotated[str | None, typer.Option("--cohort", help="Target cohort, or 'all'")]
ComparisonOpt = Annotated[
    str | None, typer.Option("--comparison", help="Comparison cohort (default: never treated)")
]
MOpt = Annotated[int | None, typer.Option("--M", "-M", help="Matches per treated unit")]
JOpt = Annotated[int | None, typer.Option("--J", "-J", help="Neighbors for sigma^2 estimates")]
PeriodsOpt = Annotated[
    str | None, typer.Option("--periods", help="Period selector flags, e.g. '1,1,0,1'")
]
ScalingOpt = Annotated[
    str | None, typer.Option("--scaling", help="Covariate scaling: none or standardize")
]
WorkersOpt = Annotated[
    int | None, typer.Option("--workers", "-w", help="Threads or processes (MATCHDID_WORKERS)")
]
OutputOpt = Annotated[Path | None, typer.Option("--output", "-o", help="Write output to a file")]
FormatOpt = Annotated[str | None, typer.Option("--format", "-f", help="table or json")]
UnitColOpt = Annotated[str | None, typer.Option("--unit-col", help="Unit id column")]
PeriodColOpt = Annotated[str | None, typer.Option("--period-col", help="Period column")]
OutcomeColOpt = Annotated[str | None, typer.Option("--outcome-col", help="Outcome column")]
CohortColOpt = Annotated[str | None, typer.Option("--cohort-col", help="Cohort column")]
CovariatesOpt = Annotated[
    str | None, typer.Option("--covariates", help="Comma-separated covariate columns")
]
DiscreteOpt = Annotated[
    str | None, typer.Option("--discrete", help="Comma-separated discrete covariate columns")
]


@app.callback()
def _setup(
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging")] = False,
) -> None:
    """Load .env and configure logging once per invocation."""
    load_environment()
    logging.basicConfig(
        level=logging.DEBUG if verbose else log_level(),
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


@contextmanager
def _errors_to_exit() -> Iterator[None]:
    """Library errors exit 1, bad arguments exit 2, both with one line on stderr."""
    try:
        yield
    except MatchDidError as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(1) from e
    except (ValidationError, ValueError) as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(2) from e


def _split(value: str | None) -> list[str] | None:
    if value is None:
        return None
    return [part.strip() for part in value.split(",") if part.strip()]


def _config(config_path: Path | None, **overrides: Any) -> RunConfig:
    config = load_run_config(config_path)
    column_flags = {
        key: overrides.pop(key)
        for key in ("unit", "period", "outcome", "cohort_col", "covariates", "discrete")
        if key in overrides
    }
    if "cohort_col" in column_flags:
        column_flags["cohort"] = column_flags.pop("cohort_col")
    column_flags = {k: v for k, v in column_flags.items() if v is not None}
    if column_flags:
        overrides["columns"] = PanelColumns.model_validate(
            {**config.columns.model_dump(), **column_flags}
        )
    return config.merged(overrides)


def _target_cohort(config: RunConfig) -> CohortLabel | None:
    if config.cohort is None or config.cohort.strip().lower() == "all":
        return None
    cohort = parse_cohort(config.cohort)
    if is_never_treated(cohort):
        raise ValueError("target cohort must be a finite period")
    return cohort


def _load_panel(config: RunConfig) -> tuple[PanelDataset, PeriodSelector]:
    from matchdid.io import read_panel_csv

    if config.input is None:
        raise ValueError("an input panel is required (--input or 'input' in the config file)")
    panel = read_panel_csv(config.input, config.columns)
    logger.debug(f"[IO] loaded {config.input}: n={panel.n}, T={panel.T}, q={panel.q}")
    return panel, PeriodSelector.parse(config.periods, panel.T)


def _emit(
    command: str,
    config: RunConfig,
    text: str,
    results: Sequence[BaseModel | dict[str, Any]],
    diagnostics: dict[str, Any] | None = None,
) -> None:
    from matchdid.io import build_document

    if config.output_format == "json":
        output = build_document(command, config, results, diagnostics).model_dump_json(indent=2)
    else:
        output = text
    if config.output is not None:
        config.output.write_text(output + "\n")
        typer.echo(f"Wrote {config.output}")
    else:
        typer.echo(output)


@app.command("match")
def match_command(
    input: InputOpt = None,
    config: ConfigOpt = None,
    cohort: CohortOpt = None,
    comparison: ComparisonOpt = None,
    M: MOpt = None,
    scaling: ScalingOpt = None,
    without_replacement: Annotated[
        bool, typer.Option("--without-replacement", help="Each comparison unit used at most once")
    ] = False,
    workers: WorkersOpt = None,
    output: OutputOpt = None,
    output_format: FormatOpt = None,
    unit: UnitColOpt = None,
    period: PeriodColOpt = None,
    outcome: OutcomeColOpt = None,
    cohort_col: CohortColOpt = None,
    covariates: CovariatesOpt = None,
    discrete: DiscreteOpt = None,
) -> None:
    """Match treated cohorts to comparison units and print neighbor sets."""
    from matchdid.io import format_match
    from matchdid.matching import match

    with _errors_to_exit():
        run = _config(
            config, input=input, cohort=cohort, comparison=comparison, M=M, scaling=scaling,
            workers=workers, output=output, output_format=output_format, unit=unit,
            period=period, outcome=outcome, cohort_col=cohort_col,
            covariates=_split(covariates), discrete=_split(discrete),
        )
        panel, _ = _load_panel(run)
        options = EstimateOptions(
            cohort=_target_cohort(run),
            comparison=parse_cohort(run.comparison),
            M=run.M,
            scaling=run.scaling,
            workers=run.resolved_workers,
        )
        replacement: Replacement = "without" if without_replacement else "with"
        results = [
            match(panel, options.spec(c, replacement=replacement), workers=options.workers)
            for c in options.cohorts(panel)
        ]
        records = [
            {
                "cohort": format_cohort(r.spec.target_cohort),
                "comparison": format_cohort(r.spec.comparison_cohort),
                "M": r.spec.M,
                "replacement": r.spec.replacement,
                "neighbors": {
                    str(panel.unit_ids[i]) if panel.unit_ids else str(i): [
                        str(panel.unit_ids[j]) if panel.unit_ids else str(j) for j in js
                    ]
                    for i, js in r.neighbor_sets.items()
                },
                "usage": {
                    str(panel.unit_ids[j]) if panel.unit_ids else str(j): k
                    for j, k in r.usage_counts.items()
                },
            }
            for r in results
        ]
        _emit("match", run, "\n\n".join(format_match(r) for r in results), records)


def _estimate(name: str, run: RunConfig) -> None:
    from matchdid.io import format_estimates

    panel, lam = _load_panel(run)
    options = EstimateOptions(
        cohort=_target_cohort(run),
        comparison=parse_cohort(run.comparison),
        M=run.M,
        J=run.J,
        scaling=run.scaling,
        bias_correct=run.bias_correct,
        workers=run.resolved_workers,
    )
    reports = get_registry().get(name)(panel, lam, options)
    _emit(f"estimate {name}", run, format_estimates(reports), reports)


def _register_estimate_command(name: str) -> None:
    @estimate_app.command(name, help=f"Run the {name} estimator.")
    def command(
        input: InputOpt = None,
        config: ConfigOpt = None,
        cohort: CohortOpt = None,
        comparison: ComparisonOpt = None,
        M: MOpt = None,
        J: JOpt = None,
        periods: PeriodsOpt = None,
        scaling: ScalingOpt = None,
        bias_correct: Annotated[
            bool | None,
            typer.Option("--bias-correct/--no-bias-correct", help="Regression bias correction"),
        ] = None,
        workers: WorkersOpt = None,
        output: OutputOpt = None,
        output_format: FormatOpt = None,
        unit: UnitColOpt = None,
        period: PeriodColOpt = None,
        outcome: OutcomeColOpt = None,
        cohort_col: CohortColOpt = None,
        covariates: CovariatesOpt = None,
        discrete: DiscreteOpt = None,
    ) -> None:
        with _errors_to_exit():
            run = _config(
                config, input=input, cohort=cohort, comparison=comparison, M=M, J=J,
                periods=periods, scaling=scaling, bias_correct=bias_correct, workers=workers,
                output=output, output_format=output_format, unit=unit, period=period,
                outcome=outcome, cohort_col=cohort_col, covariates=_split(covariates),
                discrete=_split(discrete),
            )
            _estimate(name, run)


for _name in get_registry().names():
    _register_estimate_command(_name)


@app.command("decompose")
def decompose_command(
    input: InputOpt = None,
    config: ConfigOpt = None,
    M: MOpt = None,
    periods: PeriodsOpt = None,
    scaling: ScalingOpt = None,
    unweighted: Annotated[
        bool, typer.Option("--unweighted", help="Decompose the plain 2WFE instead")
    ] = False,
    workers: WorkersOpt = None,
    output: OutputOpt = None,
    output_format: FormatOpt = None,
    unit: UnitColOpt = None,
    period: PeriodColOpt = None,
    outcome: OutcomeColOpt = None,
    cohort_col: CohortColOpt = None,
    covariates: CovariatesOpt = None,
    discrete: DiscreteOpt = None,
) -> None:
    """Split the pooled matched 2WFE (or the plain 2WFE) into 2x2 comparisons.

    A component is forbidden when its comparison cohort s' is already treated at the
    component's post period t, that is t >= s'.
    """
    from matchdid.estimators.twfe import WeightVector, decompose_weighted_2wfe, pooled_matched_2wfe
    from matchdid.io import format_decomposition, format_estimates
    from matchdid.matching import match_all_cohorts

    with _errors_to_exit():
        run = _config(
            config, input=input, M=M, periods=periods, scaling=scaling, workers=workers,
            output=output, output_format=output_format, unit=unit, period=period,
            outcome=outcome, cohort_col=cohort_col, covariates=_split(covariates),
            discrete=_split(discrete),
        )
        panel, lam = _load_panel(run)
        if unweighted:
            decomposition = decompose_weighted_2wfe(panel, WeightVector.uniform(panel), lam)
            _emit("decompose", run, format_decomposition(decomposition), [decomposition])
            return
        results = match_all_cohorts(
            panel, M=run.M, scaling=run.scaling, workers=run.resolved_workers
        )
        report, decomposition = pooled_matched_2wfe(panel, results, lam)
        text = format_estimates([report]) + "\n\n" + format_decomposition(decomposition)
        _emit("decompose", run, text, [report, decomposition])


@app.command("weights")
def weights_command(
    shares: Annotated[
        str | None,
        typer.Option("--shares", help="Cohort shares, never-treated last, e.g. 0.3,0.3,0.4"),
    ] = None,
    cohorts: Annotated[
        str | None,
        typer.Option("--cohorts", help="Finite cohorts for the shares (default 2,3,...)"),
    ] = None,
    T: Annotated[int, typer.Option("--T", "-T", help="Number of periods")] = 4,
    periods: PeriodsOpt = None,
    staggered: Annotated[
        bool,
        typer.Option("--staggered", help="Use the staggered design's population and its plim bias"),
    ] = False,
    output: OutputOpt = None,
    output_format: FormatOpt = None,
) -> None:
    """Evaluate the plim weights of the pooled matched 2WFE for given cohort shares."""
    from matchdid.decomposition import plim_bias, plim_weights
    from matchdid.io import format_weights
    from matchdid.simulation.dgp import StaggeredDgpConfig, staggered_population

    with _errors_to_exit():
        run = _config(None, periods=periods, output=output, output_format=output_format)
        bias = None
        if staggered:
            design = StaggeredDgpConfig(T=T)
            population, att, trend = staggered_population(design)
            lam = PeriodSelector.parse(run.periods, T)
            bias = plim_bias(population, lam, att, trend)
        else:
            values = _split(shares)
            if not values:
                raise ValueError("--shares is required unless --staggered is given")
            labels = [parse_cohort(c) for c in _split(cohorts) or []] or [
                float(s) for s in range(2, len(values) + 1)
            ]
            population = CohortShares.from_sequence([float(v) for v in values], labels)
            lam = PeriodSelector.parse(run.periods, T)
        weights = plim_weights(population, lam)
        results: list[BaseModel | dict[str, Any]] = [weights.to_dict()]
        if bias is not None:
            results.append(asdict(bias))
        _emit("weights", run, format_weights(weights, bias), results)


@simulate_app.command("staggered")
def simulate_staggered(
    config: ConfigOpt = None,
    reps: Annotated[int | None, typer.Option("--reps", help="Replications (>= 100)")] = None,
    seed: Annotated[int | None, typer.Option("--seed", help="Master seed")] = None,
    n: Annotated[int | None, typer.Option("--n", help="Units per sample")] = None,
    workers: WorkersOpt = None,
    output: OutputOpt = None,
    output_format: FormatOpt = None,
) -> None:
    """Pooled matched 2WFE over the staggered design."""
    from matchdid.io import format_simulation
    from matchdid.simulation import StaggeredDgpConfig, run_staggered

    with _errors_to_exit():
        run = _config(
            config, reps=reps, seed=seed, n=n, workers=workers, output=output,
            output_format=output_format,
        )
        summary = run_staggered(
            StaggeredDgpConfig(n=run.n), run.reps, run.seed, workers=run.resolved_workers
        )
        _emit("simulate staggered", run, format_simulation(summary), [summary])


def _design(value: str | None) -> str | None:
    aliases = {"1": "constant-effect", "2": "heterogeneous"}
    if value is None:
        return None
    return aliases.get(value.strip(), value.strip())


@simulate_app.command("inference")
def simulate_inference(
    config: ConfigOpt = None,
    design: Annotated[
        str | None,
        typer.Option("--design", "-d", help="1 / constant-effect or 2 / heterogeneous"),
    ] = None,
    reps: Annotated[int | None, typer.Option("--reps", help="Replications (>= 100)")] = None,
    seed: Annotated[int | None, typer.Option("--seed", help="Master seed")] = None,
    n: Annotated[int | None, typer.Option("--n", help="Units per sample")] = None,
    M: MOpt = None,
    J: JOpt = None,
    alpha_table: Annotated[
        Path | None, typer.Option("--alpha-table", help="File of 'M q alpha' lines")
    ] = None,
    workers: WorkersOpt = None,
    output: OutputOpt = None,
    output_format: FormatOpt = None,
) -> None:
    """Pairwise matched DiD over an inference design, with theoretical SEs alongside."""
    from matchdid.inference import naive_variance_limit, seb_and_gap, theoretical_variance
    from matchdid.io import format_simulation, load_alpha_table
    from matchdid.simulation import InferenceDgpConfig, inference_moments, run_inference

    with _errors_to_exit():
        run = _config(
            config, design=_design(design), reps=reps, seed=seed, n=n, M=M, J=J,
            workers=workers, output=output, output_format=output_format,
        )
        table = load_alpha_table(alpha_table) if alpha_table is not None else None
        dgp = InferenceDgpConfig(design=run.design, n=run.n)
        summary = run_inference(
            dgp, run.reps, run.seed, M=run.M, J=run.J, workers=run.resolved_workers
        )
        moments = inference_moments(dgp)
        v = theoretical_variance(moments, run.M, table)
        v_seb, gap = seb_and_gap(moments, run.M, table)
        theory = {
            "theoretical_se": math.sqrt(v / run.n),
            "efficiency_bound_se": math.sqrt(v_seb / run.n),
            "efficiency_gap": gap,
            "naive_se_limit": math.sqrt(naive_variance_limit(moments, run.M, table) / run.n),
        }
        text = format_simulation(summary) + "\n" + "\n".join(
            f"{key}: {value:.4f}" for key, value in theory.items()
        )
        _emit("simulate inference", run, text, [summary], diagnostics=theory)


@app.command("replicate-nsw")
def replicate_nsw(
    experimental: Annotated[
        Path | None, typer.Option("--experimental", "-e", help="NSW experimental CSV")
    ] = None,
    cps: Annotated[Path | None, typer.Option("--cps", help="CPS comparison CSV")] = None,
    config: ConfigOpt = None,
    M: MOpt = None,
    J: JOpt = None,
    workers: WorkersOpt = None,
    output: OutputOpt = None,
    output_format: FormatOpt = None,
) -> None:
    """Run the six NSW specifications on the outcome and placebo windows."""
    from matchdid.io import format_specifications
    from matchdid.replication import build_panels, run_specifications

    with _errors_to_exit():
        run = _config(
            config, experimental=experimental, cps=cps, M=M, J=J, workers=workers,
            output=output, output_format=output_format,
        )
        if run.experimental is None or run.cps is None:
            raise ValueError("both --experimental and --cps are required")
        panels = build_panels(run.experimental, run.cps, run.nsw_columns)
        results = run_specifications(panels, M=run.M, J=run.J, workers=run.resolved_workers)
        _emit("replicate-nsw", run, format_specifications(results), results)


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        result = app(args=list(argv) if argv is not None else None, standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return 2
    except click.exceptions.Abort:
        typer.echo("Aborted.", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
