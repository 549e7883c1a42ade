from __future__ import annotations

import functools
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, TypeVar

import typer
from termcolor import cprint

from . import active, adl, datagen, dfs, harness, models, vilsurrogate
from .errors import DamError, InvalidDataError
from .harness import ExperimentConfig, RunRecord

app = typer.Typer(help="Source-free active domain adaptation with a prompted surrogate.")

_Func = TypeVar("_Func", bound=Callable[..., Any])

CONFIG_OPTION = typer.Option(None, "--config", help="TOML config file.")
SET_OPTION = typer.Option([], "--set", help="Dotted override, e.g. --set adl.epochs=10.")


def _reports_errors(func: _Func) -> _Func:
    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except DamError as exc:
            cprint(f"error: {exc}", "red")
            raise typer.Exit(code=2) from exc

    return wrapper  # type: ignore[return-value]


def _load(config: Optional[Path], overrides: Sequence[str], **flags: Any) -> ExperimentConfig:
    extra = [f"{key}={json.dumps(val)}" for key, val in flags.items() if val is not None]
    return harness.load_experiment_config(config, [*overrides, *extra])


def _finish(records: Sequence[RunRecord], out_dir: Path, axes: Sequence[str]) -> None:
    paths = harness.report(records, out_dir, axes)
    print(paths["summary"].read_text(), end="")
    incomplete = [record for record in records if not record.complete]
    if incomplete:
        cprint(f"{len(incomplete)} of {len(records)} runs did not complete", "red")
        raise typer.Exit(code=1)
    cprint(f"{len(records)} runs complete; report in {out_dir}", "green")


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v"),
    quiet: bool = typer.Option(False, "--quiet", "-q"),
) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


@app.command()
@_reports_errors
def gen_data(
    out_dir: Path,
    seed: int = 0,
    config: Optional[Path] = CONFIG_OPTION,
    overrides: List[str] = SET_OPTION,
) -> None:
    """Write source, target and foundation datasets as CSV."""
    spec = _load(config, overrides).dataset
    pair = datagen.generate_domain_pair(
        spec.classes,
        spec.dim,
        spec.n_source,
        spec.n_target,
        spec.shift,
        seed,
        n_foundation=spec.n_foundation or None,
        separation=spec.separation,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for ds in pair:
        datagen.save_dataset(ds, out_dir / f"{ds.domain_tag}.csv")
    cprint(f"wrote {', '.join(ds.domain_tag for ds in pair)} to {out_dir}", "green")


@app.command()
@_reports_errors
def train_source(
    source: Path,
    out: Path,
    seed: int = 0,
    config: Optional[Path] = CONFIG_OPTION,
    overrides: List[str] = SET_OPTION,
) -> None:
    """Train the source classifier on a labeled source dataset."""
    cfg = replace(_load(config, overrides).source, seed=seed)
    model = models.train_source(datagen.load_dataset(source), cfg)
    models.save_model(model, out)
    cprint(f"source model saved to {out} (final loss {model.loss_history[-1]:.4f})", "green")


@app.command()
@_reports_errors
def query(
    model: Path,
    target: Path,
    out: Path,
    seed: int = 0,
    strategy: Optional[str] = None,
    rho: Optional[float] = None,
    config: Optional[Path] = CONFIG_OPTION,
    overrides: List[str] = SET_OPTION,
) -> None:
    """Select target samples with the raw source model and label them through the oracle."""
    cfg = _load(config, overrides, strategy=strategy, rho=rho)
    target_ds = datagen.load_dataset(target)
    result = active.query(cfg.strategy, models.load_model(model), target_ds.samples, cfg.rho, seed)
    oracle = datagen.make_oracle(target_ds, result.budget_used)
    labels = [oracle.query(index) for index in result.indices]
    out.write_text(
        json.dumps(
            {"strategy": result.strategy_name, "budget": result.budget_used, "indices": list(result.indices), "labels": labels},
            indent=2,
        )
        + "\n"
    )
    cprint(f"queried {result.budget_used} samples with {result.strategy_name}", "green")


@app.command()
@_reports_errors
def adapt(
    model: Path,
    target: Path,
    foundation: Path,
    queries: Path,
    out_dir: Path,
    seed: int = 0,
    config: Optional[Path] = CONFIG_OPTION,
    overrides: List[str] = SET_OPTION,
) -> None:
    """Tune prompts on the queried samples, then run alternating distillation."""
    cfg = _load(config, overrides)
    target_ds = datagen.load_dataset(target)
    foundation_ds = datagen.load_dataset(foundation)
    try:
        queried_data = json.loads(queries.read_text())
        queried = dict(zip(queried_data["indices"], queried_data["labels"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidDataError(f"{queries}: not a query file: {exc}") from exc
    enc = vilsurrogate.fit_encoder(foundation_ds, cfg.surrogate.feature_dim, seed)
    bank = vilsurrogate.init_anchors(
        vilsurrogate.make_prompt_bank(
            target_ds.num_classes, cfg.surrogate.feature_dim, cfg.surrogate.context_length, cfg.surrogate.tau, seed
        ),
        foundation_ds,
        enc,
    )
    indices = sorted(queried)
    bank = dfs.tune_prompts(
        bank, enc, target_ds.samples[indices], [queried[index] for index in indices], replace(cfg.dfs, seed=seed)
    )
    result = adl.adapt(models.load_model(model), bank, enc, target_ds.samples, queried, replace(cfg.adl, seed=seed))
    out_dir.mkdir(parents=True, exist_ok=True)
    models.save_model(result.model, out_dir / "target_model.txt")
    assert result.bank is not None
    vilsurrogate.save_prompt_bank(result.bank, out_dir / "prompt_bank.txt")
    (out_dir / "metrics.json").write_text(json.dumps(result.metrics, indent=2) + "\n")
    accuracy = harness.evaluate_target(result.model, target_ds)
    cprint(f"adapted model saved to {out_dir}; target accuracy {accuracy:.4f}", "green")


@app.command()
@_reports_errors
def run(
    variant: Optional[str] = None,
    rho: Optional[float] = None,
    strategy: Optional[str] = None,
    workers: int = 1,
    config: Optional[Path] = CONFIG_OPTION,
    overrides: List[str] = SET_OPTION,
) -> None:
    """Run the whole pipeline for every configured seed."""
    cfg = _load(config, overrides, variant=variant, rho=rho, strategy=strategy)
    _finish(harness.run_experiment(cfg, workers), Path(cfg.output_dir), ("variant",))


@app.command()
@_reports_errors
def ablate(
    variants: List[str] = typer.Option(list(harness.ABLATION_VARIANTS), "--variant"),
    workers: int = 1,
    config: Optional[Path] = CONFIG_OPTION,
    overrides: List[str] = SET_OPTION,
) -> None:
    """Run each variant over the configured seeds."""
    cfg = _load(config, overrides)
    _finish(harness.ablate(cfg, variants, workers), Path(cfg.output_dir), ("variant",))


@app.command()
@_reports_errors
def sweep(
    rhos: List[float] = typer.Option([0.01, 0.03, 0.05, 0.10], "--rho"),
    variants: List[str] = typer.Option(["full", "active_only_no_vil"], "--variant"),
    workers: int = 1,
    config: Optional[Path] = CONFIG_OPTION,
    overrides: List[str] = SET_OPTION,
) -> None:
    """Sweep the labeling ratio."""
    cfg = _load(config, overrides)
    records, _ = harness.sweep_budget(cfg, rhos, variants, workers)
    _finish(records, Path(cfg.output_dir), ("variant", "rho"))


@app.command()
@_reports_errors
def report(
    records_dir: Path,
    out_dir: Path,
    axis: List[str] = typer.Option(["variant"], "--axis"),
) -> None:
    """Aggregate previously written record files."""
    records = [harness.load_record(path) for path in sorted(records_dir.glob("*.json"))]
    _finish(records, out_dir, axis)
