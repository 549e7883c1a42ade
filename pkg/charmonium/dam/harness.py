"""Config-driven experiment runs: generate, train source, query, tune prompts, adapt, evaluate, report."""
from __future__ import annotations

import concurrent.futures
import dataclasses
import functools
import json
import logging
import math
import pathlib
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy
import numpy.typing
import pandas

from . import active, adl, datagen, dfs, models, vilsurrogate
from .adl import AdlConfig
from .config import Config, load_config
from .datagen import DomainDataset, ShiftSpec
from .dfs import DfsConfig
from .errors import DamError, InvalidDataError, InvalidInputError, InvalidParameterError, MixedConfigError
from .fingerprint import fingerprint, source_fingerprint
from .models import ClassifierModel, TrainConfig
from .summarize_diff import summarize_diffs
from .util import PathLike

logger = logging.getLogger("charmonium.dam")

VARIANTS = (
    "full",
    "no_LC",
    "no_LV",
    "baseline_frozen_prompts",
    "active_only_no_vil",
    "source_only",
    "zero_shot_surrogate",
)
# Variants that spend the labeling budget.
QUERYING_VARIANTS = frozenset({"full", "no_LC", "no_LV", "baseline_frozen_prompts", "active_only_no_vil"})
# Variants whose prompt context is trained at some stage.
PROMPT_TRAINING_VARIANTS = frozenset({"full", "no_LC", "no_LV"})
ABLATION_VARIANTS = ("baseline_frozen_prompts", "no_LC", "no_LV", "full")
TABLE_COLUMNS = (
    "variant",
    "rho",
    "seed",
    "final_accuracy",
    "source_accuracy",
    "surrogate_accuracy",
    "bayes_accuracy",
    "target_params",
    "prompt_params",
)


@dataclass
class DatasetSpec(Config):
    classes: int = 5
    dim: int = 16
    n_source: int = 2000
    n_target: int = 1000
    # 0 means as many as n_source
    n_foundation: int = 0
    separation: float = 3.0
    shift: ShiftSpec = field(default_factory=lambda: ShiftSpec(rotation_angle=math.pi / 5, scale=1.3))

    def validate(self) -> None:
        if self.classes < 2 or self.dim < 2:
            raise InvalidParameterError(f"need at least 2 classes and 2 dims, got {self.classes}, {self.dim}")
        if self.n_foundation < 0:
            raise InvalidParameterError(f"n_foundation must be >= 0, got {self.n_foundation}")
        if not self.separation > 0:
            raise InvalidParameterError(f"class separation must be positive, got {self.separation}")


@dataclass
class SurrogateConfig(Config):
    feature_dim: int = 64
    context_length: int = 16
    tau: float = 0.05

    def validate(self) -> None:
        if self.feature_dim < 1 or self.context_length < 1:
            raise InvalidParameterError("feature_dim and context_length must be >= 1")
        if not self.tau > 0:
            raise InvalidParameterError(f"temperature must be positive, got {self.tau}")


@dataclass
class ExperimentConfig(Config):
    """Everything a run depends on, besides the seed.

    Each stage's own ``seed`` field is replaced by the run seed.

    """

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    source: TrainConfig = field(default_factory=TrainConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    dfs: DfsConfig = field(default_factory=DfsConfig)
    adl: AdlConfig = field(default_factory=AdlConfig)
    strategy: str = "kcenter"
    rho: float = 0.05
    variant: str = "full"
    seeds: Tuple[int, ...] = tuple(range(20))
    output_dir: str = "runs"

    tuple_fields = frozenset({"seeds"})

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"unknown variant {self.variant!r}; expected one of {list(VARIANTS)}")
        if self.strategy not in active.available_strategies():
            raise InvalidParameterError(
                f"unknown query strategy {self.strategy!r}; expected one of {active.available_strategies()}"
            )
        if not 0 < self.rho < 1:
            raise InvalidParameterError(f"labeling ratio must lie in (0, 1), got {self.rho}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise InvalidParameterError(f"seeds must be non-empty and distinct, got {list(self.seeds)}")


def load_experiment_config(path: Optional[PathLike] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    text = pathlib.Path(path).read_text() if path is not None else ""
    return load_config(ExperimentConfig, text, overrides)


@dataclass
class RunRecord:
    config: Dict[str, Any]
    variant: str
    seed: int
    query_indices: List[int]
    dfs_history: List[Dict[str, float]]
    epoch_metrics: List[Dict[str, float]]
    source_accuracy: float
    bayes_accuracy: float
    final_accuracy: float
    surrogate_accuracy: Optional[float]
    target_params: int
    prompt_params: int
    wall_clock: float
    config_fingerprint: str
    code_stamp: str
    complete: bool = True
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunRecord:
        known = {fld.name for fld in dataclasses.fields(cls)}
        if set(data) - known:
            raise InvalidDataError(f"unknown record fields {sorted(set(data) - known)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidDataError(f"malformed run record: {exc}") from exc


def code_stamp() -> str:
    from . import __version__

    return f"{__version__}+{source_fingerprint()}"


def accuracy(predicted: numpy.typing.ArrayLike, labels: numpy.typing.ArrayLike) -> float:
    return float((numpy.asarray(predicted) == numpy.asarray(labels)).mean())


def evaluate_target(model: ClassifierModel, ds: DomainDataset) -> float:
    """Accuracy of ``model`` on ``ds``; any surrogate call on this path raises."""
    with vilsurrogate.surrogate_disabled():
        return accuracy(models.logits(model, ds.samples).argmax(axis=1), ds.labels)


def evaluate_surrogate(surrogate: vilsurrogate.ViLSurrogate, ds: DomainDataset) -> float:
    sims = vilsurrogate.similarities(surrogate.encoder, surrogate.bank, ds.samples)
    return accuracy(sims.argmax(axis=1), ds.labels)


def count_trainable_params(cfg: ExperimentConfig, variant: Optional[str] = None) -> Tuple[int, int]:
    """(target-model parameters, trainable prompt parameters) for ``variant``."""
    variant = cfg.variant if variant is None else variant
    if variant not in VARIANTS:
        raise InvalidParameterError(f"unknown variant {variant!r}")
    d, h, c = cfg.dataset.dim, cfg.source.hidden, cfg.dataset.classes
    target_params = d * h + h + h * c + c
    prompt_params = (
        cfg.surrogate.context_length * cfg.surrogate.feature_dim if variant in PROMPT_TRAINING_VARIANTS else 0
    )
    return target_params, prompt_params


def run_single(cfg: ExperimentConfig, seed: int) -> RunRecord:
    """One seed of ``cfg.variant``, end to end."""
    start = time.perf_counter()
    spec = cfg.dataset
    variant = cfg.variant
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
    target = pair.target
    mixture = datagen.target_mixture(spec.classes, spec.dim, spec.shift, spec.separation)
    bayes_accuracy = accuracy(datagen.bayes_classify(target.samples, mixture), target.labels)
    source_model = models.train_source(pair.source, replace(cfg.source, seed=seed))
    source_accuracy = evaluate_target(source_model, target)

    final_model = source_model
    query_indices: List[int] = []
    dfs_history: List[Dict[str, float]] = []
    epoch_metrics: List[Dict[str, float]] = []
    surrogate_accuracy: Optional[float] = None

    queried: Dict[int, int] = {}
    if variant in QUERYING_VARIANTS:
        result = active.query(cfg.strategy, source_model, target.samples, cfg.rho, seed)
        oracle = datagen.make_oracle(target, result.budget_used)
        queried = {index: oracle.query(index) for index in result.indices}
        query_indices = list(result.indices)

    def monitor(
        epoch: int, model: ClassifierModel, surrogate: Optional[vilsurrogate.ViLSurrogate]
    ) -> Dict[str, float]:
        metrics = {"target_accuracy": evaluate_target(model, target)}
        if surrogate is not None:
            metrics["surrogate_accuracy"] = evaluate_surrogate(surrogate, target)
        return metrics

    adl_cfg = replace(cfg.adl, seed=seed)
    if variant == "active_only_no_vil":
        tuned = adl.fine_tune_active(source_model, target.samples, queried, adl_cfg, monitor)
        final_model = tuned.model
        epoch_metrics = tuned.metrics
    elif variant != "source_only":
        enc = vilsurrogate.fit_encoder(pair.foundation, cfg.surrogate.feature_dim, seed)
        bank = vilsurrogate.make_prompt_bank(
            spec.classes, cfg.surrogate.feature_dim, cfg.surrogate.context_length, cfg.surrogate.tau, seed
        )
        bank = vilsurrogate.init_anchors(bank, pair.foundation, enc)
        if variant in ("full", "no_LV"):
            rows = numpy.array(query_indices, dtype=numpy.int64)
            bank = dfs.tune_prompts(
                bank,
                enc,
                target.samples[rows],
                [queried[index] for index in query_indices],
                replace(cfg.dfs, seed=seed),
                history=dfs_history,
            )
        if variant != "zero_shot_surrogate":
            adl_cfg = replace(adl_cfg, update_prompts=variant in ("full", "no_LC"))
            adapted = adl.adapt(source_model, bank, enc, target.samples, queried, adl_cfg, monitor)
            final_model = adapted.model
            epoch_metrics = adapted.metrics
            assert adapted.bank is not None
            bank = adapted.bank
        surrogate_accuracy = evaluate_surrogate(vilsurrogate.ViLSurrogate(enc, bank), target)

    if variant == "zero_shot_surrogate":
        assert surrogate_accuracy is not None
        final_accuracy = surrogate_accuracy
    else:
        final_accuracy = evaluate_target(final_model, target)
    target_params, prompt_params = count_trainable_params(cfg, variant)
    config_dict = cfg.to_dict()
    record = RunRecord(
        config=config_dict,
        variant=variant,
        seed=seed,
        query_indices=query_indices,
        dfs_history=dfs_history,
        epoch_metrics=epoch_metrics,
        source_accuracy=source_accuracy,
        bayes_accuracy=bayes_accuracy,
        final_accuracy=final_accuracy,
        surrogate_accuracy=surrogate_accuracy,
        target_params=target_params,
        prompt_params=prompt_params,
        wall_clock=time.perf_counter() - start,
        config_fingerprint=fingerprint(config_dict),
        code_stamp=code_stamp(),
    )
    logger.info(
        "run %s seed %d: accuracy %.4f (source %.4f, bayes %.4f) in %.1fs",
        variant, seed, final_accuracy, source_accuracy, bayes_accuracy, record.wall_clock,
    )
    return record


def _incomplete_record(cfg: ExperimentConfig, seed: int, exc: Exception, wall_clock: float) -> RunRecord:
    config_dict = cfg.to_dict()
    target_params, prompt_params = count_trainable_params(cfg)
    return RunRecord(
        config=config_dict,
        variant=cfg.variant,
        seed=seed,
        query_indices=[],
        dfs_history=[],
        epoch_metrics=[],
        source_accuracy=math.nan,
        bayes_accuracy=math.nan,
        final_accuracy=math.nan,
        surrogate_accuracy=None,
        target_params=target_params,
        prompt_params=prompt_params,
        wall_clock=wall_clock,
        config_fingerprint=fingerprint(config_dict),
        code_stamp=code_stamp(),
        complete=False,
        error=f"{type(exc).__name__}: {exc}",
    )


def _run_seed(cfg: ExperimentConfig, seed: int) -> RunRecord:
    start = time.perf_counter()
    try:
        return run_single(cfg, seed)
    except DamError as exc:
        logger.warning("run %s seed %d did not complete: %s", cfg.variant, seed, exc)
        return _incomplete_record(cfg, seed, exc, time.perf_counter() - start)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> List[RunRecord]:
    """One record per seed, in seed order. Seeds run in separate processes when ``workers > 1``."""
    if workers < 1:
        raise InvalidParameterError(f"workers must be >= 1, got {workers}")
    run = functools.partial(_run_seed, cfg)
    if workers == 1:
        return [run(seed) for seed in cfg.seeds]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, cfg.seeds))


def replay(record: RunRecord) -> RunRecord:
    """Re-run a record from its embedded config and seed."""
    return run_single(ExperimentConfig.from_dict(record.config), record.seed)


def ablate(
    cfg: ExperimentConfig, variants: Sequence[str] = ABLATION_VARIANTS, workers: int = 1
) -> List[RunRecord]:
    records: List[RunRecord] = []
    for variant in variants:
        records.extend(run_experiment(replace(cfg, variant=variant), workers))
    return records


def records_table(records: Sequence[RunRecord]) -> pandas.DataFrame:
    rows = [
        {**{column: getattr(record, column, None) for column in TABLE_COLUMNS}, "rho": record.config["rho"]}
        for record in records
    ]
    return pandas.DataFrame(rows, columns=list(TABLE_COLUMNS))


def summarize(records: Sequence[RunRecord], axes: Sequence[str] = ("variant",)) -> pandas.DataFrame:
    """Mean, standard deviation and seed count of the final accuracy per value of ``axes``."""
    grouped = records_table(records).groupby(list(axes), sort=True)["final_accuracy"]
    table = grouped.agg(["mean", "std", "count"]).reset_index()
    table["std"] = table["std"].fillna(0.0)
    return table


def sweep_budget(
    cfg: ExperimentConfig,
    rhos: Sequence[float],
    variants: Sequence[str] = ("full", "active_only_no_vil"),
    workers: int = 1,
) -> Tuple[List[RunRecord], pandas.DataFrame]:
    if not rhos:
        raise InvalidParameterError("the budget sweep needs at least one labeling ratio")
    if list(rhos) != sorted(rhos) or not all(0 < rho < 1 for rho in rhos):
        raise InvalidParameterError(f"labeling ratios must be ascending and lie in (0, 1), got {list(rhos)}")
    records: List[RunRecord] = []
    for rho in rhos:
        for variant in variants:
            records.extend(run_experiment(replace(cfg, rho=rho, variant=variant), workers))
    return records, summarize(records, ("variant", "rho"))


def save_record(record: RunRecord, path: PathLike) -> None:
    pathlib.Path(path).write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")


def load_record(path: PathLike) -> RunRecord:
    try:
        data = json.loads(pathlib.Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidDataError(f"{path}: not a run record: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidDataError(f"{path}: a run record must be a JSON object")
    return RunRecord.from_dict(data)


def _shared_config(record: RunRecord, axes: Sequence[str]) -> Dict[str, Any]:
    return {key: val for key, val in record.config.items() if key not in set(axes) | {"output_dir"}}


def check_same_config(records: Sequence[RunRecord], axes: Sequence[str]) -> None:
    """Raise MixedConfigError unless the records differ only along ``axes``."""
    reference = _shared_config(records[0], axes)
    reference_fingerprint = fingerprint(reference)
    for record in records[1:]:
        other = _shared_config(record, axes)
        if fingerprint(other) != reference_fingerprint:
            raise MixedConfigError(
                f"records for {record.variant} seed {record.seed} were run with a different config",
                summarize_diffs(reference, other),
            )


def _ordering_text(table: pandas.DataFrame, axes: Sequence[str]) -> str:
    ordered = table.sort_values("mean", ascending=False, kind="mergesort")
    parts = [
        "{} {:.4f} +- {:.4f} (n={})".format(
            "/".join(str(row[axis]) for axis in axes), row["mean"], row["std"], int(row["count"])
        )
        for _, row in ordered.iterrows()
    ]
    return " > ".join(parts)


def report(
    records: Sequence[RunRecord],
    out_dir: PathLike,
    axes: Sequence[str] = ("variant",),
) -> Dict[str, pathlib.Path]:
    """Write one JSON file per record, CSV tables, and a plain-text summary.

    Incomplete records are written but left out of the tables.

    """
    out = pathlib.Path(out_dir)
    complete = [record for record in records if record.complete]
    if not complete:
        raise InvalidInputError("cannot report without at least one complete record")
    check_same_config(complete, axes)

    (out / "records").mkdir(parents=True, exist_ok=True)
    for record in records:
        name = f"{record.variant}-rho{record.config['rho']}-seed{record.seed}.json"
        save_record(record, out / "records" / name)

    paths = {"runs": out / "runs.csv", "summary_table": out / "summary.csv", "summary": out / "summary.txt"}
    records_table(complete).to_csv(paths["runs"], index=False)
    table = summarize(complete, axes)
    table.to_csv(paths["summary_table"], index=False)

    param_counts = {record.variant: (record.target_params, record.prompt_params) for record in complete}
    lines = [f"config {fingerprint(_shared_config(complete[0], axes))} code {complete[0].code_stamp}"]
    lines.extend(
        f"trainable parameters ({variant}): target {target_params}, prompts {prompt_params}"
        for variant, (target_params, prompt_params) in sorted(param_counts.items())
    )
    lines.append(f"ordering: {_ordering_text(table, axes)}")
    skipped = len(records) - len(complete)
    if skipped:
        logger.warning("%d incomplete records left out of the tables", skipped)
        lines.append(f"incomplete records: {skipped}")
    paths["summary"].write_text("\n".join(lines) + "\n")
    logger.info("wrote report for %d records to %s", len(records), out)
    return paths
