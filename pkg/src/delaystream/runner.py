"""Experiment plans: (method x delay x budget x seed) sweeps with persisted traces.

Output layout::

    <output_dir>/<run-id>/trace.csv
    <output_dir>/<run-id>/summary.json
    <output_dir>/aggregate.csv          one row per successful run
    <output_dir>/aggregate_stats.csv    mean and stdev per (method, d, C)
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from delaystream.methods import MethodSpec, run_method
from delaystream.metrics import compute_gap, compute_recovery, trace_csv, write_summary
from delaystream.model import ModelConfig
from delaystream.stream import GeneratorSpec, StreamConfig, ingest_file, open_stream

log = logging.getLogger(__name__)

SEED_OVERRIDE_ENV = "DELAYSTREAM_SEED_OVERRIDE"
AGGREGATE_FIELDS = ["method", "d", "C", "seed", "final_acc", "backward_transfer"]


class ConfigError(ValueError):
    pass


# -- config schema ----------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class _GeneratorModel(_Strict):
    variant: Literal["rotating_gaussians", "abrupt_shift", "label_burst", "file"] = "rotating_gaussians"
    num_classes: int | None = Field(default=None, ge=2)
    dim: int = Field(default=GeneratorSpec.dim, ge=2)
    noise: float = Field(default=GeneratorSpec.noise, ge=0)
    radius: float = Field(default=GeneratorSpec.radius, ge=0)
    omega: float = GeneratorSpec.omega
    shift_step: int = Field(default=GeneratorSpec.shift_step, ge=1)
    shift: float = GeneratorSpec.shift
    burst_length: int = Field(default=GeneratorSpec.burst_length, ge=1)
    path: str | None = None


class _StreamModel(_Strict):
    n: int = Field(ge=1)
    horizon: int | None = Field(default=None, ge=1)
    validation_fraction: float = Field(default=0.0, ge=0, lt=1)
    generator: _GeneratorModel = _GeneratorModel()


class _ModelModel(_Strict):
    arch: Literal["linear", "mlp"] = ModelConfig.arch
    hidden: int = Field(default=ModelConfig.hidden, ge=1)
    lr: float = Field(default=ModelConfig.lr, gt=0)
    momentum: float = Field(default=ModelConfig.momentum, ge=0, lt=1)
    weight_decay: float = Field(default=ModelConfig.weight_decay, ge=0)


class _BufferModel(_Strict):
    capacity: int = Field(default=4096, ge=1)


class _MethodModel(_Strict):
    variant: Literal["naive", "iwms", "pseudo_label", "tta"]
    composition: list[Literal["N", "R", "W"]] | None = Field(default=None, min_length=1)
    iwms_mode: Literal["two_stage", "single_shot"] = "two_stage"
    lam: float = Field(default=MethodSpec.lam, ge=0, le=1)
    eps: float = Field(default=MethodSpec.eps, ge=0)
    name: str | None = None


class _PlanModel(_Strict):
    stream: _StreamModel
    model: _ModelModel = _ModelModel()
    buffer: _BufferModel = _BufferModel()
    methods: list[_MethodModel] = Field(min_length=1)
    delays: list[int] = Field(default=[0], min_length=1)
    budgets: list[int] = Field(default=[1], min_length=1)
    seeds: list[int] = Field(default=[0], min_length=1)
    output_dir: str = "runs"


def _format_loc(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out or "<root>"


def _format_errors(exc: ValidationError) -> str:
    return "; ".join(f"{_format_loc(err['loc'])}: {err['msg']}" for err in exc.errors())


# -- plan -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentPlan:
    stream: StreamConfig
    model: ModelConfig = ModelConfig()
    methods: tuple[MethodSpec, ...] = ()
    delays: tuple[int, ...] = (0,)
    budgets: tuple[int, ...] = (1,)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    buffer_capacity: int = 4096

    def runs(self) -> list["RunSpec"]:
        return [
            RunSpec(self, replace(m, budget=c), d, s)
            for m in self.methods
            for d in self.delays
            for c in self.budgets
            for s in self.seeds
        ]


@dataclass(frozen=True)
class RunSpec:
    plan: ExperimentPlan = field(repr=False)
    method: MethodSpec
    d: int
    seed: int

    def stream_config(self) -> StreamConfig:
        return replace(self.plan.stream, d=self.d, seed=self.seed)

    def canonical(self) -> dict:
        return {
            "stream": asdict(self.stream_config()),
            "model": asdict(self.plan.model),
            "buffer_capacity": self.plan.buffer_capacity,
            "method": asdict(self.method),
        }

    @property
    def run_id(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def plan_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentPlan:
    try:
        cfg = _PlanModel.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    for i, d in enumerate(cfg.delays):
        if d < 0:
            raise ConfigError(f"delays[{i}]: label delay must be >= 0, got {d}")
    for i, c in enumerate(cfg.budgets):
        if c < 1:
            raise ConfigError(f"budgets[{i}]: budget must be >= 1, got {c}")

    g = cfg.stream.generator
    if g.variant == "file":
        if not g.path:
            raise ConfigError("stream.generator.path: required for the file variant")
        path = Path(g.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            gen = ingest_file(path, g.num_classes)
        except ValueError as exc:
            raise ConfigError(f"stream.generator.path: {exc}") from None
    else:
        if g.path is not None:
            raise ConfigError("stream.generator.path: only valid for the file variant")
        if cfg.stream.horizon is None:
            raise ConfigError("stream.horizon: required unless replaying a file")
        fields = g.model_dump(exclude={"path"})
        if fields["num_classes"] is None:
            fields["num_classes"] = GeneratorSpec.num_classes
        gen = GeneratorSpec(**fields)
        if gen.variant == "abrupt_shift" and gen.shift_step > cfg.stream.horizon:
            raise ConfigError("stream.generator.shift_step: must lie within the horizon")

    stream = StreamConfig(
        n=cfg.stream.n,
        d=0,
        horizon=cfg.stream.horizon,
        generator=gen,
        validation_fraction=cfg.stream.validation_fraction,
    )
    methods = []
    for i, m in enumerate(cfg.methods):
        spec = MethodSpec(
            variant=m.variant,
            composition=tuple(m.composition) if m.composition else None,
            iwms_mode=m.iwms_mode,
            lam=m.lam,
            eps=m.eps,
            name=m.name,
        )
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"methods[{i}].{exc}") from None
        methods.append(spec)
    output_dir = Path(cfg.output_dir)
    if base_dir is not None and not output_dir.is_absolute():
        output_dir = base_dir / output_dir
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError("methods: method labels must be unique; set 'name' to disambiguate")
    return ExperimentPlan(
        stream=stream,
        model=ModelConfig(**cfg.model.model_dump()),
        methods=tuple(methods),
        delays=tuple(cfg.delays),
        budgets=tuple(cfg.budgets),
        seeds=tuple(cfg.seeds),
        output_dir=str(output_dir),
        buffer_capacity=cfg.buffer.capacity,
    )


def parse_config(path: str | Path) -> ExperimentPlan:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return plan_from_dict(raw, base_dir=path.parent)


def apply_seed_override(plan: ExperimentPlan, environ=os.environ) -> ExperimentPlan:
    value = environ.get(SEED_OVERRIDE_ENV)
    if value is None:
        return plan
    try:
        seed = int(value)
    except ValueError:
        raise ConfigError(f"{SEED_OVERRIDE_ENV}: expected an integer, got {value!r}") from None
    return replace(plan, seeds=(seed,))


# -- execution --------------------------------------------------------------


def execute_run(run: RunSpec, output_dir: str | Path, overwrite: bool = False) -> dict:
    """Run one configuration and persist its trace and summary. Never raises for run errors."""
    run_dir = Path(output_dir) / run.run_id
    summary_path = run_dir / "summary.json"
    if summary_path.exists() and not overwrite:
        previous = json.loads(summary_path.read_text(encoding="utf-8"))
        if previous.get("status") == "ok":
            log.info("skipping existing run %s", run.run_id)
            return previous
    run_dir.mkdir(parents=True, exist_ok=True)
    base = {"run_id": run.run_id, "method": run.method.label, "d": run.d, "C": run.method.budget, "seed": run.seed}
    try:
        stream = open_stream(run.stream_config())
        result = run_method(stream, run.method, run.plan.model, run.plan.buffer_capacity)
    except Exception as exc:  # recorded, the plan continues
        log.error("run %s failed: %s", run.run_id, exc)
        summary = {**base, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
        write_summary(summary, summary_path)
        return summary
    (run_dir / "trace.csv").write_text(trace_csv(result.trace), encoding="utf-8")
    summary = {**base, **result.trace.summary(), "status": "ok", "config": run.canonical()}
    write_summary(summary, summary_path)
    log.info("run %s %s d=%d C=%d seed=%d acc=%.4f", run.run_id, base["method"], run.d, base["C"], run.seed, summary["final_online_acc"])
    return summary


def _execute(args):
    return execute_run(*args)


def aggregate_rows(summaries: list[dict]) -> list[dict]:
    return [
        {
            "method": s["method"],
            "d": s["d"],
            "C": s["C"],
            "seed": s["seed"],
            "final_acc": s["final_online_acc"],
            "backward_transfer": s["backward_transfer"],
        }
        for s in summaries
        if s.get("status") == "ok"
    ]


def aggregate_stats(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["d"], r["C"]), []).append(r)

    def mean_std(values):
        values = [v for v in values if v is not None]
        if not values:
            return None, None
        return statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0

    out = []
    for (method, d, c), rs in groups.items():
        acc_mean, acc_std = mean_std([r["final_acc"] for r in rs])
        bt_mean, bt_std = mean_std([r["backward_transfer"] for r in rs])
        out.append(
            {
                "method": method,
                "d": d,
                "C": c,
                "runs": len(rs),
                "final_acc_mean": acc_mean,
                "final_acc_std": acc_std,
                "backward_transfer_mean": bt_mean,
                "backward_transfer_std": bt_std,
            }
        )
    return out


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: "" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fields})


@dataclass
class PlanResult:
    summaries: list[dict]
    rows: list[dict]
    stats: list[dict]

    @property
    def failures(self) -> list[dict]:
        return [s for s in self.summaries if s.get("status") != "ok"]


def run_plan(plan: ExperimentPlan, workers: int = 1, overwrite: bool = False, output_dir: str | Path | None = None) -> PlanResult:
    out = Path(output_dir if output_dir is not None else plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(r, out, overwrite) for r in plan.runs()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_execute, jobs))
    else:
        summaries = [_execute(j) for j in jobs]
    rows = aggregate_rows(summaries)
    stats = aggregate_stats(rows)
    _write_csv(out / "aggregate.csv", rows, AGGREGATE_FIELDS)
    _write_csv(out / "aggregate_stats.csv", stats, list(stats[0]) if stats else ["method", "d", "C", "runs"])
    return PlanResult(summaries, rows, stats)


# -- report -----------------------------------------------------------------


def load_summaries(output_dir: str | Path) -> list[dict]:
    out = []
    for path in sorted(Path(output_dir).glob("*/summary.json")):
        out.append(json.loads(path.read_text(encoding="utf-8")))
    return out


def gap_report(summaries: list[dict], baseline: str = "naive") -> tuple[list[str], list[dict]]:
    """Mean accuracy per (method, C, d) with the delay gap and recovery columns.

    The gap at delay d is ``baseline(d) - baseline(0)``; recovery is reported
    for every method at every nonzero delay where the gap is defined.
    """
    rows = aggregate_rows(summaries)
    acc: dict[tuple, list[float]] = {}
    for r in rows:
        acc.setdefault((r["method"], r["C"], r["d"]), []).append(r["final_acc"])
    mean = {k: statistics.fmean(v) for k, v in acc.items()}
    delays = sorted({k[2] for k in mean})
    nonzero = [d for d in delays if d != 0]
    fields = ["method", "C"] + [f"acc_{d}" for d in delays]
    for d in nonzero:
        fields += [f"G_{d}", f"R_{d}"]
    table = []
    for method, c in sorted({(k[0], k[1]) for k in mean}):
        row = {"method": method, "C": c}
        for d in delays:
            row[f"acc_{d}"] = mean.get((method, c, d))
        for d in nonzero:
            base_d, base_0 = mean.get((baseline, c, d)), mean.get((baseline, c, 0))
            gap = compute_gap(base_d, base_0) if base_d is not None and base_0 is not None else None
            row[f"G_{d}"] = gap
            own = mean.get((method, c, d))
            row[f"R_{d}"] = (
                compute_recovery(own, base_d, gap) if gap is not None and own is not None else None
            )
        table.append(row)
    return fields, table


def write_report(output_dir: str | Path) -> tuple[list[str], list[dict]]:
    summaries = load_summaries(output_dir)
    fields, table = gap_report(summaries)
    _write_csv(Path(output_dir) / "report.csv", table, fields)
    return fields, table
