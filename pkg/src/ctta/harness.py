"""Benchmark harness: config handling, experiment runs, exports.

A run pretrains one source model per seed, streams a corruption schedule
through each requested method, and records one metrics row per (method,
batch).  Everything is a pure function of (config, seeds): wall-clock
timings are segregated into their own file so the main exports are
byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import (
    AdapterConfig,
    MeanTeacherState,
    bn_adapt_step,
    init_adaptation_state,
    plain_mt_step,
    pretrain_source,
    psmt_step,
    source_only_step,
)
from .errors import ConfigError, NumericError
from .fisher import estimate_fisher_diag
from .network import Batch, NetworkSpec, forward
from .stream import (
    CORRUPTION_KINDS,
    SCHEDULE_MODES,
    SEVERITIES,
    DomainSchedule,
    SourceConfig,
    build_schedule,
    make_source,
    stream_batches,
)

METHODS = ("source", "bn_adapt", "plain_mt", "psmt")
METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = (
    "method", "seed", "segment_index", "domain_tag", "batch_index",
    "error_rate", "loss_ce", "loss_stu", "mask_ones_fraction", "peak_param_bytes",
)
EFFICIENCY_COLUMNS = ("method", "seed", "segment_index", "batch_index", "step_time_ms")


@dataclass
class ScheduleConfig:
    mode: str = "standard"
    kinds: tuple[str, ...] = CORRUPTION_KINDS
    severity: int = 5
    batches_per_domain: int = 10
    batch_size: int = 200
    num_rounds: int = 3
    shuffle_seed: int = 0

    def build(self) -> DomainSchedule:
        return build_schedule(self.mode, self.kinds, self.batches_per_domain,
                              self.batch_size, self.shuffle_seed, self.severity,
                              self.num_rounds)


@dataclass
class RunConfig:
    network: NetworkSpec = field(default_factory=lambda: NetworkSpec(8, (32,), 3, "batch-stat", "relu"))
    source: SourceConfig = field(default_factory=SourceConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.1
    output_dir: str = "runs/out"


@dataclass
class MetricsRecord:
    """One row per (method, batch); error rate is 1 - accuracy of the
    method's reported predictions against the pass-through labels."""

    method: str
    seed: int
    segment_index: int
    domain_tag: str
    batch_index: int
    error_rate: float
    loss_ce: float | None
    loss_stu: float | None
    mask_ones_fraction: float | None
    step_time_ms: float
    peak_param_bytes: int


@dataclass
class FisherSnapshot:
    """Teacher-side Fisher values captured at a segment boundary."""

    boundary_index: int
    domain_tag: str
    values: np.ndarray


@dataclass
class RunResult:
    records: list
    summary: dict
    fisher: dict          # (method, seed) -> list[FisherSnapshot]
    failures: list
    out_dir: Path | None = None


# ---------------------------------------------------------------------------
# config <-> dict


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["methods"] = list(cfg.methods)
    d["seeds"] = list(cfg.seeds)
    d["network"]["hidden_dims"] = list(cfg.network.hidden_dims)
    d["network"]["normalization"] = list(cfg.network.normalization)
    d["schedule"]["kinds"] = list(cfg.schedule.kinds)
    return d


def _merge_section(cls, defaults, overrides, violations, section):
    kwargs = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in overrides.items():
        if key not in known:
            violations.append(f"{section}: unknown field {key!r}")
            continue
        kwargs[key] = value
    merged = {**defaults, **kwargs}
    return merged


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from a (possibly partial) JSON-style dict.

    Every field has a default, so an empty dict is a valid config.  All
    violations are collected and reported together.
    """
    base = base or RunConfig()
    violations: list[str] = []
    known_top = {"network", "source", "schedule", "adapter", "methods", "seeds",
                 "pretrain_epochs", "pretrain_lr", "output_dir"}
    for key in data:
        if key not in known_top:
            violations.append(f"unknown top-level field {key!r}")

    net_kwargs = _merge_section(NetworkSpec, {
        "input_dim": base.network.input_dim,
        "hidden_dims": base.network.hidden_dims,
        "num_classes": base.network.num_classes,
        "normalization": base.network.normalization,
        "activation": base.network.activation,
    }, data.get("network", {}), violations, "network")
    network = base.network
    try:
        net_kwargs["hidden_dims"] = tuple(net_kwargs["hidden_dims"])
        if not isinstance(net_kwargs["normalization"], str):
            net_kwargs["normalization"] = tuple(net_kwargs["normalization"])
        network = NetworkSpec(**net_kwargs)
    except (ValueError, TypeError) as exc:
        violations.append(f"network: {exc}")

    source = base.source
    src_kwargs = _merge_section(SourceConfig, dataclasses.asdict(base.source),
                                data.get("source", {}), violations, "source")
    try:
        source = SourceConfig(**src_kwargs)
    except (ValueError, TypeError) as exc:
        violations.append(f"source: {exc}")

    sched_kwargs = _merge_section(ScheduleConfig, dataclasses.asdict(base.schedule),
                                  data.get("schedule", {}), violations, "schedule")
    sched_kwargs["kinds"] = tuple(sched_kwargs["kinds"])
    schedule = ScheduleConfig(**sched_kwargs)

    adapter_overrides = dict(data.get("adapter", {}))
    if "lambda" in adapter_overrides:  # config files may use the symbol-free name
        adapter_overrides["lam"] = adapter_overrides.pop("lambda")
    adapt_kwargs = _merge_section(AdapterConfig, dataclasses.asdict(base.adapter),
                                  adapter_overrides, violations, "adapter")
    adapter = AdapterConfig(**adapt_kwargs)

    cfg = RunConfig(
        network=network,
        source=source,
        schedule=schedule,
        adapter=adapter,
        methods=tuple(data.get("methods", base.methods)),
        seeds=tuple(int(s) for s in data.get("seeds", base.seeds)),
        pretrain_epochs=int(data.get("pretrain_epochs", base.pretrain_epochs)),
        pretrain_lr=float(data.get("pretrain_lr", base.pretrain_lr)),
        output_dir=str(data.get("output_dir", base.output_dir)),
    )
    violations.extend(validate_config(cfg))
    if violations:
        raise ConfigError(violations)
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return config_from_dict(data, base)


def validate_config(cfg: RunConfig) -> list[str]:
    """Return every violation found (empty list when the config is valid)."""
    v = []
    if not cfg.methods:
        v.append("methods: at least one method required")
    for m in cfg.methods:
        if m not in METHODS:
            v.append(f"methods: unknown method {m!r} (choose from {', '.join(METHODS)})")
    if not cfg.seeds:
        v.append("seeds: at least one seed required")
    a = cfg.adapter
    if not 0.0 <= a.xi <= 1.0:
        v.append(f"adapter.xi: must be in [0, 1], got {a.xi}")
    if not 0.0 <= a.delta < 1.0:
        v.append(f"adapter.delta: must be in [0, 1), got {a.delta}")
    if a.lam < 0:
        v.append(f"adapter.lambda: must be >= 0, got {a.lam}")
    if a.learning_rate <= 0:
        v.append(f"adapter.learning_rate: must be > 0, got {a.learning_rate}")
    if a.num_augs < 1:
        v.append(f"adapter.num_augs: must be >= 1, got {a.num_augs}")
    if a.aug_noise_scale < 0:
        v.append(f"adapter.aug_noise_scale: must be >= 0, got {a.aug_noise_scale}")
    if a.label_rule not in ("argmax-pseudo", "soft-expectation"):
        v.append(f"adapter.label_rule: unknown rule {a.label_rule!r}")
    if a.fisher_at not in ("current", "previous"):
        v.append(f"adapter.fisher_at: must be 'current' or 'previous', got {a.fisher_at!r}")
    if a.anchor not in ("previous", "source"):
        v.append(f"adapter.anchor: must be 'previous' or 'source', got {a.anchor!r}")
    if a.mask_scope not in ("global", "per-layer"):
        v.append(f"adapter.mask_scope: unknown scope {a.mask_scope!r}")
    if a.forward_mode not in ("train-stats", "frozen-stats"):
        v.append(f"adapter.forward_mode: must be 'train-stats' or 'frozen-stats', got {a.forward_mode!r}")
    if a.optimizer not in ("adam", "gd"):
        v.append(f"adapter.optimizer: must be 'adam' or 'gd', got {a.optimizer!r}")
    s = cfg.schedule
    if s.mode not in SCHEDULE_MODES:
        v.append(f"schedule.mode: unknown mode {s.mode!r}")
    for k in s.kinds:
        if k not in CORRUPTION_KINDS:
            v.append(f"schedule.kinds: unknown corruption {k!r}")
    if not s.kinds:
        v.append("schedule.kinds: empty corruption list")
    if s.severity not in SEVERITIES:
        v.append(f"schedule.severity: must be 1..5, got {s.severity}")
    if s.batches_per_domain < 1:
        v.append(f"schedule.batches_per_domain: must be >= 1, got {s.batches_per_domain}")
    if s.batch_size < 2:
        v.append(f"schedule.batch_size: must be >= 2, got {s.batch_size}")
    if s.num_rounds < 1:
        v.append(f"schedule.num_rounds: must be >= 1, got {s.num_rounds}")
    if cfg.pretrain_epochs < 0:
        v.append(f"pretrain_epochs: must be >= 0, got {cfg.pretrain_epochs}")
    if cfg.pretrain_lr <= 0:
        v.append(f"pretrain_lr: must be > 0, got {cfg.pretrain_lr}")
    if cfg.source.kind == "gaussian_blobs" and cfg.source.input_dim != cfg.network.input_dim:
        v.append(
            f"source.input_dim {cfg.source.input_dim} != network.input_dim {cfg.network.input_dim}")
    return v


# ---------------------------------------------------------------------------
# running


def _error_rate(probs, labels) -> float:
    return float(1.0 - (probs.argmax(axis=1) == labels).mean())


def _state_param_bytes(state: MeanTeacherState) -> int:
    total = 0
    for vec in (state.student, state.teacher, state.prev_student, state.source):
        if vec is not None:
            total += vec.nbytes
    return total


def _stream_for_seed(cfg: RunConfig, seed: int, heldout: Batch) -> list[Batch]:
    rng = np.random.default_rng([seed, 101, cfg.schedule.shuffle_seed])
    return list(stream_batches(cfg.schedule.build(), heldout, rng))


def _run_method(cfg: RunConfig, method: str, seed: int, theta0, batches: list[Batch],
                schedule: DomainSchedule):
    """Stream every batch through one method; returns (records, snapshots)."""
    records = []
    snapshots = []
    state = init_adaptation_state(theta0)
    rng = np.random.default_rng([seed, 202])
    spec = cfg.network
    adapter = cfg.adapter
    flat = 0
    for seg_index, (spec_c, num_batches) in enumerate(schedule.segments):
        last_batch = None
        for batch_index in range(num_batches):
            batch = batches[flat]
            flat += 1
            last_batch = batch
            if method == "source":
                t0 = time.perf_counter()
                probs = source_only_step(state, spec, batch)
                dt = (time.perf_counter() - t0) * 1000.0
                rec = MetricsRecord(method, seed, seg_index, batch.domain_tag, batch_index,
                                    _error_rate(probs, batch.labels), None, None, None,
                                    dt, _state_param_bytes(state))
            elif method == "bn_adapt":
                t0 = time.perf_counter()
                probs = bn_adapt_step(state, spec, batch)
                dt = (time.perf_counter() - t0) * 1000.0
                rec = MetricsRecord(method, seed, seg_index, batch.domain_tag, batch_index,
                                    _error_rate(probs, batch.labels), None, None, None,
                                    dt, _state_param_bytes(state))
            else:
                step = psmt_step if method == "psmt" else plain_mt_step
                probs, state, diag = step(state, spec, batch, adapter, rng)
                rec = MetricsRecord(method, seed, seg_index, batch.domain_tag, batch_index,
                                    _error_rate(probs, batch.labels), diag.loss_ce,
                                    diag.loss_stu, diag.mask_ones_fraction,
                                    diag.step_time_ms, diag.param_bytes)
            records.append(rec)
        if method in ("psmt", "plain_mt"):
            fd = estimate_fisher_diag(state.teacher, spec, last_batch, adapter.label_rule)
            snapshots.append(FisherSnapshot(seg_index, last_batch.domain_tag, fd.values))
    return records, snapshots


def run_experiment(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Execute the full (method x seed) grid and write all exports.

    A numeric failure in one (method, seed) run records a partial-run
    marker and leaves every other run's output intact.
    """
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    schedule = cfg.schedule.build()
    records: list[MetricsRecord] = []
    fisher: dict = {}
    failures: list[dict] = []
    for seed in cfg.seeds:
        src_cfg = replace(cfg.source, seed=seed)
        train_batches, heldout = make_source(src_cfg)
        theta0 = pretrain_source(cfg.network, train_batches, cfg.pretrain_epochs,
                                 cfg.pretrain_lr, seed)
        batches = _stream_for_seed(cfg, seed, heldout)
        for method in cfg.methods:
            try:
                recs, snaps = _run_method(cfg, method, seed, theta0, batches, schedule)
            except NumericError as exc:
                failures.append({"method": method, "seed": seed,
                                 "term": exc.term, "message": str(exc)})
                continue
            records.extend(recs)
            if snaps:
                fisher[(method, seed)] = snaps
    summary = summarize(records)
    result = RunResult(records, summary, fisher, failures)
    if out_dir is not None:
        result.out_dir = Path(out_dir)
        write_run_outputs(result, cfg)
    return result


def summarize(records: list[MetricsRecord]) -> dict:
    """Per-method / per-domain / overall mean error; recomputable from metrics.csv."""
    per_method: dict = {}
    for method in sorted({r.method for r in records}):
        rows = [r for r in records if r.method == method]
        domains: dict = {}
        for r in rows:
            domains.setdefault(r.domain_tag, []).append(r.error_rate)
        per_method[method] = {
            "overall_mean_error": float(np.mean([r.error_rate for r in rows])),
            "per_domain_mean_error": {d: float(np.mean(v)) for d, v in sorted(domains.items())},
            "num_records": len(rows),
        }
    return {"schema": METRICS_SCHEMA_VERSION, "per_method": per_method}


# ---------------------------------------------------------------------------
# file exports


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_run_outputs(result: RunResult, cfg: RunConfig):
    out = result.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, [
        (r.method, r.seed, r.segment_index, r.domain_tag, r.batch_index,
         r.error_rate, r.loss_ce, r.loss_stu, r.mask_ones_fraction, r.peak_param_bytes)
        for r in result.records
    ])
    _write_csv(out / "efficiency.csv", EFFICIENCY_COLUMNS, [
        (r.method, r.seed, r.segment_index, r.batch_index, r.step_time_ms)
        for r in result.records
    ])
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = {
        "artifact_version": __version__,
        "metrics_schema_version": METRICS_SCHEMA_VERSION,
        "metrics_columns": list(METRICS_COLUMNS),
        "config": config_to_dict(cfg),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.fisher:
        fdir = out / "fisher"
        fdir.mkdir(exist_ok=True)
        index_rows = []
        for (method, seed), snaps in sorted(result.fisher.items()):
            for snap in snaps:
                name = f"{method}_seed{seed}_boundary{snap.boundary_index:03d}.csv"
                _write_csv(fdir / name, ("param_index", "fisher_value"),
                           list(enumerate(snap.values.tolist())))
                index_rows.append((method, seed, snap.boundary_index, snap.domain_tag, name))
        _write_csv(fdir / "index.csv",
                   ("method", "seed", "boundary_index", "domain_tag", "file"), index_rows)
    if result.failures:
        with open(out / "partial_runs.json", "w", encoding="utf-8") as fh:
            json.dump(result.failures, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# protocols: ablation, sweeps, fisher report


ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))


def run_ablation(cfg: RunConfig, out_dir: str | Path | None = None):
    """The 2x2 toggle grid over (selective distillation, selective EMA)."""
    rows = []
    results = {}
    base_out = Path(out_dir) if out_dir is not None else None
    for sd, sema in ABLATION_GRID:
        run_cfg = replace(cfg, methods=("psmt",),
                          adapter=replace(cfg.adapter, enable_sd=sd, enable_sema=sema))
        sub = None if base_out is None else base_out / f"sd{int(sd)}_sema{int(sema)}"
        res = run_experiment(run_cfg, sub)
        mean_error = res.summary["per_method"]["psmt"]["overall_mean_error"]
        rows.append({"sd": sd, "sema": sema, "mean_error": mean_error})
        results[(sd, sema)] = res
    if base_out is not None:
        base_out.mkdir(parents=True, exist_ok=True)
        _write_csv(base_out / "ablation.csv", ("sd", "sema", "mean_error"),
                   [(int(r["sd"]), int(r["sema"]), r["mean_error"]) for r in rows])
    return rows, results


SWEEPABLE = {"lambda": "lam", "xi": "xi", "delta": "delta"}


def run_sweep(cfg: RunConfig, parameter: str, values, out_dir: str | Path | None = None):
    """One full run per parameter value, shared seeds; returns value -> mean error."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEPABLE)}, got {parameter!r}")
    values = list(values)
    if not values:
        raise ValueError("empty sweep values list")
    field_name = SWEEPABLE[parameter]
    rows = []
    results = {}
    base_out = Path(out_dir) if out_dir is not None else None
    for value in values:
        run_cfg = replace(cfg, methods=("psmt",),
                          adapter=replace(cfg.adapter, **{field_name: value}))
        sub = None if base_out is None else base_out / f"{parameter}_{value}"
        res = run_experiment(run_cfg, sub)
        mean_error = res.summary["per_method"]["psmt"]["overall_mean_error"]
        rows.append({"parameter": parameter, "value": value, "mean_error": mean_error})
        results[value] = res
    if base_out is not None:
        base_out.mkdir(parents=True, exist_ok=True)
        _write_csv(base_out / "sweep.csv", ("parameter", "value", "mean_error"),
                   [(r["parameter"], r["value"], r["mean_error"]) for r in rows])
    return rows, results


def topk_retention(a: np.ndarray, b: np.ndarray, frac: float) -> float:
    """|topk(a) & topk(b)| / k with k = frac of the parameter count."""
    if a.size != b.size:
        raise ValueError("snapshot lengths differ")
    k = max(1, int(round(frac * a.size)))
    top_a = set(np.argsort(-a, kind="stable")[:k].tolist())
    top_b = set(np.argsort(-b, kind="stable")[:k].tolist())
    return len(top_a & top_b) / k


def export_fisher_report(fisher: dict, out_dir: str | Path | None = None,
                         fractions=(0.01, 0.05)):
    """Consecutive-snapshot deltas and top-k retention per (method, seed).

    ``fisher`` maps (method, seed) to the ordered snapshot list of one run.
    """
    rows = []
    deltas = {}
    for (method, seed), snaps in sorted(fisher.items()):
        for prev, cur in zip(snaps, snaps[1:]):
            if prev.values.size != cur.values.size:
                raise ValueError("snapshot lengths differ")
            key = (method, seed, prev.boundary_index, cur.boundary_index)
            deltas[key] = cur.values - prev.values
            for frac in fractions:
                rows.append({
                    "method": method, "seed": seed,
                    "from_boundary": prev.boundary_index,
                    "to_boundary": cur.boundary_index,
                    "top_fraction": frac,
                    "retention": topk_retention(prev.values, cur.values, frac),
                })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "fisher_report.csv",
                   ("method", "seed", "from_boundary", "to_boundary", "top_fraction", "retention"),
                   [(r["method"], r["seed"], r["from_boundary"], r["to_boundary"],
                     r["top_fraction"], r["retention"]) for r in rows])
        for (method, seed, i, j), delta in sorted(deltas.items()):
            _write_csv(out / f"delta_{method}_seed{seed}_{i:03d}_to_{j:03d}.csv",
                       ("param_index", "fisher_delta"), list(enumerate(delta.tolist())))
    return rows, deltas


def load_fisher_snapshots(run_dir: str | Path) -> dict:
    """Rebuild the (method, seed) -> snapshots map from a run's fisher/ exports."""
    import csv as _csv

    fdir = Path(run_dir) / "fisher"
    index = fdir / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"no fisher snapshots under {fdir}")
    fisher: dict = {}
    with open(index, encoding="utf-8") as fh:
        for row in _csv.DictReader(fh):
            values = []
            with open(fdir / row["file"], encoding="utf-8") as sf:
                for srow in _csv.DictReader(sf):
                    values.append(float(srow["fisher_value"]))
            snap = FisherSnapshot(int(row["boundary_index"]), row["domain_tag"],
                                  np.asarray(values))
            fisher.setdefault((row["method"], int(row["seed"])), []).append(snap)
    for snaps in fisher.values():
        snaps.sort(key=lambda s: s.boundary_index)
    return fisher
