"""Experiment orchestration: config files, single runs, grids and summaries."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .datasets import DatasetContainer, PartitionConfig, dirichlet_partition, file_hash
from .errors import ConfigError, FedSSLError
from .evaluation import KnnConfig, evaluate_all_clients, summarize, MetricsRecord
from .federation import (SCHEMES, ClientState, FedConfig, RoundPlan, ServerState,
                         run_round)
from .losses import METHODS, SslConfig
from .model import ARCHITECTURES, build_model, load_weights, save_weights

log = logging.getLogger(__name__)

DEFAULT_CLIENT_COUNTS = (5, 10, 20)


@dataclass
class ExperimentConfig:
    """Every knob of one grid cell. Defaults reproduce the reference protocol."""

    dataset: str = ""
    test_dataset: str = ""
    method: str = "barlow"
    scheme: str = "fedavg"
    n_clients: int = 5
    rounds: int = 20
    local_epochs: int = 20
    batch_size: Optional[int] = None  # None: 128, or 64 when n_clients == 20
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"
    temperature: float = 0.5
    alpha: float = 0.1
    mu: float = 0.001
    k: int = 20
    seed: int = 0
    output_dir: str = "runs/run"
    arch: str = "small"
    participation: float = 1.0
    share_running_stats: bool = True
    barlow_lambda: float = 5e-3
    vicreg_inv: float = 25.0
    vicreg_var: float = 25.0
    vicreg_cov: float = 1.0
    vicreg_gamma: float = 1.0
    tico_beta: float = 0.9
    tico_rho: float = 8.0
    eval_every_round: bool = False
    save_weights: bool = False
    parallel: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {', '.join(SCHEMES)}, got {self.scheme!r}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {', '.join(ARCHITECTURES)}, got {self.arch!r}")
        if self.n_clients < 1 or self.rounds < 1 or self.local_epochs < 1 or self.k < 1:
            raise ConfigError("n_clients, rounds, local_epochs and k must be positive")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 64 if self.n_clients == 20 else 128

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        out["batch_size"] = self.resolved_batch_size
        return out

    def overrides(self) -> dict:
        default = ExperimentConfig()
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) != getattr(default, f.name)}

    def ssl_config(self) -> SslConfig:
        return SslConfig(self.method, self.temperature, self.barlow_lambda, self.vicreg_inv,
                         self.vicreg_var, self.vicreg_cov, self.vicreg_gamma,
                         self.tico_beta, self.tico_rho)

    def fed_config(self) -> FedConfig:
        return FedConfig(self.scheme, self.mu, self.participation, self.share_running_stats)

    def round_plan(self) -> RoundPlan:
        return RoundPlan(local_epochs=self.local_epochs, batch_size=self.resolved_batch_size, lr=self.lr,
                         momentum=self.momentum, seed=self.seed, optimizer=self.optimizer)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# flat key = value config files

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, raw: str):
    """Parse a string value for config field ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = str(_FIELD_TYPES[key])
    raw = raw.strip()
    try:
        if "Optional[int]" in kind:
            return None if raw.lower() in ("", "none", "auto") else int(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce(key, raw)
    return values


def load_config(path, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'auto' if value is None else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# single run


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def _log_line(record: dict) -> str:
    return json.dumps(_json_safe(record), sort_keys=True) + "\n"


def cell_key(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": Path(cfg.dataset).stem or "dataset",
        "method": cfg.method,
        "scheme": cfg.scheme,
        "n_clients": cfg.n_clients,
        "seed": cfg.seed,
    }


def setup_clients(cfg: ExperimentConfig, train: DatasetContainer) -> tuple[ServerState, list[ClientState]]:
    """Partition the train split and give every client a copy of the initial model."""
    shards = dirichlet_partition(train.labels, PartitionConfig(cfg.n_clients, cfg.alpha, cfg.seed))
    spec = ARCHITECTURES[cfg.arch](cfg.method, in_channels=train.images.shape[1])
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1A17]))
    global_params = build_model(spec, init_rng)
    clients = [ClientState(i, global_params.snapshot(), train.subset(shard)) for i, shard in enumerate(shards)]
    return ServerState(global_params), clients


def _eval_records(cfg, clients, test, round_idx) -> list[dict]:
    records, _, _ = evaluate_all_clients(clients, test, KnnConfig(cfg.k), round_idx)
    key = cell_key(cfg)
    return [{"kind": "client_metrics", **key, **r.to_dict()} for r in records]


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one cell end to end and persist manifest, metrics log and weights.

    Writes ``manifest.json``, ``metrics.jsonl`` and ``config.txt`` to
    ``cfg.output_dir``; with ``save_weights`` also per-round global weights
    and final per-client weights under ``weights/``. Returns the manifest.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    started = time.time()
    manifest = {
        "config": cfg.resolved(),
        "overrides": cfg.overrides(),
        "code_version": __version__,
        "dataset_hash": file_hash(cfg.dataset) if cfg.dataset else None,
        "test_dataset_hash": file_hash(cfg.test_dataset) if cfg.test_dataset else None,
        "status": "running",
        "rounds": [],
    }

    def write_manifest():
        manifest["wall_clock_seconds"] = round(time.time() - started, 3)
        (out / "manifest.json").write_text(json.dumps(_json_safe(manifest), indent=2, sort_keys=True))

    def append(lines: Iterable[dict]):
        with metrics_path.open("a") as fh:
            for rec in lines:
                fh.write(_log_line(rec))

    round_idx = 0
    try:
        if not cfg.dataset or not cfg.test_dataset:
            raise ConfigError("both dataset and test_dataset paths are required")
        train = DatasetContainer.load(cfg.dataset)
        test = DatasetContainer.load(cfg.test_dataset)
        server, clients = setup_clients(cfg, train)
        plan, fed, ssl = cfg.round_plan(), cfg.fed_config(), cfg.ssl_config()
        weights_dir = out / "weights"
        if cfg.save_weights:
            weights_dir.mkdir(exist_ok=True)
        for round_idx in range(cfg.rounds):
            server = run_round(server, clients, plan, fed, ssl, parallel=cfg.parallel)
            summary = server.history[-1]
            manifest["rounds"].append(summary)
            append([{"kind": "round_summary", **cell_key(cfg), **summary}])
            if cfg.save_weights:
                save_weights(server.global_params, weights_dir / f"global_round{round_idx + 1:03d}.fsslw")
            last = round_idx == cfg.rounds - 1
            if cfg.eval_every_round or last:
                append(_eval_records(cfg, clients, test, round_idx + 1))
        if cfg.save_weights:
            for c in clients:
                snap = c.params.snapshot()
                snap.sample_count = c.n_samples
                save_weights(snap, weights_dir / f"final_client{c.client_id:03d}.fsslw")
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["failed_round"] = round_idx
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["traceback"] = traceback.format_exc()
        write_manifest()
        raise
    write_manifest()
    return manifest


def read_metrics(paths: Iterable) -> list[dict]:
    """Load records from metrics logs (files or run directories)."""
    records = []
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("metrics.jsonl")) if p.is_dir() else [p]
        for f in files:
            with f.open() as fh:
                records.extend(json.loads(line) for line in fh if line.strip())
    return records


def reevaluate(run_dir) -> tuple[list[MetricsRecord], dict, dict]:
    """Re-score the final per-client weights saved by a run."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    train = DatasetContainer.load(cfg.dataset)
    test = DatasetContainer.load(cfg.test_dataset)
    _, clients = setup_clients(cfg, train)
    for c in clients:
        path = run_dir / "weights" / f"final_client{c.client_id:03d}.fsslw"
        if not path.exists():
            raise ConfigError(f"missing {path}; rerun with save_weights = true")
        c.params = load_weights(path, c.params.arch)
    return evaluate_all_clients(clients, test, KnnConfig(cfg.k), cfg.rounds)


# ---------------------------------------------------------------------------
# grids


def cell_dirname(method: str, scheme: str, n_clients: int) -> str:
    return f"{method}_{scheme}_K{n_clients}"


def _run_cell(cfg: ExperimentConfig) -> dict:
    try:
        return run_experiment(cfg)
    except FedSSLError as exc:
        log.error("cell %s/%s/K=%d failed: %s", cfg.method, cfg.scheme, cfg.n_clients, exc)
        return {"status": "failed", "config": cfg.resolved(), "error": str(exc)}


def run_grid(
    base: ExperimentConfig,
    methods: Sequence[str] = METHODS,
    schemes: Sequence[str] = SCHEMES,
    client_counts: Sequence[int] = DEFAULT_CLIENT_COUNTS,
    out_dir=None,
    jobs: int = 1,
) -> list[dict]:
    """Run every (method, scheme, client count) cell and write the summary table."""
    root = Path(out_dir or base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    cells = [base.replace(method=m, scheme=s, n_clients=k, output_dir=str(root / cell_dirname(m, s, k)))
             for m in methods for s in schemes for k in client_counts]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            manifests = list(pool.map(_run_cell, cells))
    else:
        manifests = [_run_cell(c) for c in cells]
    records = read_metrics(root / cell_dirname(m, s, k) / "metrics.jsonl"
                           for m in methods for s in schemes for k in client_counts
                           if (root / cell_dirname(m, s, k) / "metrics.jsonl").exists())
    table = summary_table(records, methods, schemes, client_counts)
    (root / "summary.tsv").write_text(table_to_tsv(table, schemes, client_counts))
    (root / "summary.md").write_text(table_to_markdown(table, schemes, client_counts))
    return manifests


def final_client_records(records: Iterable[dict]) -> dict[tuple, list[dict]]:
    """Client metrics of each cell's last evaluated round, keyed by (dataset, method, scheme, n_clients)."""
    by_cell: dict[tuple, list[dict]] = {}
    for r in records:
        if r.get("kind") != "client_metrics":
            continue
        by_cell.setdefault((r["dataset"], r["method"], r["scheme"], r["n_clients"]), []).append(r)
    out = {}
    for key, recs in by_cell.items():
        last = max(r["round"] for r in recs)
        out[key] = sorted((r for r in recs if r["round"] == last), key=lambda r: r["client_id"])
    return out


def cell_stats(recs: Sequence[dict], metric: str = "weighted_f1") -> tuple[float, float]:
    values = np.array([r[metric] for r in recs], dtype=np.float64)
    return float(values.mean()), float(values.std())


def summary_table(records, methods, schemes, client_counts, metric: str = "weighted_f1") -> dict:
    """``{method: {(scheme, K): (mean, std) or None}}`` from raw client records."""
    cells = final_client_records(records)
    table = {}
    for m in methods:
        row = {}
        for s in schemes:
            for k in client_counts:
                matches = [v for (ds, mm, ss, kk), v in cells.items() if (mm, ss, kk) == (m, s, k)]
                row[(s, k)] = cell_stats(matches[0], metric) if matches else None
        table[m] = row
    return table


def _cell_text(cell) -> str:
    return "n/a" if cell is None else f"{cell[0]:.3f} ± {cell[1]:.3f}"


def table_to_tsv(table: dict, schemes, client_counts) -> str:
    header = ["method"] + [f"{s}@K={k}" for k in client_counts for s in schemes]
    lines = ["\t".join(header)]
    for m, row in table.items():
        lines.append("\t".join([m] + [_cell_text(row[(s, k)]) for k in client_counts for s in schemes]))
    return "\n".join(lines) + "\n"


def table_to_markdown(table: dict, schemes, client_counts) -> str:
    header = ["SSL method"] + [f"{s} (K={k})" for k in client_counts for s in schemes]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for m, row in table.items():
        lines.append("| " + " | ".join([m] + [_cell_text(row[(s, k)]) for k in client_counts for s in schemes]) + " |")
    return "\n".join(lines) + "\n"
