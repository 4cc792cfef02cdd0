"""Experiment orchestration: timed sequential runs, reports, comparisons, sweeps.

Latency is measured the way an edge deployment serves requests: single thread,
batch size one, monotonic clock, warm-up inferences excluded. A utilization
sampler runs concurrently so a CPU power model can price the run; externally
recorded power traces may replace the model. Reports serialize to JSON
(schema_version 1) and flatten to CSV.
"""

from __future__ import annotations

import csv
import json
import socket
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .converter import CbnetPipeline, cbnet_infer, label_hardness, pipeline_predictions
from .data import ImageSet, load_image_set, stratified_subset
from .earlyexit import ExitPolicy, DEFAULT_THRESHOLDS, infer_with_exit
from .energy import (
    POWER_PRESETS,
    UtilizationSampler,
    average_power,
    energy,
    ingest_power_trace,
    model_power,
)
from .errors import ConfigError, DataError
from .models import load_checkpoint
from .network import Network

MODEL_VARIANTS = ("lenet", "branchynet", "cbnet")
SCHEMA_VERSION = 1


def machine_id() -> dict:
    cpu = "unknown"
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    host = socket.gethostname()
    return {"hostname": host, "cpu": cpu, "id": f"{host}/{cpu}"}


@dataclass
class ExperimentConfig:
    dataset: str
    variant: str
    threshold: float | None = None          # branchynet entropy gate
    power_preset: str | None = "pi4"
    power_trace: str | None = None
    seed: int = 0
    subset_ratio: float = 1.0
    repeats: int = 3
    warmup: int = 50
    checkpoint_dir: str = "checkpoints"
    utilization_interval_s: float = 0.1

    def __post_init__(self):
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"variant must be one of {MODEL_VARIANTS}")
        if not 0 < self.subset_ratio <= 1:
            raise ConfigError(f"subset ratio {self.subset_ratio} outside (0, 1]")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.power_trace is None and self.power_preset not in POWER_PRESETS:
            raise ConfigError(f"power preset must be one of {sorted(POWER_PRESETS)}")
        if self.threshold is None:
            self.threshold = DEFAULT_THRESHOLDS.get(self.dataset, 0.05)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def checkpoint_path(ckpt_dir, dataset, name) -> Path:
    return Path(ckpt_dir) / dataset / f"{name}.ckpt"


def _load(ckpt_dir, dataset, name) -> Network:
    path = checkpoint_path(ckpt_dir, dataset, name)
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}; train it first")
    return load_checkpoint(path)


@dataclass
class BenchmarkReport:
    config: dict
    machine: dict
    accuracy_pct: float
    n_images: int
    latency_ms_mean: float
    latency_ms_std: float
    latency_ms_per_repeat: list
    total_time_s_mean: float
    total_time_s_per_repeat: list
    power_source: str
    average_power_w_mean: float
    average_power_w_per_repeat: list
    mean_utilization: float | None
    energy_j_mean: float
    energy_j_std: float
    energy_j_per_repeat: list
    exit_fractions: list | None = None
    timing_breakdown_ms: dict | None = None
    energy_savings_vs_baseline_pct: float | None = None
    baseline: str | None = None
    schema_version: int = SCHEMA_VERSION
    tool_version: str = __version__
    started_at: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkReport":
        return cls(**data)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BenchmarkReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _flatten(prefix, value, row):
    if isinstance(value, dict):
        for key, sub in value.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), sub, row)
    elif isinstance(value, (list, tuple)):
        row[prefix] = ";".join(str(v) for v in value)
    else:
        row[prefix] = value


def reports_to_csv(reports: list, path):
    rows = []
    for rep in reports:
        row: dict = {}
        _flatten("", rep.to_dict(), row)
        rows.append(row)
    fields = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _test_images(config: ExperimentConfig, data_root) -> ImageSet:
    testset = load_image_set(data_root, config.dataset, "test")
    if config.subset_ratio < 1.0:
        branchy = _load(config.checkpoint_dir, config.dataset, "branchy")
        policy = ExitPolicy(config.threshold, config.dataset)
        hardness = label_hardness(branchy, testset, policy)
        testset, _ = stratified_subset(testset, hardness, config.subset_ratio,
                                       seed=config.seed)
    return testset


def _sequential_run(step, images, warmup):
    """One timed pass: step(i) -> predicted class for image i."""
    n = images.shape[0]
    for i in range(min(warmup, n)):
        step(i % n)
    preds = np.empty(n, dtype=np.int64)
    t0 = time.perf_counter()
    for i in range(n):
        preds[i] = step(i)
    wall = time.perf_counter() - t0
    return preds, wall


def run_experiment(config: ExperimentConfig, data_root) -> BenchmarkReport:
    """Run one model variant over the (possibly subsetted) test split."""
    started = datetime.now(timezone.utc).isoformat()
    testset = _test_images(config, data_root)
    images = testset.images
    policy = ExitPolicy(config.threshold, config.dataset)

    exit_counter = np.zeros(2, dtype=np.int64)
    stage_times = np.zeros(2, dtype=np.float64)

    if config.variant == "lenet":
        net = _load(config.checkpoint_dir, config.dataset, "lenet")

        def step(i):
            return int(np.argmax(net.forward_final(images[i])))

    elif config.variant == "branchynet":
        net = _load(config.checkpoint_dir, config.dataset, "branchy")

        def step(i):
            outcome = infer_with_exit(net, images[i], policy)
            exit_counter[outcome.exit_id - 1] += 1
            return outcome.predicted_class

    else:  # cbnet
        ae = _load(config.checkpoint_dir, config.dataset, "autoencoder")
        clf = _load(config.checkpoint_dir, config.dataset, "lightweight")
        pipeline = CbnetPipeline(ae, clf, config.dataset)

        def step(i):
            pred, t_ae, t_clf = cbnet_infer(pipeline, images[i])
            stage_times[0] += t_ae
            stage_times[1] += t_clf
            return pred

    if config.power_trace is not None:
        trace_power, _trace_dur = ingest_power_trace(config.power_trace)
        power_source = "external-trace"
        params = None
    else:
        power_source = f"modeled-{POWER_PRESETS[config.power_preset].device_kind}"
        params = POWER_PRESETS[config.power_preset]

    walls, powers, energies, utils = [], [], [], []
    accuracy = None
    n = len(testset)
    for _ in range(config.repeats):
        exit_counter[:] = 0
        stage_times[:] = 0.0
        sampler = UtilizationSampler(interval_s=config.utilization_interval_s)
        sampler.start()
        preds, wall = _sequential_run(step, images, config.warmup)
        trace = sampler.stop()
        acc = float((preds == testset.labels).mean())
        if accuracy is None:
            accuracy = acc
        walls.append(wall)
        if params is not None:
            # a sub-interval run yields no samples; the loop is compute-bound,
            # so full utilization is the faithful stand-in
            watts = average_power(trace, params) if len(trace) else model_power(1.0, params)
            utils.append(trace.mean_utilization if len(trace) else 1.0)
        else:
            watts = trace_power
            utils.append(trace.mean_utilization if len(trace) else None)
        powers.append(watts)
        energies.append(energy(watts, wall))

    walls_a, powers_a, energies_a = map(np.asarray, (walls, powers, energies))
    report = BenchmarkReport(
        config=config.to_dict(),
        machine=machine_id(),
        accuracy_pct=accuracy * 100.0,
        n_images=n,
        latency_ms_mean=float(walls_a.mean() / n * 1e3),
        latency_ms_std=float(walls_a.std() / n * 1e3),
        latency_ms_per_repeat=[w / n * 1e3 for w in walls],
        total_time_s_mean=float(walls_a.mean()),
        total_time_s_per_repeat=list(walls),
        power_source=power_source,
        average_power_w_mean=float(powers_a.mean()),
        average_power_w_per_repeat=list(powers),
        mean_utilization=(float(np.mean([u for u in utils if u is not None]))
                          if any(u is not None for u in utils) else None),
        energy_j_mean=float(energies_a.mean()),
        energy_j_std=float(energies_a.std()),
        energy_j_per_repeat=list(energies),
        started_at=started,
    )
    if config.variant == "branchynet":
        total = exit_counter.sum()
        report.exit_fractions = [float(c) / total for c in exit_counter]
    if config.variant == "cbnet":
        report.timing_breakdown_ms = {
            "autoencoder": float(stage_times[0] / n * 1e3),
            "classifier": float(stage_times[1] / n * 1e3),
        }
    return report


def compare(reports: list, baseline: int = 0) -> dict:
    """Speedups and energy savings of every report against a baseline report."""
    if not reports:
        raise ConfigError("nothing to compare")
    datasets = {r.config["dataset"] for r in reports}
    machines = {r.machine["id"] for r in reports}
    if len(datasets) > 1:
        raise ConfigError(f"reports span several datasets: {sorted(datasets)}")
    if len(machines) > 1:
        raise ConfigError(f"reports span several machines: {sorted(machines)}")
    base = reports[baseline]
    rows = []
    for rep in reports:
        savings = (1.0 - rep.energy_j_mean / base.energy_j_mean) * 100.0
        rep.energy_savings_vs_baseline_pct = savings
        rep.baseline = base.config["variant"]
        rows.append({
            "variant": rep.config["variant"],
            "accuracy_pct": rep.accuracy_pct,
            "latency_ms": rep.latency_ms_mean,
            "speedup_vs_baseline": base.latency_ms_mean / rep.latency_ms_mean,
            "energy_j": rep.energy_j_mean,
            "energy_savings_pct": savings,
        })
    return {"dataset": base.config["dataset"], "baseline": base.config["variant"],
            "machine": base.machine["id"], "rows": rows}


def sweep_dataset_size(config: ExperimentConfig, ratios, data_root) -> list:
    """One run per subset ratio (ascending); reports carry total times."""
    ratios = list(ratios)
    if not ratios or any(not 0 < r <= 1 for r in ratios):
        raise ConfigError("ratios must each lie in (0, 1]")
    if sorted(ratios) != ratios:
        raise ConfigError("ratios must be ascending")
    reports = []
    for ratio in ratios:
        sub_cfg = ExperimentConfig.from_dict({**config.to_dict(), "subset_ratio": ratio})
        reports.append(run_experiment(sub_cfg, data_root))
    return reports
