"""CPU power models, utilization sampling, and energy accounting (E = P * dt).

Two device models are built in:

* a cloud-instance model scaling host power to the share of allocated vCPUs:
  P = (n/N) * (P_idle + (P_peak - P_idle) * u^beta);
* a Raspberry-Pi-style whole-device model: P = P_idle + (P_peak - P_idle) * u^beta.

Average power over a trace applies the model per sample and averages the
powers (u^beta is nonlinear, so the model of the mean utilization would
understate consumption on bursty traces).
"""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, EmptyTraceError, FormatError, PlatformError


@dataclass(frozen=True)
class PowerModelParams:
    device_kind: str            # "gci" or "pi"
    n: int = 1                  # allocated virtual CPUs
    big_n: int = 1              # physical cores on the host
    p_idle: float = 0.0
    p_peak: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not 0 < self.n <= self.big_n:
            raise DomainError(f"need 0 < n <= N, got n={self.n} N={self.big_n}")
        if not self.p_peak > self.p_idle >= 0:
            raise DomainError("need P_peak > P_idle >= 0")
        if self.beta <= 0:
            raise DomainError("beta must be > 0")


POWER_PRESETS = {
    "gci": PowerModelParams("gci", n=2, big_n=18, p_idle=40.0, p_peak=180.0, beta=0.75),
    "pi4": PowerModelParams("pi", p_idle=2.7, p_peak=6.4, beta=1.0),
}


def _check_u(u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1):
        raise DomainError("utilization outside [0, 1]")
    return u


def gci_power(u, params: PowerModelParams):
    """Cloud-instance watts at utilization u in [0,1]."""
    u = _check_u(u)
    p = (params.n / params.big_n) * (
        params.p_idle + (params.p_peak - params.p_idle) * u ** params.beta)
    return float(p) if p.ndim == 0 else p


def pi_power(u, params: PowerModelParams):
    """Single-board-device watts at utilization u in [0,1]."""
    u = _check_u(u)
    p = params.p_idle + (params.p_peak - params.p_idle) * u ** params.beta
    return float(p) if p.ndim == 0 else p


def model_power(u, params: PowerModelParams):
    if params.device_kind == "gci":
        return gci_power(u, params)
    if params.device_kind == "pi":
        return pi_power(u, params)
    raise DomainError(f"unknown device kind {params.device_kind!r}")


@dataclass
class UtilizationTrace:
    timestamps: np.ndarray      # monotonic clock seconds, strictly increasing
    utilization: np.ndarray     # values in [0, 1]
    interval_s: float = 0.0
    source: str = "sampled"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.utilization = np.asarray(self.utilization, dtype=np.float64)
        if self.timestamps.shape != self.utilization.shape:
            raise FormatError("trace timestamp/utilization length mismatch")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise FormatError("trace timestamps must strictly increase")
        _check_u(self.utilization) if self.utilization.size else None

    def __len__(self):
        return self.timestamps.size

    @property
    def mean_utilization(self) -> float:
        if not len(self):
            raise EmptyTraceError("empty utilization trace")
        return float(self.utilization.mean())


def average_power(trace: UtilizationTrace, params: PowerModelParams) -> float:
    """Mean over samples of the power model applied per sample."""
    if not len(trace):
        raise EmptyTraceError("cannot average power over an empty trace")
    return float(np.mean(model_power(trace.utilization, params)))


def energy(average_power_w: float, duration_s: float) -> float:
    """Joules: average watts times seconds."""
    if duration_s < 0:
        raise DomainError(f"negative duration {duration_s}")
    return average_power_w * duration_s


class UtilizationSampler:
    """Background thread sampling this process's CPU utilization.

    Utilization is process CPU time share normalized by the core count, so a
    fully busy single-threaded loop on one allocated core reads ~1.0. The
    trace buffer is append-only while running and read-only after stop().
    """

    def __init__(self, interval_s=0.1, cores=None):
        if interval_s < 0.01:
            raise DomainError("sampling interval must be >= 10 ms")
        try:
            import psutil
        except ImportError as exc:   # pragma: no cover - psutil is a hard dep
            raise PlatformError(f"psutil unavailable: {exc}") from exc
        self._psutil = psutil
        self.interval_s = interval_s
        self.cores = cores or psutil.cpu_count() or 1
        self._proc = psutil.Process()
        self._stop = threading.Event()
        self._thread = None
        self._times: list[float] = []
        self._values: list[float] = []

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def start(self):
        self._proc.cpu_percent(None)      # prime the counter
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self):
        while not self._stop.wait(self.interval_s):
            pct = self._proc.cpu_percent(None)
            u = min(max(pct / 100.0 / self.cores, 0.0), 1.0)
            self._times.append(time.monotonic())
            self._values.append(u)

    def stop(self) -> UtilizationTrace:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.trace = UtilizationTrace(np.array(self._times), np.array(self._values),
                                      interval_s=self.interval_s)
        return self.trace


def sample_utilization(duration_s: float, interval_s=0.1) -> UtilizationTrace:
    """Sample for a fixed duration (convenience wrapper around the sampler)."""
    sampler = UtilizationSampler(interval_s=interval_s)
    sampler.start()
    time.sleep(duration_s)
    return sampler.stop()


def ingest_power_trace(path):
    """Externally measured power CSV -> (time-weighted average watts, duration).

    Expected header: timestamp_s,power_w with strictly increasing timestamps.
    The average uses trapezoidal weighting between consecutive samples.
    """
    rows = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["timestamp_s", "power_w"]:
            raise FormatError(f"{path}: expected header 'timestamp_s,power_w'")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                raise FormatError(f"{path}:{lineno}: unparseable row {row!r}") from None
    if len(rows) < 2:
        raise FormatError(f"{path}: need at least 2 samples, got {len(rows)}")
    ts = np.array([r[0] for r in rows])
    pw = np.array([r[1] for r in rows])
    if np.any(np.diff(ts) <= 0):
        raise FormatError(f"{path}: timestamps must strictly increase")
    duration = float(ts[-1] - ts[0])
    seg = np.diff(ts)
    avg = float(np.sum((pw[:-1] + pw[1:]) / 2.0 * seg) / duration)
    return avg, duration


@dataclass
class EnergyReport:
    average_power_w: float
    duration_s: float
    energy_j: float = field(init=False)
    source: str = "modeled-pi"

    def __post_init__(self):
        self.energy_j = energy(self.average_power_w, self.duration_s)
