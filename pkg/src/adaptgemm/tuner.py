"""Exhaustive and random benchmarking of kernel configurations for one shape.

Timed runs are strictly serialized within a process and reuse pre-allocated
operand buffers; each config gets warmup runs (discarded) and the median of R
timed repetitions. Tables persist as CSV with a metadata comment line so a
stored experiment replays from its recorded seed and policy.
"""

import statistics
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .kernels import (
    DeviceCaps,
    KernelConfig,
    KernelFamily,
    ProblemShape,
    enumerate_search_space,
    gemm_execute,
)

TABLE_COLUMNS = ["M", "N", "K", "family", "Mwg", "Nwg", "Kwg", "Mwi", "Nwi", "Kwi",
                 "elapsed_s", "gflops"]


class MeasurementError(RuntimeError):
    """A kernel failed while being benchmarked."""


class TableLookupError(LookupError):
    """A config or shape is missing from a stored tuning table."""


def flops_of(shape: ProblemShape) -> int:
    """Floating point operations of one GEMM: 2 * M * N * K."""
    return 2 * shape.M * shape.N * shape.K


@dataclass(frozen=True)
class TimingPolicy:
    warmup: int = 1
    repeats: int = 5

    def __post_init__(self):
        if self.warmup < 0 or self.repeats < 1:
            raise ValueError(f"bad timing policy {self}")


@dataclass(frozen=True)
class Measurement:
    config: KernelConfig
    elapsed: float
    gflops: float

    def __post_init__(self):
        if self.elapsed <= 0 or self.gflops <= 0:
            raise ValueError("elapsed and gflops must be positive")


@dataclass
class TuningTable:
    """All measurements for one shape, with per-family and overall argmax."""

    shape: ProblemShape
    measurements: list[Measurement]
    best_direct: int | None = None
    best_indirect: int | None = None
    best_overall: int = -1
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_measurements(cls, shape: ProblemShape, measurements: list[Measurement],
                          meta: dict | None = None) -> "TuningTable":
        if not measurements:
            raise ValueError("a tuning table needs at least one measurement")
        table = cls(shape, measurements, meta=dict(meta or {}))
        table._recompute_best()
        return table

    def _recompute_best(self):
        def argmax(indices):
            best = None
            for i in indices:
                if best is None or self.measurements[i].gflops > self.measurements[best].gflops:
                    best = i
            return best

        all_idx = range(len(self.measurements))
        self.best_overall = argmax(all_idx)
        self.best_direct = argmax(
            i for i in all_idx if self.measurements[i].config.family is KernelFamily.DIRECT)
        self.best_indirect = argmax(
            i for i in all_idx if self.measurements[i].config.family is KernelFamily.INDIRECT)

    @property
    def best_config(self) -> KernelConfig:
        return self.measurements[self.best_overall].config

    @property
    def peak_gflops(self) -> float:
        return self.measurements[self.best_overall].gflops

    def find(self, config: KernelConfig) -> Measurement | None:
        key = config.canonical()
        for m in self.measurements:
            if m.config.canonical() == key:
                return m
        return None

    def gflops_for(self, config: KernelConfig) -> float:
        m = self.find(config)
        if m is None:
            raise TableLookupError(
                f"config {config.canonical()} not measured for shape {self.shape.mnk}")
        return m.gflops

    def best_for_family(self, family: KernelFamily) -> KernelConfig:
        idx = self.best_direct if family is KernelFamily.DIRECT else self.best_indirect
        if idx is None:
            raise TableLookupError(f"no {family.value} measurements for shape {self.shape.mnk}")
        return self.measurements[idx].config


def _bench_buffers(shape: ProblemShape, dtype, seed: int):
    gen = np.random.Generator(np.random.PCG64(rng.mix(seed, shape.M, shape.N, shape.K)))
    a_dims = (shape.K, shape.M) if shape.transA else (shape.M, shape.K)
    b_dims = (shape.N, shape.K) if shape.transB else (shape.K, shape.N)
    A = gen.uniform(-1.0, 1.0, a_dims).astype(dtype)
    B = gen.uniform(-1.0, 1.0, b_dims).astype(dtype)
    C = gen.uniform(-1.0, 1.0, (shape.M, shape.N)).astype(dtype)
    out = np.empty((shape.M, shape.N), dtype)
    return A, B, C, out


def _measure(shape: ProblemShape, configs: list[KernelConfig], caps: DeviceCaps,
             timing: TimingPolicy, meta: dict, dtype=np.float32,
             data_seed: int = 0) -> TuningTable:
    A, B, C, out = _bench_buffers(shape, dtype, data_seed)
    flops = flops_of(shape)
    measurements = []
    for config in configs:
        try:
            for _ in range(timing.warmup):
                gemm_execute(shape, config, A, B, C, caps, out)
            reps = []
            for _ in range(timing.repeats):
                _, elapsed = gemm_execute(shape, config, A, B, C, caps, out)
                reps.append(elapsed)
        except Exception as exc:
            raise MeasurementError(
                f"config {config.canonical()} failed on shape {shape.mnk}: {exc}") from exc
        elapsed = statistics.median(reps)
        measurements.append(Measurement(config, elapsed, flops / elapsed / 1e9))
    return TuningTable.from_measurements(shape, measurements, meta)


def _base_meta(caps: DeviceCaps, timing: TimingPolicy) -> dict:
    from . import __version__
    return {
        "warmup": timing.warmup,
        "repeats": timing.repeats,
        "aggregate": "median",
        "tile_memory_cap": caps.tile_memory_cap,
        "register_tile_cap_direct": caps.register_tile_cap_direct,
        "register_tile_cap_indirect": caps.register_tile_cap_indirect,
        "element_size": caps.element_size,
        "version": __version__,
    }


def tune_exhaustive(shape: ProblemShape, caps: DeviceCaps = DeviceCaps(),
                    timing: TimingPolicy = TimingPolicy(),
                    families: tuple[KernelFamily, ...] = (KernelFamily.DIRECT, KernelFamily.INDIRECT),
                    ) -> TuningTable:
    """Benchmark every legal config of the given families for one shape."""
    configs = []
    for family in families:
        configs.extend(enumerate_search_space(family, caps))
    meta = _base_meta(caps, timing)
    meta["mode"] = "exhaustive"
    return _measure(shape, configs, caps, timing, meta)


def tune_random(shape: ProblemShape, caps: DeviceCaps, samples: int, seed: int,
                timing: TimingPolicy = TimingPolicy()) -> TuningTable:
    """Benchmark a seeded without-replacement sample of the legal space.

    The sample is allocated per family proportionally to family space size
    (largest-remainder rounding). Asking for more samples than exist clamps
    to the exhaustive space with a warning.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    spaces = [enumerate_search_space(f, caps) for f in (KernelFamily.DIRECT, KernelFamily.INDIRECT)]
    total = sum(len(s) for s in spaces)
    if samples >= total:
        if samples > total:
            warnings.warn(f"requested {samples} samples but the legal space has {total}; "
                          "clamping to exhaustive", RuntimeWarning, stacklevel=2)
        return tune_exhaustive(shape, caps, timing)

    sizes = [len(s) for s in spaces]
    counts = [samples * sz // total for sz in sizes]
    leftover = samples - sum(counts)
    by_remainder = sorted(range(len(sizes)), key=lambda i: (-(samples * sizes[i] % total), i))
    for i in by_remainder[:leftover]:
        counts[i] += 1

    configs = []
    for fam_idx, (space, count) in enumerate(zip(spaces, counts)):
        if count == 0:
            continue
        picks = rng.sample_without_replacement(len(space), count, rng.mix(seed, fam_idx))
        configs.extend(space[i] for i in sorted(picks))
    meta = _base_meta(caps, timing)
    meta.update({"mode": "random", "seed": seed, "samples": samples})
    return _measure(shape, configs, caps, timing, meta)


# ---------------------------------------------------------------------------
# persistence


def save_table(table: TuningTable, path, extra_meta: dict | None = None) -> None:
    """Write one table as CSV: a # metadata line, a header row, one row per config."""
    meta = dict(table.meta)
    meta.update(extra_meta or {})
    items = " ".join(f"{k}={v}" for k, v in meta.items())
    s = table.shape
    lines = [f"# adaptgemm-table v1 {items}".rstrip(), ",".join(TABLE_COLUMNS)]
    for m in table.measurements:
        c = m.config
        lines.append(",".join(map(str, [
            s.M, s.N, s.K, c.family.value, c.block_m, c.block_n, c.block_k,
            c.tile_m, c.tile_n, c.unroll_k, repr(m.elapsed), repr(m.gflops)])))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_table(path) -> TuningTable:
    meta = {}
    rows = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    for ln in lines:
        if ln.startswith("#"):
            for item in ln.lstrip("# ").split():
                if "=" in item:
                    k, v = item.split("=", 1)
                    meta[k] = v
            continue
        rows.append(ln)
    if not rows or rows[0].split(",") != TABLE_COLUMNS:
        raise ValueError(f"{path}: not a tuning table (bad or missing header)")
    shape = None
    measurements = []
    for ln in rows[1:]:
        f = ln.split(",")
        M, N, K = int(f[0]), int(f[1]), int(f[2])
        if shape is None:
            shape = ProblemShape(M, N, K)
        elif (M, N, K) != shape.mnk:
            raise ValueError(f"{path}: mixed shapes in one table")
        config = KernelConfig(KernelFamily(f[3]), *(int(x) for x in f[4:10]))
        measurements.append(Measurement(config, float(f[10]), float(f[11])))
    return TuningTable.from_measurements(shape, measurements, meta)


def table_filename(shape: ProblemShape) -> str:
    return f"{shape.M}x{shape.N}x{shape.K}.csv"
