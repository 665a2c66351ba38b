"""Shape generation, workload ingestion, labeling, and train/test splits.

A dataset pairs each unique (M, N, K) input with the best-measured kernel
config for that shape; configs double as classification labels via their
canonical string. Splits are seeded Fisher-Yates shuffles so any fraction
and seed reproduce byte-identically.
"""

import json
import warnings
from dataclasses import dataclass, field

from . import rng
from .kernels import DeviceCaps, KernelConfig, KernelFamily, ProblemShape
from .tuner import TimingPolicy, TuningTable, tune_exhaustive

PROVENANCE_TAGS = ("po2", "go2", "workload", "hybrid")


class WorkloadParseError(ValueError):
    """A workload shape file has a malformed or invalid row."""


def _is_power_of_two(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def gen_po2(lo: int, hi: int) -> list[ProblemShape]:
    """All (M, N, K) triples with each coordinate a power of two in [lo, hi]."""
    if not (_is_power_of_two(lo) and _is_power_of_two(hi)):
        raise ValueError(f"bounds must be powers of two, got ({lo}, {hi})")
    if lo > hi:
        raise ValueError(f"empty range ({lo}, {hi})")
    values = []
    v = lo
    while v <= hi:
        values.append(v)
        v *= 2
    return [ProblemShape(m, n, k) for m in values for n in values for k in values]


def gen_go2(start: int, end: int, step: int) -> list[ProblemShape]:
    """All triples over the arithmetic progression start, start+step, ... <= end."""
    if start < 1 or step < 1:
        raise ValueError(f"start and step must be >= 1, got ({start}, {step})")
    if start > end:
        raise ValueError(f"empty progression ({start}, {end}, {step})")
    values = list(range(start, end + 1, step))
    return [ProblemShape(m, n, k) for m in values for n in values for k in values]


def dedup_shapes(shapes: list[ProblemShape]) -> list[ProblemShape]:
    """Drop repeated (M, N, K) triples, keeping first occurrence order."""
    seen = set()
    out = []
    for s in shapes:
        if s.mnk not in seen:
            seen.add(s.mnk)
            out.append(s)
    return out


def load_workload_shapes(path) -> list[ProblemShape]:
    """Read `M N K` or `M,N,K` rows (# comments allowed), deduplicated.

    Rows with K=1 and highly rectangular shapes are ordinary inputs here;
    batch expansion is the file producer's job.
    """
    shapes = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise WorkloadParseError(f"{path}:{lineno}: expected 'M N K', got {raw.strip()!r}")
            try:
                m, n, k = (int(p) for p in parts)
            except ValueError as exc:
                raise WorkloadParseError(f"{path}:{lineno}: non-integer dimension in {raw.strip()!r}") from exc
            if min(m, n, k) < 1:
                raise WorkloadParseError(f"{path}:{lineno}: dimensions must be positive, got {(m, n, k)}")
            shapes.append(ProblemShape(m, n, k))
    if not shapes:
        warnings.warn(f"workload file {path} contains no shapes", RuntimeWarning, stacklevel=2)
    return dedup_shapes(shapes)


# ---------------------------------------------------------------------------
# class index and dataset


class ClassIndex:
    """Dense integer ids for kernel configs, assigned in first-appearance order."""

    def __init__(self):
        self._ids: dict[str, int] = {}
        self._configs: list[KernelConfig] = []

    def ensure(self, config: KernelConfig) -> int:
        key = config.canonical()
        if key not in self._ids:
            self._ids[key] = len(self._configs)
            self._configs.append(config)
        return self._ids[key]

    def id_of(self, config: KernelConfig) -> int:
        return self._ids[config.canonical()]

    def config_of(self, class_id: int) -> KernelConfig:
        return self._configs[class_id]

    def family_of(self, class_id: int) -> KernelFamily:
        return self._configs[class_id].family

    def __len__(self) -> int:
        return len(self._configs)

    def __contains__(self, config: KernelConfig) -> bool:
        return config.canonical() in self._ids

    def configs(self) -> list[KernelConfig]:
        return list(self._configs)

    def copy(self) -> "ClassIndex":
        dup = ClassIndex()
        for c in self._configs:
            dup.ensure(c)
        return dup


@dataclass(frozen=True)
class DatasetRecord:
    input: ProblemShape
    label: KernelConfig
    peak_gflops: float
    full_table_ref: str | None = None


@dataclass
class Dataset:
    records: list[DatasetRecord]
    class_index: ClassIndex
    provenance: str
    failed_shapes: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.input.mnk in seen:
                raise ValueError(f"duplicate input {r.input.mnk} in dataset")
            seen.add(r.input.mnk)

    def label_id(self, record: DatasetRecord) -> int:
        return self.class_index.id_of(record.label)

    def features_and_labels(self) -> list[tuple[tuple[int, int, int], int]]:
        return [(r.input.mnk, self.label_id(r)) for r in self.records]

    def unique_configs_per_family(self) -> dict[KernelFamily, int]:
        """Distinct winning configs per family, the dataset-statistics view."""
        uniq = {KernelFamily.DIRECT: set(), KernelFamily.INDIRECT: set()}
        for r in self.records:
            uniq[r.label.family].add(r.label.canonical())
        return {fam: len(s) for fam, s in uniq.items()}


def dataset_from_tables(tables: list[TuningTable], provenance: str,
                        table_refs: list[str] | None = None) -> Dataset:
    """Label each table's shape with its best-overall config."""
    if provenance not in PROVENANCE_TAGS:
        raise ValueError(f"provenance must be one of {PROVENANCE_TAGS}, got {provenance!r}")
    if not tables:
        raise ValueError("no tables to build a dataset from")
    index = ClassIndex()
    records = []
    for pos, table in enumerate(tables):
        ref = table_refs[pos] if table_refs else None
        label = table.best_config
        index.ensure(label)
        records.append(DatasetRecord(table.shape, label, table.peak_gflops, ref))
    return Dataset(records, index, provenance)


def build_dataset(shapes: list[ProblemShape], caps: DeviceCaps = DeviceCaps(),
                  timing: TimingPolicy = TimingPolicy(), provenance: str = "workload",
                  ) -> tuple[Dataset, list[TuningTable]]:
    """Tune every shape exhaustively and label it; returns the tables too.

    Shapes that fail to tune are skipped, warned about, and recorded in the
    dataset's failed_shapes flag.
    """
    shapes = dedup_shapes(shapes)
    if not shapes:
        raise ValueError("no shapes to tune")
    tables = []
    failed = []
    for shape in shapes:
        try:
            tables.append(tune_exhaustive(shape, caps, timing))
        except Exception as exc:
            failed.append(shape.mnk)
            warnings.warn(f"skipping shape {shape.mnk}: {exc}", RuntimeWarning, stacklevel=2)
    if not tables:
        raise ValueError("every shape failed to tune")
    ds = dataset_from_tables(tables, provenance)
    ds.failed_shapes = failed
    return ds, tables


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    test: tuple[int, ...]
    fraction: float
    seed: int


def split(dataset: Dataset, fraction: float, seed: int) -> Split:
    """Seeded shuffle of record indices; first floor(fraction * n) go to train."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset.records)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    order = rng.shuffled(n, seed)
    n_train = int(fraction * n)
    return Split(tuple(order[:n_train]), tuple(order[n_train:]), fraction, seed)


# ---------------------------------------------------------------------------
# persistence

DATASET_COLUMNS = ["M", "N", "K", "class_id", "canonical_config", "peak_gflops"]


def save_dataset(dataset: Dataset, csv_path, sidecar_path,
                 extra_meta: dict | None = None) -> None:
    lines = [",".join(DATASET_COLUMNS)]
    for r in dataset.records:
        cid = dataset.label_id(r)
        lines.append(",".join(map(str, [r.input.M, r.input.N, r.input.K, cid,
                                        r.label.canonical(), repr(r.peak_gflops)])))
    meta = {"provenance": dataset.provenance}
    meta.update(extra_meta or {})
    header = "# adaptgemm-dataset v1 " + " ".join(f"{k}={v}" for k, v in meta.items())
    with open(csv_path, "w") as fh:
        fh.write(header.rstrip() + "\n" + "\n".join(lines) + "\n")
    save_class_sidecar(dataset, sidecar_path, extra_meta)


def save_class_sidecar(dataset: Dataset, path, extra_meta: dict | None = None) -> None:
    classes = []
    for cid, cfg in enumerate(dataset.class_index.configs()):
        classes.append({
            "class_id": cid,
            "family": cfg.family.value,
            "Mwg": cfg.block_m, "Nwg": cfg.block_n, "Kwg": cfg.block_k,
            "Mwi": cfg.tile_m, "Nwi": cfg.tile_n, "Kwi": cfg.unroll_k,
            "canonical": cfg.canonical(),
        })
    doc = {
        "format_version": 1,
        "provenance": {
            "strategy": dataset.provenance,
            "failed_shapes": [list(s) for s in dataset.failed_shapes],
            **(extra_meta or {}),
        },
        "classes": classes,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_class_sidecar(path) -> tuple[ClassIndex, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    index = ClassIndex()
    for entry in sorted(doc["classes"], key=lambda e: e["class_id"]):
        cfg = KernelConfig(KernelFamily(entry["family"]), entry["Mwg"], entry["Nwg"],
                           entry["Kwg"], entry["Mwi"], entry["Nwi"], entry["Kwi"])
        cid = index.ensure(cfg)
        if cid != entry["class_id"]:
            raise ValueError(f"{path}: non-dense class ids")
    return index, doc.get("provenance", {})


def load_dataset(csv_path, sidecar_path) -> Dataset:
    index, provenance_meta = load_class_sidecar(sidecar_path)
    records = []
    strategy = provenance_meta.get("strategy", "workload")
    with open(csv_path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    body = [ln for ln in lines if not ln.startswith("#")]
    if not body or body[0].split(",") != DATASET_COLUMNS:
        raise ValueError(f"{csv_path}: not a dataset file")
    for ln in body[1:]:
        f = ln.split(",")
        shape = ProblemShape(int(f[0]), int(f[1]), int(f[2]))
        cfg = KernelConfig.from_canonical(f[4])
        if index.id_of(cfg) != int(f[3]):
            raise ValueError(f"{csv_path}: class id mismatch for {f[4]}")
        records.append(DatasetRecord(shape, cfg, float(f[5])))
    ds = Dataset(records, index, strategy)
    ds.failed_shapes = [tuple(s) for s in provenance_meta.get("failed_shapes", [])]
    return ds
