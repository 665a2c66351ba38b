"""Model quality metrics against stored tuning tables, plus the default baseline.

Accuracy treats config selection as plain classification; the two performance
ratios weigh each prediction by its measured throughput instead, so a near-miss
costs little and a bad kernel choice shows up directly:

* peak ratio: mean over test shapes of predicted-config GFLOPS / best GFLOPS
  for that shape (table argmax), 1.0 iff every prediction is the argmax;
* tune ratio: same numerator over the GFLOPS of a fixed default policy (one
  config tuned at a reference shape per family, switched by a size threshold).

Table mode looks every number up in stored tables, which makes all metrics
deterministic; means use math.fsum so record order never changes a result.
"""

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .kernels import DeviceCaps, KernelConfig, KernelFamily, ProblemShape, gemm_execute, is_legal
from .model import DecisionTree, TreeStats, predict, stats
from .tuner import TimingPolicy, TuningTable, flops_of, tune_exhaustive


class EvaluationError(RuntimeError):
    """Evaluation inputs are inconsistent (e.g. a test shape has no table)."""


def tables_by_shape(tables: list[TuningTable]) -> dict[tuple[int, int, int], TuningTable]:
    return {t.shape.mnk: t for t in tables}


def _table_for(tables, mnk) -> TuningTable:
    try:
        return tables[tuple(mnk)]
    except KeyError:
        raise EvaluationError(f"no tuning table stored for shape {tuple(mnk)}") from None


def _config_lookup(classes):
    if hasattr(classes, "config_of"):
        return classes.config_of
    return lambda cid: classes[cid]


# ---------------------------------------------------------------------------
# baseline policy


@dataclass
class BaselinePolicy:
    """Library-default behavior: one tuned config per family plus a size cut.

    Shapes whose geometric mean edge (M*N*K)^(1/3) falls below the threshold
    run the direct default, everything else the indirect default. The
    comparison is done as M*N*K < threshold**3 so it is exact in integers.
    """

    default_indirect: KernelConfig
    default_direct: KernelConfig
    threshold: int = 384
    direct_class_id: int | None = None
    indirect_class_id: int | None = None

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if self.default_direct.family is not KernelFamily.DIRECT:
            raise ValueError("default_direct must be a direct-family config")
        if self.default_indirect.family is not KernelFamily.INDIRECT:
            raise ValueError("default_indirect must be an indirect-family config")

    def validate(self, caps: DeviceCaps) -> None:
        for cfg in (self.default_direct, self.default_indirect):
            if not is_legal(cfg, caps):
                raise ValueError(f"baseline config {cfg.canonical()} illegal under caps")

    def register(self, classes) -> "BaselinePolicy":
        """Assign class ids for both defaults under the given class index."""
        self.direct_class_id = classes.ensure(self.default_direct)
        self.indirect_class_id = classes.ensure(self.default_indirect)
        return self

    def select_config(self, shape: ProblemShape) -> KernelConfig:
        if shape.M * shape.N * shape.K < self.threshold ** 3:
            return self.default_direct
        return self.default_indirect


def baseline_select(policy: BaselinePolicy, shape: ProblemShape) -> int:
    """Class id the default policy would pick; policy must be registered."""
    cfg = policy.select_config(shape)
    cid = (policy.direct_class_id if cfg is policy.default_direct
           else policy.indirect_class_id)
    if cid is None:
        raise EvaluationError("baseline policy not registered with a class index")
    return cid


def build_baseline_policy(direct_anchor_table: TuningTable,
                          indirect_anchor_table: TuningTable,
                          threshold: int = 384) -> BaselinePolicy:
    """Defaults are the per-family argmax configs of the two anchor tables."""
    return BaselinePolicy(
        default_indirect=indirect_anchor_table.best_for_family(KernelFamily.INDIRECT),
        default_direct=direct_anchor_table.best_for_family(KernelFamily.DIRECT),
        threshold=threshold,
    )


def tune_baseline_policy(caps: DeviceCaps = DeviceCaps(),
                         timing: TimingPolicy = TimingPolicy(),
                         direct_anchor: ProblemShape = ProblemShape(256, 256, 256),
                         indirect_anchor: ProblemShape = ProblemShape(1024, 1024, 1024),
                         threshold: int = 384) -> BaselinePolicy:
    """Tune each family once at its anchor shape and freeze the winners."""
    direct_table = tune_exhaustive(direct_anchor, caps, timing, families=(KernelFamily.DIRECT,))
    indirect_table = tune_exhaustive(indirect_anchor, caps, timing, families=(KernelFamily.INDIRECT,))
    return build_baseline_policy(direct_table, indirect_table, threshold)


# ---------------------------------------------------------------------------
# metrics


def accuracy(tree: DecisionTree, test_records) -> float:
    """Exact-class-match rate over (features, class_id) test records."""
    records = list(test_records)
    if not records:
        raise ValueError("accuracy over an empty test set is undefined")
    hits = sum(1 for feats, cid in records if predict(tree, feats) == cid)
    return hits / len(records)


def perf_of_class(shape: ProblemShape, class_id: int, tables, classes) -> float:
    """Measured GFLOPS of one class for one shape, straight from the table."""
    config = _config_lookup(classes)(class_id)
    mnk = shape.mnk if isinstance(shape, ProblemShape) else shape
    return _table_for(tables, mnk).gflops_for(config)


def perf_of_class_live(shape: ProblemShape, class_id: int, classes,
                       caps: DeviceCaps = DeviceCaps(),
                       timing: TimingPolicy = TimingPolicy()) -> float:
    """Re-execute the class's kernel instead of reading the stored table."""
    from .tuner import _bench_buffers

    config = _config_lookup(classes)(class_id)
    A, B, C, out = _bench_buffers(shape, np.float32, 0)
    for _ in range(timing.warmup):
        gemm_execute(shape, config, A, B, C, caps, out)
    reps = [gemm_execute(shape, config, A, B, C, caps, out)[1]
            for _ in range(timing.repeats)]
    return flops_of(shape) / statistics.median(reps) / 1e9


def _ratios(predictions, records, tables, classes, denominator):
    lookup = _config_lookup(classes)
    ratios = []
    for cid, (feats, _label) in zip(predictions, records):
        table = _table_for(tables, feats)
        ratios.append(table.gflops_for(lookup(cid)) / denominator(table))
    return ratios


def dtpr_from_predictions(predictions, records, tables, classes) -> float:
    records = list(records)
    ratios = _ratios(predictions, records, tables, classes, lambda t: t.peak_gflops)
    return math.fsum(ratios) / len(ratios)


def dttr_from_predictions(predictions, records, tables, classes,
                          policy: BaselinePolicy) -> float:
    records = list(records)

    def baseline_gflops(table: TuningTable) -> float:
        return table.gflops_for(policy.select_config(table.shape))

    ratios = _ratios(predictions, records, tables, classes, baseline_gflops)
    return math.fsum(ratios) / len(ratios)


def dtpr(tree: DecisionTree, test_records, tables, classes) -> float:
    """Mean predicted-over-peak GFLOPS ratio; 1.0 iff every pick is the argmax."""
    records = list(test_records)
    preds = [predict(tree, feats) for feats, _ in records]
    return dtpr_from_predictions(preds, records, tables, classes)


def dttr(tree: DecisionTree, test_records, tables, classes,
         policy: BaselinePolicy) -> float:
    """Mean predicted-over-baseline GFLOPS ratio; can exceed 1.0."""
    records = list(test_records)
    preds = [predict(tree, feats) for feats, _ in records]
    return dttr_from_predictions(preds, records, tables, classes, policy)


# ---------------------------------------------------------------------------
# model scoring and selection


@dataclass
class ModelScore:
    name: str
    accuracy: float
    dtpr: float
    dttr: float
    stats: TreeStats
    min_samples_leaf: int | float | None = None


def score_models(named_trees, test_records, tables, classes,
                 policy: BaselinePolicy) -> list[ModelScore]:
    scores = []
    for name, tree in named_trees:
        scores.append(ModelScore(
            name=name,
            accuracy=accuracy(tree, test_records),
            dtpr=dtpr(tree, test_records, tables, classes),
            dttr=dttr(tree, test_records, tables, classes, policy),
            stats=stats(tree, classes),
            min_samples_leaf=tree.meta.get("min_samples_leaf"),
        ))
    return scores


def select_best_model(scores: list[ModelScore]) -> ModelScore:
    """Highest peak ratio wins; ties fall to accuracy, then fewer leaves, then name."""
    if not scores:
        raise ValueError("no scores to select from")
    return min(scores, key=lambda s: (-s.dtpr, -s.accuracy, s.stats.total_leaves, s.name))


SCORE_COLUMNS = ["name", "accuracy_pct", "dtpr", "dttr", "total_leaves", "height",
                 "min_samples_leaf", "unique_configs_direct", "unique_configs_indirect",
                 "leaves_direct", "leaves_indirect"]


def write_score_csv(scores: list[ModelScore], path, extra_meta: dict | None = None) -> None:
    lines = []
    if extra_meta:
        lines.append("# adaptgemm-scores v1 " + " ".join(f"{k}={v}" for k, v in extra_meta.items()))
    lines.append(",".join(SCORE_COLUMNS))
    for s in scores:
        st = s.stats
        lines.append(",".join(map(str, [
            s.name, repr(s.accuracy * 100.0), repr(s.dtpr), repr(s.dttr),
            st.total_leaves, st.height, s.min_samples_leaf,
            st.unique_configs_per_family[KernelFamily.DIRECT],
            st.unique_configs_per_family[KernelFamily.INDIRECT],
            st.leaves_per_family[KernelFamily.DIRECT],
            st.leaves_per_family[KernelFamily.INDIRECT]])))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# dispatch overhead


@dataclass(frozen=True)
class OverheadSample:
    shape: tuple[int, int, int]
    dispatch_ns: float
    kernel_ns: float
    overhead_fraction: float


def overhead_bench(tree: DecisionTree, shapes, repetitions: int, classes,
                   caps: DeviceCaps = DeviceCaps(), kernel_repeats: int = 3,
                   ) -> list[OverheadSample]:
    """Median tree-traversal time vs selected-kernel time, per shape."""
    from .tuner import _bench_buffers

    lookup = _config_lookup(classes)
    out = []
    for shape in shapes:
        feats = shape.mnk
        predict(tree, feats)  # warm attribute caches
        trials = []
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            predict(tree, feats)
            trials.append(time.perf_counter_ns() - t0)
        dispatch_ns = float(statistics.median(trials))

        config = lookup(predict(tree, feats))
        A, B, C, buf = _bench_buffers(shape, np.float32, 0)
        gemm_execute(shape, config, A, B, C, caps, buf)  # warmup
        reps = [gemm_execute(shape, config, A, B, C, caps, buf)[1]
                for _ in range(kernel_repeats)]
        kernel_ns = statistics.median(reps) * 1e9
        out.append(OverheadSample(feats, dispatch_ns, kernel_ns,
                                  dispatch_ns / (dispatch_ns + kernel_ns)))
    return out
