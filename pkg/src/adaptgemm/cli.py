"""Command-line pipeline: tune -> dataset -> train -> eval -> codegen -> bench.

Every stage hands off through documented files under one output directory,
so the expensive tuning stage is resumable and any stage can be re-run or
inspected in isolation. All outputs embed the pipeline config hash; re-running
a stage from the same config file reproduces datasets, splits, trees, and
emitted source byte for byte (timings excluded).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 execution failure.
Caps fields can be overridden via environment variables:
ADAPTGEMM_TILE_MEMORY_CAP, ADAPTGEMM_REGISTER_TILE_CAP_DIRECT,
ADAPTGEMM_REGISTER_TILE_CAP_INDIRECT, ADAPTGEMM_ELEMENT_SIZE.
"""

import argparse
import concurrent.futures
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__, codegen, evaluation, model
from .dataset import (
    Dataset,
    dataset_from_tables,
    dedup_shapes,
    gen_go2,
    gen_po2,
    load_dataset,
    load_workload_shapes,
    save_dataset,
    split,
)
from .kernels import DeviceCaps, KernelConfig, KernelFamily, ProblemShape
from .tuner import (
    TimingPolicy,
    TuningTable,
    load_table,
    save_table,
    table_filename,
    tune_exhaustive,
    tune_random,
)

ENV_PREFIX = "ADAPTGEMM_"
CAPS_ENV_FIELDS = ("tile_memory_cap", "register_tile_cap_direct",
                   "register_tile_cap_indirect", "element_size")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ExecutionError(Exception):
    pass


@dataclass
class PipelineConfig:
    caps: DeviceCaps
    timing: TimingPolicy
    dataset_spec: dict
    split_fraction: float
    split_seed: int
    heights: tuple
    min_leafs: tuple
    baseline_threshold: int
    direct_anchor: tuple
    indirect_anchor: tuple
    sampling: dict
    out_dir: str

    @classmethod
    def load(cls, path, out_override=None, seed_override=None) -> "PipelineConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file {path} not found")
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path} is not valid JSON: {exc}")
        return cls.from_dict(doc, out_override, seed_override)

    @classmethod
    def from_dict(cls, doc: dict, out_override=None, seed_override=None) -> "PipelineConfig":
        caps_doc = dict(doc.get("caps", {}))
        for field in CAPS_ENV_FIELDS:
            env = os.environ.get(ENV_PREFIX + field.upper())
            if env is not None:
                caps_doc[field] = int(env)
        caps = DeviceCaps(**caps_doc)
        timing_doc = doc.get("timing", {})
        timing = TimingPolicy(warmup=timing_doc.get("warmup", 1),
                              repeats=timing_doc.get("repeats", 5))
        if "dataset" not in doc:
            raise DataError("config is missing the 'dataset' section")
        split_doc = doc.get("split", {})
        grid_doc = doc.get("grid", {})
        heights = tuple(None if h in ("max", "Max", None) else int(h)
                        for h in grid_doc.get("heights", model.DEFAULT_HEIGHTS))
        min_leafs = tuple(grid_doc.get("min_leaf", model.DEFAULT_MIN_LEAF))
        base_doc = doc.get("baseline", {})
        seed = int(seed_override) if seed_override is not None else split_doc.get("seed", 2024)
        sampling = dict(doc.get("sampling", {"mode": "exhaustive"}))
        if seed_override is not None:
            sampling["seed"] = int(seed_override)
        return cls(
            caps=caps,
            timing=timing,
            dataset_spec=dict(doc["dataset"]),
            split_fraction=float(split_doc.get("fraction", 0.8)),
            split_seed=seed,
            heights=heights,
            min_leafs=min_leafs,
            baseline_threshold=int(base_doc.get("threshold", 384)),
            direct_anchor=tuple(base_doc.get("direct_anchor", (256, 256, 256))),
            indirect_anchor=tuple(base_doc.get("indirect_anchor", (1024, 1024, 1024))),
            sampling=sampling,
            out_dir=str(out_override or doc.get("out_dir", "adaptgemm-out")),
        )

    def to_dict(self) -> dict:
        return {
            "caps": {f: getattr(self.caps, f) for f in CAPS_ENV_FIELDS},
            "timing": {"warmup": self.timing.warmup, "repeats": self.timing.repeats},
            "dataset": self.dataset_spec,
            "split": {"fraction": self.split_fraction, "seed": self.split_seed},
            "grid": {"heights": ["max" if h is None else h for h in self.heights],
                     "min_leaf": list(self.min_leafs)},
            "baseline": {"threshold": self.baseline_threshold,
                         "direct_anchor": list(self.direct_anchor),
                         "indirect_anchor": list(self.indirect_anchor)},
            "sampling": self.sampling,
            "out_dir": self.out_dir,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    # stage paths -----------------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def tables_dir(self) -> Path:
        return self.out / "tables"

    @property
    def models_dir(self) -> Path:
        return self.out / "models"

    def shapes(self) -> tuple[list[ProblemShape], str]:
        return resolve_shapes(self.dataset_spec)


def resolve_shapes(spec: dict) -> tuple[list[ProblemShape], str]:
    strategy = spec.get("strategy")
    if strategy == "po2":
        return gen_po2(int(spec["min"]), int(spec["max"])), "po2"
    if strategy == "go2":
        return gen_go2(int(spec["start"]), int(spec["end"]), int(spec["step"])), "go2"
    if strategy == "workload":
        return load_workload_shapes(spec["path"]), "workload"
    if strategy == "hybrid":
        shapes = []
        for part in spec.get("parts", []):
            shapes.extend(resolve_shapes(part)[0])
        return dedup_shapes(shapes), "hybrid"
    raise DataError(f"unknown dataset strategy {strategy!r}")


# ---------------------------------------------------------------------------
# tune


def _tune_one(shape_mnk, caps: DeviceCaps, timing: TimingPolicy, sampling: dict,
              path: str, config_hash: str) -> str:
    shape = ProblemShape(*shape_mnk)
    if sampling.get("mode") == "random":
        table = tune_random(shape, caps, int(sampling["samples"]),
                            int(sampling.get("seed", 0)), timing)
    else:
        table = tune_exhaustive(shape, caps, timing)
    save_table(table, path, {"config_hash": config_hash})
    return path


def cmd_tune(cfg: PipelineConfig, force: bool, jobs: int) -> int:
    shapes, tag = cfg.shapes()
    cfg.tables_dir.mkdir(parents=True, exist_ok=True)
    todo = []
    skipped = 0
    for shape in shapes:
        path = cfg.tables_dir / table_filename(shape)
        if path.exists() and not force:
            skipped += 1
            continue
        todo.append((shape.mnk, path))
    print(f"tune: {len(shapes)} shapes ({tag}), {skipped} already done, {len(todo)} to run")
    done = 0
    try:
        if jobs > 1 and len(todo) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_tune_one, mnk, cfg.caps, cfg.timing,
                                       cfg.sampling, str(path), cfg.hash())
                           for mnk, path in todo]
                for fut in concurrent.futures.as_completed(futures):
                    fut.result()
                    done += 1
                    print(f"  tuned {done}/{len(todo)}")
        else:
            for mnk, path in todo:
                _tune_one(mnk, cfg.caps, cfg.timing, cfg.sampling, str(path), cfg.hash())
                done += 1
                print(f"  tuned {mnk} ({done}/{len(todo)})")
    except Exception as exc:
        raise ExecutionError(f"tuning failed after {done} shapes: {exc}") from exc
    return 0


def _load_tables(cfg: PipelineConfig, shapes) -> list[TuningTable]:
    missing = [s.mnk for s in shapes if not (cfg.tables_dir / table_filename(s)).exists()]
    if missing:
        raise DataError(f"missing tuning tables for {len(missing)} shapes: "
                        + ", ".join(map(str, missing[:10]))
                        + (" ..." if len(missing) > 10 else ""))
    return [load_table(cfg.tables_dir / table_filename(s)) for s in shapes]


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset(cfg: PipelineConfig) -> int:
    shapes, tag = cfg.shapes()
    tables = _load_tables(cfg, shapes)
    ds = dataset_from_tables(tables, tag,
                             [table_filename(t.shape) for t in tables])
    sp = split(ds, cfg.split_fraction, cfg.split_seed)
    save_dataset(ds, cfg.out / "dataset.csv", cfg.out / "dataset_classes.json",
                 {"config_hash": cfg.hash()})
    with open(cfg.out / "split.json", "w") as fh:
        json.dump({"format_version": 1, "fraction": sp.fraction, "seed": sp.seed,
                   "train": list(sp.train), "test": list(sp.test),
                   "config_hash": cfg.hash()}, fh, indent=1)
        fh.write("\n")
    per_family = ds.unique_configs_per_family()
    print(f"dataset: {len(ds.records)} records, {len(ds.class_index)} classes "
          f"(direct {per_family[KernelFamily.DIRECT]}, "
          f"indirect {per_family[KernelFamily.INDIRECT]}), "
          f"split {len(sp.train)}/{len(sp.test)}")
    return 0


def _load_stage_dataset(cfg: PipelineConfig) -> Dataset:
    csv_path = cfg.out / "dataset.csv"
    sidecar = cfg.out / "dataset_classes.json"
    if not csv_path.exists() or not sidecar.exists():
        raise DataError("dataset files not found; run the dataset stage first")
    return load_dataset(csv_path, sidecar)


def _stage_split(cfg: PipelineConfig, ds: Dataset):
    return split(ds, cfg.split_fraction, cfg.split_seed)


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: PipelineConfig) -> int:
    ds = _load_stage_dataset(cfg)
    sp = _stage_split(cfg, ds)
    records = ds.features_and_labels()
    train_records = [records[i] for i in sp.train]
    cfg.models_dir.mkdir(parents=True, exist_ok=True)
    named = model.grid_train(train_records, cfg.heights, cfg.min_leafs)
    for name, tree in named:
        tree.meta["config_hash"] = cfg.hash()
        model.save_tree(tree, cfg.models_dir / f"{name}.json")
    print(f"train: {len(named)} models on {len(train_records)} records "
          f"-> {cfg.models_dir}")
    return 0


def _load_models(cfg: PipelineConfig) -> list[tuple[str, model.DecisionTree]]:
    paths = sorted(cfg.models_dir.glob("*.json"))
    if not paths:
        raise DataError("no trained models found; run the train stage first")
    return [(p.stem, model.load_tree(p)) for p in paths]


def _grid_order(cfg: PipelineConfig) -> list[str]:
    return [model.grid_name(h, L) for h in cfg.heights for L in cfg.min_leafs]


# ---------------------------------------------------------------------------
# eval


def _anchor_table(cfg: PipelineConfig, mnk, family: KernelFamily) -> TuningTable:
    shape = ProblemShape(*mnk)
    path = cfg.tables_dir / table_filename(shape)
    if path.exists():
        return load_table(path)
    print(f"eval: tuning baseline anchor {shape.mnk} ({family.value} family)")
    table = tune_exhaustive(shape, cfg.caps, cfg.timing, families=(family,))
    cfg.tables_dir.mkdir(parents=True, exist_ok=True)
    save_table(table, path, {"config_hash": cfg.hash()})
    return table


def _stage_policy(cfg: PipelineConfig, classes) -> evaluation.BaselinePolicy:
    path = cfg.out / "baseline.json"
    if path.exists():
        with open(path) as fh:
            doc = json.load(fh)
        policy = evaluation.BaselinePolicy(
            default_indirect=KernelConfig.from_canonical(doc["default_indirect"]),
            default_direct=KernelConfig.from_canonical(doc["default_direct"]),
            threshold=doc["threshold"])
    else:
        direct_table = _anchor_table(cfg, cfg.direct_anchor, KernelFamily.DIRECT)
        indirect_table = _anchor_table(cfg, cfg.indirect_anchor, KernelFamily.INDIRECT)
        policy = evaluation.build_baseline_policy(direct_table, indirect_table,
                                                  cfg.baseline_threshold)
        with open(path, "w") as fh:
            json.dump({"format_version": 1, "threshold": policy.threshold,
                       "default_direct": policy.default_direct.canonical(),
                       "default_indirect": policy.default_indirect.canonical(),
                       "direct_anchor": list(cfg.direct_anchor),
                       "indirect_anchor": list(cfg.indirect_anchor),
                       "config_hash": cfg.hash()}, fh, indent=1)
            fh.write("\n")
    policy.validate(cfg.caps)
    policy.register(classes)
    return policy


def cmd_eval(cfg: PipelineConfig) -> int:
    ds = _load_stage_dataset(cfg)
    sp = _stage_split(cfg, ds)
    records = ds.features_and_labels()
    test_records = [records[i] for i in sp.test]
    shapes = [r.input for r in ds.records]
    tables = evaluation.tables_by_shape(_load_tables(cfg, shapes))
    named = _load_models(cfg)
    order = {name: i for i, name in enumerate(_grid_order(cfg))}
    named.sort(key=lambda nt: order.get(nt[0], len(order)))
    policy = _stage_policy(cfg, ds.class_index)
    scores = evaluation.score_models(named, test_records, tables, ds.class_index, policy)
    evaluation.write_score_csv(scores, cfg.out / "scores.csv", {"config_hash": cfg.hash()})
    best = evaluation.select_best_model(scores)
    with open(cfg.out / "best_model.json", "w") as fh:
        json.dump({"format_version": 1, "name": best.name,
                   "path": str(cfg.models_dir / f"{best.name}.json"),
                   "accuracy": best.accuracy, "dtpr": best.dtpr, "dttr": best.dttr,
                   "config_hash": cfg.hash()}, fh, indent=1)
        fh.write("\n")
    print(f"eval: {len(scores)} models scored on {len(test_records)} test records; "
          f"best {best.name} (accuracy {best.accuracy:.1%}, dtpr {best.dtpr:.3f}, "
          f"dttr {best.dttr:.3f})")
    return 0


# ---------------------------------------------------------------------------
# codegen


def cmd_codegen(cfg: PipelineConfig, model_name: str | None, syntax: str) -> int:
    ds = _load_stage_dataset(cfg)
    if model_name is None:
        best_path = cfg.out / "best_model.json"
        if not best_path.exists():
            raise DataError("no best_model.json; run the eval stage or pass --model")
        with open(best_path) as fh:
            model_name = json.load(fh)["name"]
    tree_path = cfg.models_dir / f"{model_name}.json"
    if not tree_path.exists():
        raise DataError(f"model {model_name} not found at {tree_path}")
    tree = model.load_tree(tree_path)
    provenance = f"{ds.provenance} dataset, model {model_name}, config {cfg.hash()}"
    train_shapes = [r.input for r in ds.records]
    emitted = []
    for syn in (codegen.SYNTAX_C, codegen.SYNTAX_PYTHON) if syntax == "both" else (syntax,):
        source = codegen.emit_dispatcher(tree, ds.class_index, syn, provenance)
        if syn == codegen.SYNTAX_PYTHON:
            check = codegen.roundtrip_check(tree, source, train_shapes)
            if not check:
                raise ExecutionError(f"emitted dispatcher disagrees with the tree "
                                     f"at {check.counterexample}")
        out_path = cfg.out / f"dispatcher.{'py' if syn == codegen.SYNTAX_PYTHON else 'c'}"
        codegen.write_dispatcher(source, out_path)
        emitted.append(str(out_path))
    print(f"codegen: {model_name} -> {', '.join(emitted)}")
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(cfg: PipelineConfig, subset: str, live: bool, emit_gnuplot: bool) -> int:
    ds = _load_stage_dataset(cfg)
    sp = _stage_split(cfg, ds)
    records = ds.features_and_labels()
    picked = {"train": sp.train, "test": sp.test,
              "all": tuple(range(len(records)))}[subset]
    bench_records = [records[i] for i in picked]
    shapes = [ds.records[i].input for i in picked]
    tables = evaluation.tables_by_shape(_load_tables(cfg, [r.input for r in ds.records]))
    policy = _stage_policy(cfg, ds.class_index)

    best_path = cfg.out / "best_model.json"
    if not best_path.exists():
        raise DataError("no best_model.json; run the eval stage first")
    with open(best_path) as fh:
        name = json.load(fh)["name"]
    tree = model.load_tree(cfg.models_dir / f"{name}.json")

    rows = []
    for (feats, _label), shape in zip(bench_records, shapes):
        cid = model.predict(tree, feats)
        table = tables[feats]
        model_gf = (evaluation.perf_of_class_live(shape, cid, ds.class_index, cfg.caps, cfg.timing)
                    if live else evaluation.perf_of_class(shape, cid, tables, ds.class_index))
        base_gf = table.gflops_for(policy.select_config(shape))
        rows.append((feats, model_gf, base_gf, table.peak_gflops))

    mean_peak_ratio = math.fsum(r[1] / r[3] for r in rows) / len(rows)
    mean_base_ratio = math.fsum(r[1] / r[2] for r in rows) / len(rows)
    overhead = evaluation.overhead_bench(tree, shapes[:3], 50, ds.class_index,
                                         cfg.caps, kernel_repeats=1)

    csv_lines = [f"# adaptgemm-bench v1 model={name} subset={subset} mode="
                 f"{'live' if live else 'table'} config_hash={cfg.hash()}",
                 "M,N,K,model_gflops,baseline_gflops,peak_gflops"]
    for (m, n, k), mg, bg, pg in rows:
        csv_lines.append(f"{m},{n},{k},{mg!r},{bg!r},{pg!r}")
    (cfg.out / "bench.csv").write_text("\n".join(csv_lines) + "\n")

    width = max(len(str(r[0])) for r in rows)
    text = [f"model {name} vs baseline vs peak ({subset} subset, "
            f"{'live' if live else 'table'} mode)",
            f"{'shape':<{width}}  {'model':>10}  {'baseline':>10}  {'peak':>10}"]
    for (m, n, k), mg, bg, pg in rows:
        text.append(f"{str((m, n, k)):<{width}}  {mg:>10.3f}  {bg:>10.3f}  {pg:>10.3f}")
    text.append("")
    text.append(f"mean model/peak ratio:     {mean_peak_ratio:.6f}")
    text.append(f"mean model/baseline ratio: {mean_base_ratio:.6f}")
    text.append("")
    text.append("dispatch overhead (first shapes):")
    for s in overhead:
        text.append(f"  {s.shape}: dispatch {s.dispatch_ns:.0f} ns, kernel "
                    f"{s.kernel_ns:.0f} ns, fraction {s.overhead_fraction:.2e}")
    (cfg.out / "bench.txt").write_text("\n".join(text) + "\n")

    if emit_gnuplot:
        dat = ["# index M N K model_gflops baseline_gflops peak_gflops"]
        for i, ((m, n, k), mg, bg, pg) in enumerate(rows):
            dat.append(f"{i} {m} {n} {k} {mg!r} {bg!r} {pg!r}")
        (cfg.out / "bench.dat").write_text("\n".join(dat) + "\n")

    print("\n".join(text))
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptgemm",
                     description="Build input-adaptive GEMM dispatch from tuned kernels.")
    parser.add_argument("--version", action="version", version=f"adaptgemm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False, codegen_opts=False, bench_opts=False):
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="override split/sampling seed")
        p.add_argument("--force", action="store_true", help="redo work even if outputs exist")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel tuning worker processes")
        if codegen_opts:
            p.add_argument("--model", help="model name to emit (default: best from eval)")
            p.add_argument("--syntax", choices=["c", "python", "both"], default="both")
        if bench_opts:
            p.add_argument("--subset", choices=["train", "test", "all"], default="test")
            p.add_argument("--live", action="store_true",
                           help="re-execute kernels instead of reading tables")
            p.add_argument("--emit-gnuplot-data", action="store_true",
                           help="also write bench.dat with plottable columns")

    common(sub.add_parser("tune", help="benchmark all shapes of the dataset spec"), jobs=True)
    common(sub.add_parser("dataset", help="label tuned shapes and write the dataset + split"))
    common(sub.add_parser("train", help="train the model grid on the train split"))
    common(sub.add_parser("eval", help="score all models and pick the best"))
    common(sub.add_parser("codegen", help="emit the dispatcher source"), codegen_opts=True)
    common(sub.add_parser("bench", help="compare model vs baseline vs peak"), bench_opts=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = PipelineConfig.load(args.config, args.out, args.seed)
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "tune":
            return cmd_tune(cfg, args.force, args.jobs)
        if args.command == "dataset":
            return cmd_dataset(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "codegen":
            return cmd_codegen(cfg, args.model, args.syntax)
        if args.command == "bench":
            return cmd_bench(cfg, args.subset, args.live, args.emit_gnuplot_data)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ExecutionError as exc:
        print(f"execution error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
