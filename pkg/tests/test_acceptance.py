"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report. These tests exercise the package end to end, including a full
measured pipeline, so the module takes several minutes.
"""

import itertools
import json
import math
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from adaptgemm import codegen, evaluation, rng
from adaptgemm.cli import main
from adaptgemm.dataset import (
    ClassIndex,
    Dataset,
    DatasetRecord,
    dataset_from_tables,
    gen_go2,
    gen_po2,
    load_dataset,
    split,
)
from adaptgemm.kernels import (
    DeviceCaps,
    KernelConfig,
    KernelFamily,
    ProblemShape,
    enumerate_search_space,
    gemm_execute,
    gemm_reference,
)
from adaptgemm.model import (
    UNBOUNDED,
    LeafNode,
    SplitNode,
    TrainConfig,
    TreeStats,
    grid_train,
    load_tree,
    predict,
    stats,
    train,
)
from adaptgemm.tuner import load_table, save_table, table_filename

from conftest import (
    cycled_class_map,
    mutate_one_threshold,
    oracle_root_split,
    rand_operands,
    random_feasible_tree,
)


@contextmanager
def criterion(num: int, description: str):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[acceptance] criterion {num:2d}: FAIL - {description}")
        raise
    print(f"[acceptance] criterion {num:2d}: PASS - {description} "
          f"({time.monotonic() - started:.1f}s)")


# ---------------------------------------------------------------------------


def test_criterion_01_kernel_correctness(search_space, default_caps):
    with criterion(1, "200 random shapes x 20 configs/family match the reference at 1e-6"):
        started = time.monotonic()
        stream = rng.SplitMix64(0xC1)
        forced = [(1, 1, 1), (1, 1, 96), (1, 96, 1), (96, 1, 1), (1, 37, 96),
                  (96, 1, 37), (37, 96, 1), (96, 96, 1), (1, 96, 96), (96, 1, 96),
                  (1, 1, 7), (96, 96, 96)]
        flag_cycle = list(itertools.product([False, True], repeat=2))
        shapes = []
        for i, mnk in enumerate(forced):
            ta, tb = flag_cycle[i % 4]
            shapes.append(ProblemShape(*mnk, alpha=1.0, beta=0.0, transA=ta, transB=tb))
        while len(shapes) < 200:
            shapes.append(ProblemShape(
                1 + stream.below(96), 1 + stream.below(96), 1 + stream.below(96),
                alpha=(1.0, 1.5, 2.0)[stream.below(3)],
                beta=(0.0, 0.0, 0.5, 1.0)[stream.below(4)],
                transA=bool(stream.below(2)), transB=bool(stream.below(2))))
        families = {
            KernelFamily.DIRECT: enumerate_search_space(KernelFamily.DIRECT, default_caps),
            KernelFamily.INDIRECT: enumerate_search_space(KernelFamily.INDIRECT, default_caps),
        }
        checked = 0
        for case, shape in enumerate(shapes):
            A, B, C = rand_operands(shape, np.float32, seed=case)
            ref = gemm_reference(shape, A, B, C)
            for family, space in families.items():
                picks = rng.sample_without_replacement(len(space), 20, rng.mix(case, len(space)))
                for idx in picks:
                    out, _ = gemm_execute(shape, space[idx], A, B, C, default_caps)
                    np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-6)
                    checked += 1
        assert checked == 200 * 40
        assert time.monotonic() - started < 120.0


def test_criterion_02_search_space_counts(default_caps):
    with criterion(2, "legal spaces are exactly 144 direct / 432 indirect"):
        # independent brute-force filter, restating the rules from scratch
        def brute(family):
            if family is KernelFamily.DIRECT:
                grid = itertools.product((8, 16, 32), (8, 16, 32), (8, 16),
                                         (1, 2, 4), (1, 2, 4), (1,))
                reg_cap = 8
            else:
                grid = itertools.product((16, 32, 64), (16, 32, 64), (8, 16, 32),
                                         (2, 4, 8), (2, 4, 8), (1, 2))
                reg_cap = 32
            keep = []
            for bm, bn, bk, tm, tn, uk in grid:
                if bm % tm or bn % tn or bk % uk:
                    continue
                if tm * tn > reg_cap:
                    continue
                if (bm + bn) * bk * 4 > 32768:
                    continue
                keep.append((family.value, bm, bn, bk, tm, tn, uk))
            return keep

        direct = enumerate_search_space(KernelFamily.DIRECT, default_caps)
        indirect = enumerate_search_space(KernelFamily.INDIRECT, default_caps)
        assert len(direct) == 144
        assert len(indirect) == 432
        as_tuples = lambda cfgs: {(c.family.value, *c.param_tuple()) for c in cfgs}
        assert as_tuples(direct) == set(brute(KernelFamily.DIRECT))
        assert as_tuples(indirect) == set(brute(KernelFamily.INDIRECT))


def test_criterion_03_dataset_cardinalities():
    with criterion(3, "gen_po2(64,2048) -> 216 and gen_go2(256,3840,256) -> 3375"):
        po2 = gen_po2(64, 2048)
        go2 = gen_go2(256, 3840, 256)
        assert len(po2) == 216 and len({s.mnk for s in po2}) == 216
        assert len(go2) == 3375 and len({s.mnk for s in go2}) == 3375


def test_criterion_04_cart_oracle_equivalence():
    with criterion(4, "root split equals exact brute-force Gini minimization (500+ cases)"):
        started = time.monotonic()
        points = list(itertools.product((1, 2, 4), repeat=3))
        cases = []
        for n in range(2, 9):
            combos = itertools.combinations(range(len(points)), n)
            stride = {2: 29, 3: 251, 4: 1471, 5: 6653, 6: 24781, 7: 72639, 8: 180001}[n]
            for i, combo in enumerate(itertools.islice(combos, 0, None, stride)):
                if i >= 12:
                    break
                for a, b in ((0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (1, 2)):
                    labels = [(a * j + b) % 3 for j in range(n)]
                    cases.append([(points[p], lab) for p, lab in zip(combo, labels)])
        # repeated feature vectors with conflicting labels
        for p in range(0, 27, 2):
            cases.append([(points[p], 0), (points[p], 1)])
            cases.append([(points[p], 1), (points[p], 1), (points[(p + 3) % 27], 0)])
        assert len(cases) >= 500
        for samples in cases:
            want = oracle_root_split(samples, min_leaf=1)
            tree = train(samples, TrainConfig(min_samples_leaf=1))
            root = tree.nodes[tree.root]
            if want is None:
                assert isinstance(root, LeafNode), samples
            else:
                assert isinstance(root, SplitNode), samples
                assert (root.feature, root.threshold) == want, samples
        assert time.monotonic() - started < 60.0


@pytest.fixture(scope="module")
def synthetic_216(tmp_path_factory, fake_table_factory):
    """216-shape dataset with stored (persisted and reloaded) fixture tables."""
    tmp = tmp_path_factory.mktemp("tables216")
    shapes = gen_po2(64, 2048)
    tables = []
    for s in shapes:
        path = tmp / table_filename(s)
        save_table(fake_table_factory(s), path)
        tables.append(load_table(path))
    ds = dataset_from_tables(tables, "po2")
    return ds, evaluation.tables_by_shape(tables)


def test_criterion_05_tree_invariants_full_grid(synthetic_216):
    with criterion(5, "full 5x8 grid on 216 shapes: height/leaf-support bounds + memorization"):
        started = time.monotonic()
        ds, _tables = synthetic_216
        records = ds.features_and_labels()
        named = grid_train(records)
        assert len(named) == 40
        by_name = dict(named)
        heights = {"1": 1, "2": 2, "4": 4, "8": 8, "Max": None}
        for name, tree in named:
            h_txt, l_txt = name[1:].split("-L")
            bound = heights[h_txt]
            st = stats(tree, ds.class_index)
            if bound is not None:
                assert st.height <= bound, name
            eff = TrainConfig(
                min_samples_leaf=int(l_txt) if "." not in l_txt else float(l_txt)
            ).effective_min_leaf(len(records))
            assert all(leaf.n_samples >= eff for leaf in tree.leaves()), name
            assert st.total_leaves == len(tree.leaves())
        assert evaluation.accuracy(by_name["hMax-L1"], records) == 1.0
        assert time.monotonic() - started < 60.0


def test_criterion_06_metric_identities(synthetic_216):
    with criterion(6, "argmax DTPR == 1.0, baseline-as-model DTTR == 1.0, permutation-invariant"):
        ds, tables = synthetic_216
        records = ds.features_and_labels()
        classes = ds.class_index
        argmax_preds = [cid for _, cid in records]
        assert evaluation.dtpr_from_predictions(argmax_preds, records, tables, classes) == 1.0

        policy = evaluation.BaselinePolicy(
            default_indirect=KernelConfig(KernelFamily.INDIRECT, 64, 64, 16, 4, 4, 1),
            default_direct=KernelConfig(KernelFamily.DIRECT, 16, 16, 8, 2, 2, 1),
            threshold=384).register(classes)
        base_preds = [evaluation.baseline_select(policy, r.input) for r in ds.records]
        assert evaluation.dttr_from_predictions(
            base_preds, records, tables, classes, policy) == 1.0

        tree = train(records, TrainConfig(max_height=6))
        want = (evaluation.accuracy(tree, records),
                evaluation.dtpr(tree, records, tables, classes),
                evaluation.dttr(tree, records, tables, classes, policy))
        for s in range(50):
            order = rng.shuffled(len(records), s)
            rec = [records[i] for i in order]
            got = (evaluation.accuracy(tree, rec),
                   evaluation.dtpr(tree, rec, tables, classes),
                   evaluation.dttr(tree, rec, tables, classes, policy))
            assert got == want


def test_criterion_07_selection_prefers_peak_ratio():
    with criterion(7, "published-style fixture: hMax-L1 (DTPR .852) beats h8-L1 (acc 67%)"):
        def score(name, acc, dtpr_v, dttr_v, leaves, height):
            st = TreeStats(height=height, total_leaves=leaves,
                           leaves_per_family={KernelFamily.DIRECT: leaves - 1,
                                              KernelFamily.INDIRECT: 1},
                           unique_configs_per_family={KernelFamily.DIRECT: 2,
                                                      KernelFamily.INDIRECT: 1})
            return evaluation.ModelScore(name, acc, dtpr_v, dttr_v, st, 1)

        rows = [score("h8-L1", 0.67, 0.806, 1.340, 215, 8),
                score("hMax-L1", 0.60, 0.852, 1.424, 1290, 19)]
        best = evaluation.select_best_model(rows)
        assert best.name == "hMax-L1"
        assert best.accuracy < rows[0].accuracy  # lower accuracy still wins on DTPR


def test_criterion_08_codegen_round_trip(search_space):
    with criterion(8, "100 random trees: emitted source equals predict; mutations detected"):
        started = time.monotonic()
        probe_base = [s.mnk for s in gen_po2(64, 1024)]
        deepest = 0
        for seed in range(100):
            tree = random_feasible_tree(seed, max_depth=20)
            deepest = max(deepest, tree.height())
            classes = cycled_class_map(len(tree.leaves()), search_space)
            source = codegen.emit_dispatcher(tree, classes, codegen.SYNTAX_PYTHON)
            assert codegen.roundtrip_check(tree, source, probe_base)
            mutant = mutate_one_threshold(tree, seed=seed + 1000)
            mutant_src = codegen.emit_dispatcher(mutant, classes, codegen.SYNTAX_PYTHON)
            verdict = codegen.roundtrip_check(tree, mutant_src, probe_base)
            assert not verdict
            assert verdict.counterexample is not None
        assert deepest >= 12  # the family genuinely exercises deep trees
        assert time.monotonic() - started < 60.0


def test_criterion_09_dispatch_overhead(search_space):
    with criterion(9, "deepest tree dispatch < 1% of 1024^3 kernel time"):
        started = time.monotonic()
        trees = [random_feasible_tree(seed, max_depth=20) for seed in range(100)]
        deepest = max(trees, key=lambda t: t.height())
        classes = cycled_class_map(len(deepest.leaves()), search_space)
        samples = evaluation.overhead_bench(
            deepest, [ProblemShape(1024, 1024, 1024)], repetitions=100,
            classes=classes, kernel_repeats=2)
        s = samples[0]
        assert s.overhead_fraction < 0.01
        assert s.dispatch_ns / s.kernel_ns < 0.01
        assert time.monotonic() - started < 120.0


def test_criterion_10_split_determinism():
    with criterion(10, "splits byte-identical across runs and processes; floor sizes"):
        cfg = KernelConfig(KernelFamily.DIRECT, 8, 8, 8, 1, 1, 1)

        def tiny_dataset(n):
            idx = ClassIndex()
            idx.ensure(cfg)
            return Dataset([DatasetRecord(ProblemShape(i + 1, 1, 1), cfg, 1.0)
                            for i in range(n)], idx, "workload")

        for n in (2, 10, 216, 3375):
            ds = tiny_dataset(n)
            first = split(ds, 0.8, seed=4242)
            assert len(first.train) == math.floor(0.8 * n)
            blob = json.dumps([list(first.train), list(first.test)])
            for _ in range(9):
                again = split(ds, 0.8, seed=4242)
                assert json.dumps([list(again.train), list(again.test)]) == blob

        code = (
            "from adaptgemm.dataset import ClassIndex, Dataset, DatasetRecord, split\n"
            "from adaptgemm.kernels import KernelConfig, KernelFamily, ProblemShape\n"
            "cfg = KernelConfig(KernelFamily.DIRECT, 8, 8, 8, 1, 1, 1)\n"
            "idx = ClassIndex(); idx.ensure(cfg)\n"
            "ds = Dataset([DatasetRecord(ProblemShape(i + 1, 1, 1), cfg, 1.0)"
            " for i in range(216)], idx, 'workload')\n"
            "sp = split(ds, 0.8, 4242)\n"
            "print(list(sp.train), list(sp.test))\n")
        runs = [subprocess.run([sys.executable, "-c", code], capture_output=True,
                               text=True, check=True).stdout for _ in range(2)]
        assert runs[0] == runs[1]
        in_process = split(tiny_dataset(216), 0.8, seed=4242)
        assert runs[0].strip() == f"{list(in_process.train)} {list(in_process.test)}"


def test_criterion_11_end_to_end_smoke(tmp_path):
    with criterion(11, "27-shape pipeline from one config file; model DTPR >= baseline DTPR"):
        started = time.monotonic()
        out = tmp_path / "run"
        config = {
            "out_dir": str(out),
            "timing": {"warmup": 1, "repeats": 3},
            "dataset": {"strategy": "po2", "min": 64, "max": 256},
            "split": {"fraction": 0.8, "seed": 20817},
            "baseline": {"threshold": 384, "direct_anchor": [64, 64, 64],
                         "indirect_anchor": [256, 256, 256]},
        }
        cfg_path = tmp_path / "smoke.json"
        cfg_path.write_text(json.dumps(config, indent=1))
        for stage in ("tune", "dataset", "train", "eval", "codegen", "bench"):
            assert main([stage, "--config", str(cfg_path)]) == 0, stage

        ds = load_dataset(out / "dataset.csv", out / "dataset_classes.json")
        assert len(ds.records) == 27
        sp = split(ds, 0.8, seed=20817)
        records = ds.features_and_labels()
        train_records = [records[i] for i in sp.train]
        tables = evaluation.tables_by_shape(
            [load_table(out / "tables" / table_filename(r.input)) for r in ds.records])

        with open(out / "best_model.json") as fh:
            best_name = json.load(fh)["name"]
        best_tree = load_tree(out / "models" / f"{best_name}.json")
        with open(out / "baseline.json") as fh:
            base_doc = json.load(fh)
        policy = evaluation.BaselinePolicy(
            default_indirect=KernelConfig.from_canonical(base_doc["default_indirect"]),
            default_direct=KernelConfig.from_canonical(base_doc["default_direct"]),
            threshold=base_doc["threshold"]).register(ds.class_index)

        model_train_dtpr = evaluation.dtpr(best_tree, train_records, tables, ds.class_index)
        base_preds = [evaluation.baseline_select(policy, ds.records[i].input)
                      for i in sp.train]
        baseline_train_dtpr = evaluation.dtpr_from_predictions(
            base_preds, train_records, tables, ds.class_index)
        print(f"[acceptance] criterion 11 detail: best={best_name} "
              f"train-dtpr={model_train_dtpr:.4f} baseline-dtpr={baseline_train_dtpr:.4f}")
        assert model_train_dtpr >= baseline_train_dtpr

        scores_lines = (out / "scores.csv").read_text().splitlines()
        assert len(scores_lines) == 2 + 40  # header comment + columns + full grid
        assert (out / "dispatcher.c").exists() and (out / "dispatcher.py").exists()
        elapsed = time.monotonic() - started
        assert elapsed < 1800.0
