import math
from fractions import Fraction

import numpy as np
import pytest

from adaptgemm import rng
from adaptgemm.kernels import DeviceCaps, ProblemShape, full_search_space
from adaptgemm.tuner import Measurement, TuningTable, flops_of

FAST_TIMING_KW = dict(warmup=0, repeats=1)


@pytest.fixture(scope="session")
def default_caps():
    return DeviceCaps()


@pytest.fixture(scope="session")
def search_space(default_caps):
    return full_search_space(default_caps)


def rand_operands(shape: ProblemShape, dtype=np.float32, seed=0):
    gen = np.random.default_rng(rng.mix(seed, shape.M, shape.N, shape.K))
    a_dims = (shape.K, shape.M) if shape.transA else (shape.M, shape.K)
    b_dims = (shape.N, shape.K) if shape.transB else (shape.K, shape.N)
    A = gen.uniform(-1.0, 1.0, a_dims).astype(dtype)
    B = gen.uniform(-1.0, 1.0, b_dims).astype(dtype)
    C = gen.uniform(-1.0, 1.0, (shape.M, shape.N)).astype(dtype)
    return A, B, C


def assert_gemm_close(out, ref, dtype=np.float32):
    tol = 1e-6 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(out, ref, rtol=tol, atol=tol)


def fake_gflops(shape: ProblemShape, config) -> float:
    """Deterministic synthetic performance model for table fixtures.

    Shaped so the best config varies smoothly with problem size: each size
    bucket prefers one block-size sweet spot, small problems lean direct and
    large ones indirect, with a small config-specific jitter on top.
    """
    m, n, k = shape.mnk
    gmean = (m * n * k) ** (1.0 / 3.0)
    target = 8 if gmean < 96 else (16 if gmean < 192 else (32 if gmean < 768 else 64))
    fit = (-abs(math.log2(config.block_m) - math.log2(target))
           - 0.5 * abs(math.log2(config.block_n) - math.log2(target)))
    family_is_direct = config.family.value == "direct"
    family_bonus = 0.6 if family_is_direct == (gmean < 192) else -0.6
    jitter = (rng.mix(m, n, k, config.block_k, config.tile_m, config.tile_n,
                      config.unroll_k, int(family_is_direct)) % 997) / 1e4
    return 10.0 + fit + family_bonus + jitter


@pytest.fixture(scope="session")
def fake_table_factory(search_space):
    def make(shape: ProblemShape) -> TuningTable:
        flops = flops_of(shape)
        measurements = []
        for config in search_space:
            gf = fake_gflops(shape, config)
            measurements.append(Measurement(config, flops / (gf * 1e9), gf))
        return TuningTable.from_measurements(shape, measurements, {"mode": "fixture"})

    return make


def random_feasible_tree(seed: int, max_depth: int = 20, node_budget: int = 400):
    """Random tree with path-consistent half-integer thresholds.

    Every leaf gets a distinct class id, so any routing change is observable
    as a different selected config.
    """
    from adaptgemm.model import DecisionTree, LeafNode, SplitNode

    stream = rng.SplitMix64(seed)
    target_depth = 1 + stream.below(max_depth)
    nodes = []
    counter = [0]

    def grow(depth, intervals):
        idx = len(nodes)
        splittable = [f for f in range(3) if intervals[f][1] - intervals[f][0] >= 1]
        exhausted = depth >= target_depth or not splittable or len(nodes) >= node_budget
        if exhausted or (depth > 0 and stream.below(100) < 20):
            nodes.append(LeafNode(counter[0], 1))
            counter[0] += 1
            return idx
        f = splittable[stream.below(len(splittable))]
        lo, hi = intervals[f]
        x = lo + stream.below(hi - lo)  # split between x and x+1
        nodes.append(SplitNode(f, x + 0.5))
        node = nodes[idx]
        node.left = grow(depth + 1, intervals[:f] + ((lo, x),) + intervals[f + 1:])
        node.right = grow(depth + 1, intervals[:f] + ((x + 1, hi),) + intervals[f + 1:])
        return idx

    grow(0, ((1, 4096),) * 3)
    return DecisionTree(nodes, 0, {"seed": seed})


def cycled_class_map(n_classes: int, space) -> dict:
    assert n_classes <= len(space), "class map must stay injective"
    return {cid: space[cid] for cid in range(n_classes)}


def mutate_one_threshold(tree, seed: int):
    """Copy the tree with a single threshold shifted by +-1."""
    from adaptgemm.model import DecisionTree, SplitNode

    dup = DecisionTree.from_dict(tree.to_dict())
    stream = rng.SplitMix64(seed)
    internal = [i for i, n in enumerate(dup.nodes) if isinstance(n, SplitNode)]
    pick = internal[stream.below(len(internal))]
    delta = 1.0 if stream.below(2) else -1.0
    dup.nodes[pick].threshold += delta
    return dup


def oracle_root_split(samples, min_leaf=1):
    """Exhaustive weighted-Gini minimizer in exact rational arithmetic.

    Independent of the library's split search: list-based partitioning,
    Fraction impurities, no incremental updates. Ties keep the first
    candidate in (feature asc, threshold asc) order.
    """
    n = len(samples)

    def gini_frac(labels):
        total = len(labels)
        acc = Fraction(0)
        for c in set(labels):
            acc += Fraction(labels.count(c), total) ** 2
        return 1 - acc

    parent = gini_frac([c for _, c in samples])
    best = None
    for f in range(3):
        values = sorted({feats[f] for feats, _ in samples})
        for lo, hi in zip(values, values[1:]):
            threshold = (lo + hi) / 2
            left = [c for feats, c in samples if feats[f] <= threshold]
            right = [c for feats, c in samples if feats[f] > threshold]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            weighted = (Fraction(len(left), n) * gini_frac(left)
                        + Fraction(len(right), n) * gini_frac(right))
            if weighted >= parent:
                continue
            if best is None or weighted < best[0]:
                best = (weighted, f, threshold)
    if best is None:
        return None
    return (best[1], best[2])
