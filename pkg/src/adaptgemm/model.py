"""CART decision-tree classifier over (M, N, K) features, built from scratch.

Greedy axis-aligned growth: at each node consider midpoints between
consecutive distinct sorted values of every feature, take the split with the
lowest Gini-weighted child impurity, and stop on purity, on the height limit,
or when no feasible split improves the parent. Candidate splits are compared
in exact integer arithmetic (cross-multiplied rational scores), so tree
structure is reproducible bit-for-bit across platforms and immune to
float-rounding ties.

Tie rules, fixed so identical inputs always give identical trees:
lowest feature index (M before N before K), then lowest threshold; leaf
majority ties go to the smallest class id. A split is feasible only if BOTH
children keep at least the effective min-samples-per-leaf.
"""

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .kernels import KernelFamily

FEATURE_NAMES = ("M", "N", "K")
UNBOUNDED = None  # max_height value meaning "grow until pure or unsplittable"


@dataclass(frozen=True)
class TrainConfig:
    """Growth limits: max tree height and min samples per leaf.

    min_samples_leaf may be an absolute count (int >= 1) or a fraction of the
    training set in (0, 0.5], converted to ceil(fraction * n), floored at 1.
    """

    max_height: int | None = UNBOUNDED
    min_samples_leaf: int | float = 1

    def __post_init__(self):
        if self.max_height is not None and self.max_height < 1:
            raise ValueError(f"max_height must be >= 1 or None, got {self.max_height}")
        L = self.min_samples_leaf
        if isinstance(L, bool) or not isinstance(L, (int, float)):
            raise ValueError(f"min_samples_leaf must be int or float, got {L!r}")
        if isinstance(L, int):
            if L < 1:
                raise ValueError(f"absolute min_samples_leaf must be >= 1, got {L}")
        elif not (0.0 < L <= 0.5):
            raise ValueError(f"fractional min_samples_leaf must be in (0, 0.5], got {L}")

    def effective_min_leaf(self, n_train: int) -> int:
        L = self.min_samples_leaf
        if isinstance(L, int):
            return L
        return max(1, math.ceil(L * n_train))


@dataclass
class SplitNode:
    feature: int
    threshold: float
    left: int = -1
    right: int = -1


@dataclass
class LeafNode:
    class_id: int
    n_samples: int


@dataclass
class DecisionTree:
    """Flat node array; children are indices. Root is node 0."""

    nodes: list
    root: int = 0
    meta: dict = field(default_factory=dict)

    def height(self) -> int:
        worst = 0
        stack = [(self.root, 0)]
        while stack:
            idx, depth = stack.pop()
            node = self.nodes[idx]
            if isinstance(node, LeafNode):
                worst = max(worst, depth)
            else:
                stack.append((node.left, depth + 1))
                stack.append((node.right, depth + 1))
        return worst

    def leaves(self) -> list[LeafNode]:
        return [n for n in self.nodes if isinstance(n, LeafNode)]

    def split_nodes(self) -> list[SplitNode]:
        return [n for n in self.nodes if isinstance(n, SplitNode)]

    def thresholds(self) -> list[tuple[int, float]]:
        return [(n.feature, n.threshold) for n in self.split_nodes()]

    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            if isinstance(n, LeafNode):
                nodes.append({"class_id": n.class_id, "n_samples": n.n_samples})
            else:
                nodes.append({"feature": n.feature, "threshold": n.threshold,
                              "left": n.left, "right": n.right})
        return {"format_version": 1, "feature_names": list(FEATURE_NAMES),
                "root": self.root, "nodes": nodes, "meta": self.meta}

    @classmethod
    def from_dict(cls, doc: dict) -> "DecisionTree":
        if doc.get("format_version") != 1:
            raise ValueError(f"unsupported tree format {doc.get('format_version')!r}")
        nodes = []
        for n in doc["nodes"]:
            if "class_id" in n:
                nodes.append(LeafNode(n["class_id"], n.get("n_samples", 0)))
            else:
                nodes.append(SplitNode(n["feature"], n["threshold"], n["left"], n["right"]))
        return cls(nodes, doc.get("root", 0), doc.get("meta", {}))


def gini(labels) -> float:
    """Gini impurity 1 - sum(p_k^2); 0 iff the label multiset is pure."""
    labels = list(labels)
    if not labels:
        raise ValueError("gini of an empty label set is undefined")
    n = len(labels)
    sq = sum(c * c for c in Counter(labels).values())
    return 1.0 - sq / (n * n)


def best_split(samples, min_leaf: int):
    """Best (feature, threshold, weighted_impurity) or None.

    Candidates are midpoints between consecutive distinct sorted values per
    feature. A candidate is kept only if both children hold >= min_leaf
    samples and the weighted child impurity strictly improves the parent.
    Scores are compared exactly: weighted Gini is monotone in
    score = sum(c_L^2)/n_L + sum(c_R^2)/n_R, compared by cross-multiplication.
    """
    n = len(samples)
    if n < 2 * min_leaf or n < 2:
        return None
    labels = [lab for _, lab in samples]
    parent_counts = Counter(labels)
    if len(parent_counts) == 1:
        return None
    parent_sq = sum(c * c for c in parent_counts.values())

    best = None  # (score_num, score_den, feature, threshold)
    n_features = len(samples[0][0])
    for f in range(n_features):
        ordered = sorted((feats[f], lab) for feats, lab in samples)
        left = defaultdict(int)
        right = dict(parent_counts)
        sq_l = 0
        sq_r = parent_sq
        for pos in range(n - 1):
            value, lab = ordered[pos]
            sq_l += 2 * left[lab] + 1
            left[lab] += 1
            sq_r -= 2 * right[lab] - 1
            right[lab] -= 1
            next_value = ordered[pos + 1][0]
            if value == next_value:
                continue
            n_l = pos + 1
            n_r = n - n_l
            if n_l < min_leaf or n_r < min_leaf:
                continue
            num = sq_l * n_r + sq_r * n_l
            den = n_l * n_r
            if num * n <= parent_sq * den:  # not strictly better than parent
                continue
            if best is None or num * best[1] > best[0] * den:
                best = (num, den, f, (value + next_value) / 2)
    if best is None:
        return None
    num, den, f, threshold = best
    weighted = 1.0 - (num / den) / n
    return (f, threshold, weighted)


def _majority(labels) -> int:
    counts = Counter(labels)
    top = max(counts.values())
    return min(cid for cid, c in counts.items() if c == top)


def train(train_records, config: TrainConfig = TrainConfig()) -> DecisionTree:
    """Grow a tree on (features, class_id) records. Deterministic."""
    records = list(train_records)
    if not records:
        raise ValueError("cannot train on an empty record list")
    min_leaf = config.effective_min_leaf(len(records))
    max_h = config.max_height

    nodes: list = []
    # Stack items: (samples, depth, parent_index, side). Right child pushed
    # first so nodes end up in pre-order with left subtrees first.
    stack = [(records, 0, -1, "")]
    while stack:
        samples, depth, parent, side = stack.pop()
        idx = len(nodes)
        if parent >= 0:
            setattr(nodes[parent], side, idx)
        labels = [lab for _, lab in samples]
        pure = all(lab == labels[0] for lab in labels)
        chosen = None
        if not pure and (max_h is UNBOUNDED or depth < max_h):
            chosen = best_split(samples, min_leaf)
        if chosen is None:
            nodes.append(LeafNode(_majority(labels), len(samples)))
            continue
        f, threshold, _ = chosen
        nodes.append(SplitNode(f, threshold))
        left_s = [s for s in samples if s[0][f] <= threshold]
        right_s = [s for s in samples if s[0][f] > threshold]
        stack.append((right_s, depth + 1, idx, "right"))
        stack.append((left_s, depth + 1, idx, "left"))

    meta = {
        "max_height": max_h,
        "min_samples_leaf": config.min_samples_leaf,
        "effective_min_samples_leaf": min_leaf,
        "train_size": len(records),
    }
    return DecisionTree(nodes, 0, meta)


def predict(tree: DecisionTree, features) -> int:
    """Descend by `feature <= threshold` comparisons; O(height)."""
    node = tree.nodes[tree.root]
    while isinstance(node, SplitNode):
        child = node.left if features[node.feature] <= node.threshold else node.right
        node = tree.nodes[child]
    return node.class_id


@dataclass(frozen=True)
class TreeStats:
    height: int
    total_leaves: int
    leaves_per_family: dict
    unique_configs_per_family: dict


def _family_lookup(class_sidecar):
    if hasattr(class_sidecar, "family_of"):
        return class_sidecar.family_of
    return lambda cid: class_sidecar[cid]


def stats(tree: DecisionTree, class_sidecar) -> TreeStats:
    """Height, leaf counts, and per-family leaf/unique-config counts.

    class_sidecar maps class id -> family (a dict or anything with a
    family_of method, e.g. a dataset ClassIndex).
    """
    family_of = _family_lookup(class_sidecar)
    leaves_per = {KernelFamily.DIRECT: 0, KernelFamily.INDIRECT: 0}
    unique_per = {KernelFamily.DIRECT: set(), KernelFamily.INDIRECT: set()}
    for leaf in tree.leaves():
        try:
            family = KernelFamily(family_of(leaf.class_id))
        except (KeyError, IndexError) as exc:
            raise LookupError(f"leaf class id {leaf.class_id} unknown to the sidecar") from exc
        leaves_per[family] += 1
        unique_per[family].add(leaf.class_id)
    return TreeStats(
        height=tree.height(),
        total_leaves=len(tree.leaves()),
        leaves_per_family=leaves_per,
        unique_configs_per_family={fam: len(s) for fam, s in unique_per.items()},
    )


DEFAULT_HEIGHTS = (1, 2, 4, 8, UNBOUNDED)
DEFAULT_MIN_LEAF = (1, 2, 4, 0.1, 0.2, 0.3, 0.4, 0.5)


def grid_name(max_height, min_leaf) -> str:
    h = "Max" if max_height is UNBOUNDED else str(max_height)
    return f"h{h}-L{min_leaf}"


def grid_train(train_records, heights=DEFAULT_HEIGHTS, min_leafs=DEFAULT_MIN_LEAF,
               ) -> list[tuple[str, DecisionTree]]:
    """One tree per (height, min-leaf) cell, named like h8-L0.1 / hMax-L1."""
    if not heights or not min_leafs:
        raise ValueError("height and min-leaf sets must be non-empty")
    out = []
    for h in heights:
        for L in min_leafs:
            cfg = TrainConfig(max_height=h, min_samples_leaf=L)
            out.append((grid_name(h, L), train(train_records, cfg)))
    return out


def save_tree(tree: DecisionTree, path) -> None:
    with open(path, "w") as fh:
        json.dump(tree.to_dict(), fh, indent=1)
        fh.write("\n")


def load_tree(path) -> DecisionTree:
    with open(path) as fh:
        return DecisionTree.from_dict(json.load(fh))
