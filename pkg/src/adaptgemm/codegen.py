"""Emit a trained tree as dispatcher source and run the dispatch path.

The emitter produces a nested if/else selector over (m, n, k) in either plain
C ("c", for compiling into a host library or inspecting/diffing) or Python
("python", exec-able and used by the in-process dispatch path). Comparisons
keep the exact `feature <= threshold` orientation of tree prediction and
thresholds are printed with shortest round-trip precision, so compiled
behavior matches in-memory prediction bit for bit. Emission is deterministic:
the same tree yields byte-identical source, stamped with the tree's
fingerprint.
"""

import hashlib
import json
import math
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .kernels import (
    ConfigError,
    DeviceCaps,
    KernelConfig,
    KernelFamily,
    ProblemShape,
    gemm_execute,
    is_legal,
)
from .model import DecisionTree, LeafNode, predict

FALLBACK_CONFIG = KernelConfig(KernelFamily.DIRECT, 8, 8, 8, 1, 1, 1)

SYNTAX_C = "c"
SYNTAX_PYTHON = "python"

_FEATURE_VARS = ("m", "n", "k")
_WIRE_FIELDS = ("Mwg", "Nwg", "Kwg", "Mwi", "Nwi", "Kwi")


class CodegenError(RuntimeError):
    """Dispatcher generation failed (e.g. unresolvable leaf class id)."""


def tree_fingerprint(tree: DecisionTree) -> str:
    doc = json.dumps(tree.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def config_literal(config: KernelConfig) -> dict:
    lit = {"family": config.family.value}
    lit.update(zip(_WIRE_FIELDS, config.param_tuple()))
    return lit


def config_from_literal(lit: dict) -> KernelConfig:
    return KernelConfig(KernelFamily(lit["family"]),
                        *(int(lit[f]) for f in _WIRE_FIELDS))


@dataclass(frozen=True)
class DispatcherSource:
    text: str
    syntax: str
    tree_fingerprint: str
    class_map: dict  # class id -> KernelConfig for every leaf in the tree


def _leaf_configs(tree: DecisionTree, classes) -> dict[int, KernelConfig]:
    lookup = classes.config_of if hasattr(classes, "config_of") else classes.__getitem__
    out = {}
    for leaf in tree.leaves():
        try:
            out[leaf.class_id] = lookup(leaf.class_id)
        except (KeyError, IndexError) as exc:
            raise CodegenError(f"class id {leaf.class_id} has no config in the sidecar") from exc
    return out


def _render(tree, leaf_line, if_line, else_line, end_line, base_depth):
    lines = []
    work = [("node", tree.root, base_depth)]
    while work:
        item = work.pop()
        if item[0] == "text":
            lines.append(item[1])
            continue
        _, idx, depth = item
        node = tree.nodes[idx]
        if isinstance(node, LeafNode):
            lines.append(leaf_line(node, depth))
            continue
        lines.append(if_line(node, depth))
        if end_line is not None:
            work.append(("text", end_line(depth)))
        work.append(("node", node.right, depth + 1))
        work.append(("text", else_line(depth)))
        work.append(("node", node.left, depth + 1))
    return lines


def emit_dispatcher(tree: DecisionTree, classes, syntax: str = SYNTAX_C,
                    provenance: str | None = None) -> DispatcherSource:
    """Turn a tree into selector source; every leaf returns a full config literal."""
    configs = _leaf_configs(tree, classes)
    fp = tree_fingerprint(tree)
    header_info = (f"tree sha256:{fp} | provenance: {provenance or 'unspecified'}"
                   f" | adaptgemm {__version__}")
    ind = "    "

    if syntax == SYNTAX_PYTHON:
        def leaf_line(node, depth):
            lit = config_literal(configs[node.class_id])
            body = ", ".join(f"{k!r}: {v!r}" for k, v in lit.items())
            return f"{ind * depth}return {{{body}}}"

        lines = [f"# adaptgemm dispatcher | {header_info}",
                 "",
                 f"def select_gemm_config({', '.join(_FEATURE_VARS)}):"]
        lines += _render(
            tree, leaf_line,
            lambda node, depth: f"{ind * depth}if {_FEATURE_VARS[node.feature]} <= {node.threshold!r}:",
            lambda depth: f"{ind * depth}else:",
            None, 1)
        text = "\n".join(lines) + "\n"
    elif syntax == SYNTAX_C:
        def leaf_line(node, depth):
            c = configs[node.class_id]
            fam = 0 if c.family is KernelFamily.DIRECT else 1
            params = ", ".join(str(p) for p in c.param_tuple())
            return f"{ind * depth}return (gemm_config_t){{{fam}, {params}}};"

        lines = [f"/* adaptgemm dispatcher | {header_info} */",
                 "",
                 "typedef struct {",
                 f"{ind}int family; /* 0 = direct, 1 = indirect */",
                 f"{ind}int mwg, nwg, kwg, mwi, nwi, kwi;",
                 "} gemm_config_t;",
                 "",
                 "static gemm_config_t select_gemm_config(long m, long n, long k) {"]
        lines += _render(
            tree, leaf_line,
            lambda node, depth: f"{ind * depth}if ({_FEATURE_VARS[node.feature]} <= {node.threshold!r}) {{",
            lambda depth: f"{ind * depth}}} else {{",
            lambda depth: f"{ind * depth}}}", 1)
        lines.append("}")
        text = "\n".join(lines) + "\n"
    else:
        raise CodegenError(f"unknown syntax {syntax!r}")
    return DispatcherSource(text, syntax, fp, configs)


def compile_python_selector(source: DispatcherSource):
    """Exec a python-syntax dispatcher and return its selector function."""
    if source.syntax != SYNTAX_PYTHON:
        raise CodegenError(f"cannot exec {source.syntax!r} source in-process")
    ns: dict = {}
    exec(compile(source.text, "<dispatcher>", "exec"), ns)
    return ns["select_gemm_config"]


def evaluate_c_source(source: DispatcherSource, probes) -> list[KernelConfig]:
    """Compile a c-syntax dispatcher with a batch driver and run all probes."""
    if source.syntax != SYNTAX_C:
        raise CodegenError("evaluate_c_source needs c-syntax source")
    cc = shutil.which("cc")
    if cc is None:
        raise CodegenError("no C compiler on PATH")
    driver = (
        '#include <stdio.h>\n\n%s\n'
        'int main(void) {\n'
        '    long m, n, k;\n'
        '    while (scanf("%%ld %%ld %%ld", &m, &n, &k) == 3) {\n'
        '        gemm_config_t c = select_gemm_config(m, n, k);\n'
        '        printf("%%s:%%d-%%d-%%d-%%d-%%d-%%d\\n",\n'
        '               c.family == 0 ? "direct" : "indirect",\n'
        '               c.mwg, c.nwg, c.kwg, c.mwi, c.nwi, c.kwi);\n'
        '    }\n'
        '    return 0;\n'
        '}\n') % source.text
    with tempfile.TemporaryDirectory() as td:
        src = Path(td) / "dispatcher_main.c"
        exe = Path(td) / "dispatcher"
        src.write_text(driver)
        res = subprocess.run([cc, "-O1", "-o", str(exe), str(src)],
                             capture_output=True, text=True)
        if res.returncode != 0:
            raise CodegenError(f"cc failed:\n{res.stderr}")
        stdin = "\n".join(f"{m} {n} {k}" for m, n, k in probes)
        run = subprocess.run([str(exe)], input=stdin, capture_output=True, text=True)
        if run.returncode != 0:
            raise CodegenError(f"dispatcher binary failed: {run.stderr}")
    return [KernelConfig.from_canonical(line) for line in run.stdout.split()]


# ---------------------------------------------------------------------------
# round-trip verification


def boundary_probes(tree: DecisionTree) -> list[tuple[int, int, int]]:
    """Path-feasible probes that pin down every internal threshold.

    For each internal node, emit probes whose split feature sits at floor(t),
    ceil(t), and floor(t)+1 while the remaining features satisfy the path
    from the root, so a threshold perturbation of +-1 anywhere flips at
    least one probe's routing.
    """
    probes = set()
    # Per-feature inclusive integer interval [lo, hi] (hi None = unbounded).
    stack = [(tree.root, ((1, None), (1, None), (1, None)))]
    while stack:
        idx, intervals = stack.pop()
        node = tree.nodes[idx]
        if isinstance(node, LeafNode):
            continue
        f, t = node.feature, node.threshold
        lo, hi = intervals[f]
        rep = [iv[0] for iv in intervals]
        for v in (math.floor(t), math.ceil(t), math.floor(t) + 1):
            probe = list(rep)
            probe[f] = max(1, v)
            probes.add(tuple(probe))
        below = min(hi, math.floor(t)) if hi is not None else math.floor(t)
        left_iv = (lo, below)
        right_iv = (max(lo, math.floor(t) + 1), hi)
        if left_iv[1] >= left_iv[0]:
            stack.append((node.left, intervals[:f] + (left_iv,) + intervals[f + 1:]))
        if right_iv[1] is None or right_iv[1] >= right_iv[0]:
            stack.append((node.right, intervals[:f] + (right_iv,) + intervals[f + 1:]))
    return sorted(probes)


@dataclass(frozen=True)
class RoundtripResult:
    ok: bool
    counterexample: tuple | None = None  # (mnk, tree_config, source_config)

    def __bool__(self) -> bool:
        return self.ok


def roundtrip_check(tree: DecisionTree, source: DispatcherSource,
                    probe_shapes) -> RoundtripResult:
    """True iff the emitted dispatcher selects exactly like tree prediction.

    Probes are the given shapes (typically the training set) plus generated
    threshold-boundary probes; the first disagreement is returned.
    """
    probes = []
    seen = set()
    for s in list(probe_shapes) + boundary_probes(tree):
        mnk = s.mnk if isinstance(s, ProblemShape) else tuple(s)
        if mnk not in seen:
            seen.add(mnk)
            probes.append(mnk)

    expected = [source.class_map[predict(tree, p)] for p in probes]
    if source.syntax == SYNTAX_PYTHON:
        selector = compile_python_selector(source)
        actual = [config_from_literal(selector(*p)) for p in probes]
    else:
        actual = evaluate_c_source(source, probes)
    for mnk, want, got in zip(probes, expected, actual):
        if want != got:
            return RoundtripResult(False, (mnk, want, got))
    return RoundtripResult(True)


# ---------------------------------------------------------------------------
# runtime dispatch


@dataclass
class DispatchResult:
    output: object
    selected: KernelConfig
    select_seconds: float
    exec_seconds: float
    used_fallback: bool = False


def dispatch_and_run(model, shape: ProblemShape, A, B, C,
                     caps: DeviceCaps = DeviceCaps(), classes=None,
                     fallback: KernelConfig = FALLBACK_CONFIG) -> DispatchResult:
    """Select a config for the shape, then execute it via the kernel path.

    `model` is a DecisionTree (needs `classes` to resolve leaf ids), a
    python-syntax DispatcherSource, or any callable (m, n, k) -> config
    literal dict. A selected config that is illegal under the current caps
    falls back to `fallback` and flags the event.
    """
    if isinstance(model, DecisionTree):
        if classes is None:
            raise CodegenError("dispatching a DecisionTree needs the class sidecar")
        lookup = classes.config_of if hasattr(classes, "config_of") else classes.__getitem__

        def selector(m, n, k):
            return lookup(predict(model, (m, n, k)))
    elif isinstance(model, DispatcherSource):
        fn = compile_python_selector(model)

        def selector(m, n, k):
            return config_from_literal(fn(m, n, k))
    elif callable(model):
        def selector(m, n, k):
            return config_from_literal(model(m, n, k))
    else:
        raise CodegenError(f"cannot dispatch with {type(model).__name__}")

    t0 = time.perf_counter()
    selected = selector(shape.M, shape.N, shape.K)
    select_seconds = time.perf_counter() - t0

    used_fallback = False
    if not is_legal(selected, caps):
        if not is_legal(fallback, caps):
            raise ConfigError(f"selected config {selected.canonical()} and fallback "
                              f"{fallback.canonical()} are both illegal under caps")
        selected = fallback
        used_fallback = True
    out, exec_seconds = gemm_execute(shape, selected, A, B, C, caps)
    return DispatchResult(out, selected, select_seconds, exec_seconds, used_fallback)


def write_dispatcher(source: DispatcherSource, path) -> None:
    Path(path).write_text(source.text)
