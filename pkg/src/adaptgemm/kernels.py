"""GEMM kernels: a naive reference oracle plus two parametric cache-blocked families.

The "direct" family runs straight on the caller's buffers and handles ragged
tile edges (and transposes, via index remapping) inside the kernel. The
"indirect" family first packs the operands into tile-aligned padded buffers
(O(n^2) helper passes, always executed) and then runs a branch-free blocked
core that assumes exact tile multiples. Reported execution time covers the
full path, helpers included, so the two families expose the classic
O(n^2)-helpers-versus-slower-O(n^3)-kernel trade-off to the tuner.

Both families accumulate in float64 regardless of element type and use a
fixed summation order, so results are deterministic run to run.
"""

import itertools
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with the problem shape."""


class ConfigError(ValueError):
    """Kernel configuration is invalid or illegal for the device caps."""


class KernelFamily(str, Enum):
    DIRECT = "direct"
    INDIRECT = "indirect"


@dataclass(frozen=True)
class ProblemShape:
    """One GEMM problem: C = alpha * op(A) @ op(B) + beta * C.

    op(A) is M x K and op(B) is K x N; transposition flags describe the
    stored layout of A and B relative to that.
    """

    M: int
    N: int
    K: int
    alpha: float = 1.0
    beta: float = 0.0
    transA: bool = False
    transB: bool = False

    def __post_init__(self):
        for name in ("M", "N", "K"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ShapeError(f"{name} must be a positive integer, got {v!r}")

    @property
    def mnk(self) -> tuple[int, int, int]:
        return (self.M, self.N, self.K)


@dataclass(frozen=True)
class DeviceCaps:
    """Resource limits that decide which kernel configurations are legal."""

    tile_memory_cap: int = 32768
    register_tile_cap_direct: int = 8
    register_tile_cap_indirect: int = 32
    element_size: int = 4

    def __post_init__(self):
        for name in ("tile_memory_cap", "register_tile_cap_direct",
                     "register_tile_cap_indirect", "element_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def register_tile_cap(self, family: KernelFamily) -> int:
        if family is KernelFamily.DIRECT:
            return self.register_tile_cap_direct
        return self.register_tile_cap_indirect


@dataclass(frozen=True, order=True)
class KernelConfig:
    """A fully specified kernel variant: family plus all tuning parameters.

    block_m/block_n/block_k are the work-group tile sizes per dimension,
    tile_m/tile_n the per-thread register tile, unroll_k the K-loop unroll
    factor (indirect only; fixed 1 for direct). Field order defines the
    canonical total order.
    """

    family: KernelFamily
    block_m: int
    block_n: int
    block_k: int
    tile_m: int
    tile_n: int
    unroll_k: int = 1

    def canonical(self) -> str:
        """Stable textual identity; equal strings mean the same class."""
        return (f"{self.family.value}:{self.block_m}-{self.block_n}-{self.block_k}"
                f"-{self.tile_m}-{self.tile_n}-{self.unroll_k}")

    def param_tuple(self) -> tuple[int, int, int, int, int, int]:
        return (self.block_m, self.block_n, self.block_k,
                self.tile_m, self.tile_n, self.unroll_k)

    @classmethod
    def from_canonical(cls, text: str) -> "KernelConfig":
        try:
            fam, params = text.split(":")
            bm, bn, bk, tm, tn, uk = (int(p) for p in params.split("-"))
        except ValueError as exc:
            raise ConfigError(f"bad canonical config {text!r}") from exc
        return cls(KernelFamily(fam), bm, bn, bk, tm, tn, uk)


# Parameter domains for exhaustive enumeration, in canonical order.
DIRECT_DOMAINS = {
    "block_m": (8, 16, 32),
    "block_n": (8, 16, 32),
    "block_k": (8, 16),
    "tile_m": (1, 2, 4),
    "tile_n": (1, 2, 4),
    "unroll_k": (1,),
}
INDIRECT_DOMAINS = {
    "block_m": (16, 32, 64),
    "block_n": (16, 32, 64),
    "block_k": (8, 16, 32),
    "tile_m": (2, 4, 8),
    "tile_n": (2, 4, 8),
    "unroll_k": (1, 2),
}


def domains_for(family: KernelFamily) -> dict[str, tuple[int, ...]]:
    return DIRECT_DOMAINS if family is KernelFamily.DIRECT else INDIRECT_DOMAINS


def is_legal(config: KernelConfig, caps: DeviceCaps) -> bool:
    """Check every configuration invariant under the given caps."""
    c = config
    if min(c.param_tuple()) < 1:
        return False
    if c.family is KernelFamily.DIRECT and c.unroll_k != 1:
        return False
    if c.block_m % c.tile_m or c.block_n % c.tile_n or c.block_k % c.unroll_k:
        return False
    if c.tile_m * c.tile_n > caps.register_tile_cap(c.family):
        return False
    if (c.block_m + c.block_n) * c.block_k * caps.element_size > caps.tile_memory_cap:
        return False
    return True


def enumerate_search_space(family: KernelFamily, caps: DeviceCaps = DeviceCaps()) -> list[KernelConfig]:
    """All legal configs of one family, in deterministic canonical order."""
    dom = domains_for(family)
    out = []
    for bm, bn, bk, tm, tn, uk in itertools.product(
            dom["block_m"], dom["block_n"], dom["block_k"],
            dom["tile_m"], dom["tile_n"], dom["unroll_k"]):
        cfg = KernelConfig(family, bm, bn, bk, tm, tn, uk)
        if is_legal(cfg, caps):
            out.append(cfg)
    return out


def full_search_space(caps: DeviceCaps = DeviceCaps()) -> list[KernelConfig]:
    """Both families concatenated: direct block first, then indirect."""
    return (enumerate_search_space(KernelFamily.DIRECT, caps)
            + enumerate_search_space(KernelFamily.INDIRECT, caps))


# ---------------------------------------------------------------------------
# jitted cores


@njit(cache=True)
def _kernel_reference(A, B, C, out, alpha, beta, ta, tb):
    M, N = out.shape
    K = A.shape[0] if ta else A.shape[1]
    for i in range(M):
        for j in range(N):
            acc = 0.0
            for k in range(K):
                a = A[k, i] if ta else A[i, k]
                b = B[j, k] if tb else B[k, j]
                acc += np.float64(a) * np.float64(b)
            out[i, j] = alpha * acc + beta * np.float64(C[i, j])


@njit(cache=True)
def _kernel_direct(A, B, C, out, alpha, beta, ta, tb, bm, bn, bk, tm, tn):
    M, N = out.shape
    K = A.shape[0] if ta else A.shape[1]
    acc = np.empty((bm, bn), np.float64)
    for ii in range(0, M, bm):
        ih = min(ii + bm, M)
        for jj in range(0, N, bn):
            jh = min(jj + bn, N)
            for i in range(ih - ii):
                for j in range(jh - jj):
                    acc[i, j] = 0.0
            for kk in range(0, K, bk):
                kh = min(kk + bk, K)
                for i0 in range(ii, ih, tm):
                    i1 = min(i0 + tm, ih)
                    for j0 in range(jj, jh, tn):
                        j1 = min(j0 + tn, jh)
                        for k in range(kk, kh):
                            for i in range(i0, i1):
                                a = np.float64(A[k, i]) if ta else np.float64(A[i, k])
                                if tb:
                                    for j in range(j0, j1):
                                        acc[i - ii, j - jj] += a * np.float64(B[j, k])
                                else:
                                    for j in range(j0, j1):
                                        acc[i - ii, j - jj] += a * np.float64(B[k, j])
            for i in range(ii, ih):
                for j in range(jj, jh):
                    out[i, j] = alpha * acc[i - ii, j - jj] + beta * np.float64(C[i, j])


@njit(cache=True)
def _kernel_tiled(Ap, Bp, Cp, outp, alpha, beta, bm, bn, bk, tm, tn, uk):
    # Assumes every dimension is an exact multiple of its tile size.
    Mp, Kp = Ap.shape
    Np = Bp.shape[1]
    acc = np.empty((bm, bn), np.float64)
    for ii in range(0, Mp, bm):
        for jj in range(0, Np, bn):
            for i in range(bm):
                for j in range(bn):
                    acc[i, j] = 0.0
            for kk in range(0, Kp, bk):
                for i0 in range(ii, ii + bm, tm):
                    for j0 in range(jj, jj + bn, tn):
                        if uk == 2:
                            for k in range(kk, kk + bk, 2):
                                for i in range(i0, i0 + tm):
                                    a0 = np.float64(Ap[i, k])
                                    a1 = np.float64(Ap[i, k + 1])
                                    for j in range(j0, j0 + tn):
                                        acc[i - ii, j - jj] += (a0 * np.float64(Bp[k, j])
                                                                + a1 * np.float64(Bp[k + 1, j]))
                        else:
                            for k in range(kk, kk + bk):
                                for i in range(i0, i0 + tm):
                                    a = np.float64(Ap[i, k])
                                    for j in range(j0, j0 + tn):
                                        acc[i - ii, j - jj] += a * np.float64(Bp[k, j])
            for i in range(bm):
                for j in range(bn):
                    outp[ii + i, jj + j] = alpha * acc[i, j] + beta * np.float64(Cp[ii + i, jj + j])


# ---------------------------------------------------------------------------
# helper passes and public entry points


def _round_up(x: int, step: int) -> int:
    return -(-x // step) * step


def _check_operands(shape: ProblemShape, A, B, C):
    a_dims = (shape.K, shape.M) if shape.transA else (shape.M, shape.K)
    b_dims = (shape.N, shape.K) if shape.transB else (shape.K, shape.N)
    if A.ndim != 2 or A.shape != a_dims:
        raise ShapeError(f"A has shape {A.shape}, expected {a_dims}")
    if B.ndim != 2 or B.shape != b_dims:
        raise ShapeError(f"B has shape {B.shape}, expected {b_dims}")
    if C.ndim != 2 or C.shape != (shape.M, shape.N):
        raise ShapeError(f"C has shape {C.shape}, expected {(shape.M, shape.N)}")
    if not (A.dtype == B.dtype == C.dtype):
        raise ShapeError(f"mixed dtypes: {A.dtype}, {B.dtype}, {C.dtype}")
    if A.dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {A.dtype}, want float32 or float64")


def _prepare_out(shape: ProblemShape, dtype, out):
    if out is None:
        return np.empty((shape.M, shape.N), dtype)
    if out.shape != (shape.M, shape.N) or out.dtype != dtype:
        raise ShapeError("out buffer has wrong shape or dtype")
    return out


def gemm_reference(shape: ProblemShape, A: np.ndarray, B: np.ndarray,
                   C: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Textbook triple-loop GEMM in fixed (i, j, k) order; the correctness oracle."""
    _check_operands(shape, A, B, C)
    out = _prepare_out(shape, A.dtype, out)
    _kernel_reference(A, B, C, out, float(shape.alpha), float(shape.beta),
                      shape.transA, shape.transB)
    return out


def pack_padded(X: np.ndarray, rows: int, cols: int, transpose: bool,
                pad_rows: int, pad_cols: int) -> np.ndarray:
    """Indirect-family helper pass: copy op(X) into a zero-padded buffer."""
    Xp = np.zeros((pad_rows, pad_cols), X.dtype)
    Xp[:rows, :cols] = X.T if transpose else X
    return Xp


def _run_indirect(shape: ProblemShape, config: KernelConfig, A, B, C, out):
    M, N, K = shape.mnk
    bm, bn, bk = config.block_m, config.block_n, config.block_k
    Mp, Np, Kp = _round_up(M, bm), _round_up(N, bn), _round_up(K, bk)
    Ap = pack_padded(A, M, K, shape.transA, Mp, Kp)
    Bp = pack_padded(B, K, N, shape.transB, Kp, Np)
    if shape.beta != 0.0:
        Cp = pack_padded(C, M, N, False, Mp, Np)
    else:
        Cp = np.zeros((Mp, Np), C.dtype)
    outp = np.empty((Mp, Np), C.dtype)
    _kernel_tiled(Ap, Bp, Cp, outp, float(shape.alpha), float(shape.beta),
                  bm, bn, bk, config.tile_m, config.tile_n, config.unroll_k)
    out[:, :] = outp[:M, :N]


def gemm_execute(shape: ProblemShape, config: KernelConfig, A: np.ndarray,
                 B: np.ndarray, C: np.ndarray, caps: DeviceCaps = DeviceCaps(),
                 out: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Run one kernel configuration end to end and time the full path.

    For the indirect family the elapsed time includes the padding/packing
    helper passes and the final unpad copy. Returns (result, seconds).
    """
    if not is_legal(config, caps):
        raise ConfigError(f"illegal config {config.canonical()} for caps {caps}")
    _check_operands(shape, A, B, C)
    out = _prepare_out(shape, A.dtype, out)
    alpha, beta = float(shape.alpha), float(shape.beta)
    t0 = time.perf_counter()
    if config.family is KernelFamily.DIRECT:
        _kernel_direct(A, B, C, out, alpha, beta, shape.transA, shape.transB,
                       config.block_m, config.block_n, config.block_k,
                       config.tile_m, config.tile_n)
    else:
        _run_indirect(shape, config, A, B, C, out)
    elapsed = time.perf_counter() - t0
    return out, max(elapsed, 1e-9)


def warm_kernels(dtype=np.float32) -> None:
    """Trigger JIT compilation of all kernel cores for one element type."""
    shape = ProblemShape(4, 4, 4, alpha=1.0, beta=1.0)
    A = np.ones((4, 4), dtype)
    B = np.ones((4, 4), dtype)
    C = np.ones((4, 4), dtype)
    gemm_reference(shape, A, B, C)
    gemm_execute(shape, KernelConfig(KernelFamily.DIRECT, 8, 8, 8, 2, 2, 1), A, B, C)
    for uk in (1, 2):
        gemm_execute(shape, KernelConfig(KernelFamily.INDIRECT, 16, 16, 8, 2, 2, uk), A, B, C)
