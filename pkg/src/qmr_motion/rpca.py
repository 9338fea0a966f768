# src/qmr_motion/rpca.py
"""
Low-rank plus sparse decomposition of an image sequence (GoDec).

Frames are flattened into the rows of an N × (H·W) matrix M. Each iteration
replaces L with the best rank-r approximation of M − S and S with the
largest-magnitude entries of M − L.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .config import RpcaConfig
from .errors import ConfigError, ConvergenceError, ValidationError
from .stack import ImageStack

logger = logging.getLogger(__name__)

_SUBSPACE_MAX_ITERATIONS = 1000
_SUBSPACE_TOLERANCE = 1e-14


def compute_default_lambda(m: int, n: int) -> float:
    """Sparsity weight of the convex rPCA program, 1/sqrt(max(m, n)). Reported only; GoDec does not use it."""
    if m < 1 or n < 1:
        raise ValidationError(f"matrix dimensions must be positive, got ({m}, {n})")
    return 1.0 / math.sqrt(max(m, n))


def truncated_svd(matrix: np.ndarray, rank: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Top-`rank` singular triplets (U, s, Vt) of `matrix`.

    Works on the Gram matrix of the shorter side with subspace iteration from a
    start block drawn from `seed`, so repeated calls are bitwise identical. When the
    block spans the whole short side the eigendecomposition is exact.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"expected a 2D matrix, got {a.ndim}D")
    rows, cols = a.shape
    if not 1 <= rank <= min(rows, cols):
        raise ConfigError(f"rank {rank} out of range for a {rows}x{cols} matrix")

    transposed = rows > cols
    if transposed:
        a = a.T
        rows, cols = cols, rows

    gram = a @ a.T
    block = min(rows, 2 * rank + 10)
    if block == rows:
        eigenvalues, eigenvectors = np.linalg.eigh(gram)
    else:
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((rows, block)))
        previous = None
        for _ in range(_SUBSPACE_MAX_ITERATIONS):
            basis, _ = np.linalg.qr(gram @ basis)
            eigenvalues, ritz = np.linalg.eigh(basis.T @ gram @ basis)
            top = eigenvalues[::-1][:rank]
            scale = max(abs(top[0]), np.finfo(np.float64).tiny)
            if previous is not None and np.all(np.abs(top - previous) <= _SUBSPACE_TOLERANCE * scale):
                break
            previous = top
        eigenvectors = basis @ ritz

    # eigh sorts ascending
    w = eigenvalues[::-1][:rank]
    u = eigenvectors[:, ::-1][:, :rank].copy()

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(rank)])
    signs[signs == 0] = 1.0
    u *= signs

    s = np.sqrt(np.clip(w, 0.0, None))
    vt = np.zeros((rank, cols))
    positive = s > 0
    if positive.any():
        vt[positive] = (u[:, positive].T @ a) / s[positive, None]

    if transposed:
        return vt.T, s, u.T
    return u, s, vt


def _hard_threshold(residual: np.ndarray, cardinality: int) -> np.ndarray:
    """Keeps the `cardinality` largest-magnitude entries; ties broken by flat index."""
    flat = residual.ravel()
    if cardinality >= flat.size:
        return residual.copy()
    keep = np.argsort(-np.abs(flat), kind="stable")[:cardinality]
    sparse = np.zeros_like(flat)
    sparse[keep] = flat[keep]
    return sparse.reshape(residual.shape)


@dataclass(frozen=True)
class Decomposition:
    low_rank: ImageStack
    sparse: ImageStack
    rank: int
    iterations_used: int
    final_relative_error: float
    singular_values: np.ndarray
    objective_trace: List[float] = field(default_factory=list)
    default_lambda: float = 0.0

    def residual(self, stack: ImageStack) -> np.ndarray:
        return stack.frames - self.low_rank.frames - self.sparse.frames

    def to_report(self) -> Dict[str, Any]:
        return {
            "rank": self.rank,
            "iterations": self.iterations_used,
            "final_relative_error": self.final_relative_error,
            "singular_values": [float(v) for v in self.singular_values],
            "sparse_nonzeros": int(np.count_nonzero(self.sparse.frames)),
            "objective_trace": [float(v) for v in self.objective_trace],
            "default_lambda": self.default_lambda,
        }


def godec_decompose(stack: ImageStack, config: Optional[RpcaConfig] = None, seed: int = 0) -> Decomposition:
    config = config or RpcaConfig()
    m = stack.matrix()
    n_rows, n_cols = m.shape
    rank = config.resolved_rank(n_rows)
    if rank > min(n_rows, n_cols):
        raise ConfigError(f"rank {rank} exceeds min(N, H*W) = {min(n_rows, n_cols)}")
    cardinality = int(math.ceil(config.sparse_fraction * n_rows * n_cols))
    default_lambda = compute_default_lambda(n_rows, n_cols)
    logger.info("GoDec: rank=%d, cardinality=%d, lambda(reference only)=%.6g", rank, cardinality, default_lambda)

    norm_m = float(np.linalg.norm(m))
    if norm_m == 0.0:
        zeros = np.zeros_like(stack.frames)
        return Decomposition(stack.with_frames(zeros), stack.with_frames(zeros), rank, 1, 0.0,
                             np.zeros(rank), [0.0], default_lambda)

    sparse = np.zeros_like(m)
    low_rank = np.zeros_like(m)
    singular_values = np.zeros(rank)
    trace: List[float] = []
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        u, singular_values, vt = truncated_svd(m - sparse, rank, seed)
        low_rank = (u * singular_values) @ vt
        sparse = _hard_threshold(m - low_rank, cardinality)
        error = float(np.linalg.norm(m - low_rank - sparse)) / norm_m
        trace.append(error)
        logger.debug("GoDec iteration %d: relative error %.3e", iterations, error)

        if len(trace) > 1 and error > trace[-2] * (1 + 1e-9) + 1e-15:
            message = f"GoDec objective increased at iteration {iterations}: {trace[-2]:.3e} -> {error:.3e}"
            if config.debug:
                raise ConvergenceError(message)
            logger.warning(message)
        if len(trace) > 1 and abs(trace[-2] - error) < config.tolerance:
            break
    else:
        logger.info("GoDec stopped at max_iterations=%d (relative error %.3e)", config.max_iterations, trace[-1])

    shape = stack.frames.shape
    return Decomposition(
        low_rank=stack.with_frames(low_rank.reshape(shape)),
        sparse=stack.with_frames(sparse.reshape(shape)),
        rank=rank,
        iterations_used=iterations,
        final_relative_error=trace[-1],
        singular_values=np.asarray(singular_values).copy(),
        objective_trace=trace,
        default_lambda=default_lambda,
    )
