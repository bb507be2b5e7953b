"""Dense tensor kernels: deterministic RNG, checked matmul, and a Jacobi SVD.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
order.  Nothing here mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

DTYPE = np.float64

# Singular values below this fraction of the largest one count as zero when
# reporting numerical rank.
RANK_RTOL = 1e-12


class Rng:
    """Seeded generator backed by the Philox 4x64 counter-based bit generator.

    Philox output is specified by its algorithm rather than by platform, so a
    given seed yields the same stream on every machine.  ``split`` derives
    independent child streams through numpy's ``SeedSequence`` spawning.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if seed < 0:
                raise ParameterError(f"seed must be non-negative, got {seed}")
            self._seq = np.random.SeedSequence(int(seed))
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int = 2) -> list[Rng]:
        return [Rng(child) for child in self._seq.spawn(n)]

    def normal(self, size, loc=0.0, scale=1.0) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def uniform(self, size, low=0.0, high=1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)


def rand_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw a float64 tensor of i.i.d. normal samples."""
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if std == 0:
        return np.full(shape, float(mean), dtype=DTYPE)
    return rng.normal(shape, mean, std).astype(DTYPE, copy=False)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with explicit shape checking."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a rank-2 tensor, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(s) @ v.T`` with r = min(rows, cols)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        k = len(self.s) if rank is None else rank
        return (self.u[:, :k] * self.s[:k]) @ self.v[:, :k].T

    @property
    def rank(self) -> int:
        return numerical_rank(self.s)


def numerical_rank(s: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.asarray(s)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair schedule where each round holds disjoint column pairs covering all n(n-1)/2 pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for k in range(m // 2):
            i, j = players[k], players[m - 1 - k]
            if i >= 0 and j >= 0:
                left.append(min(i, j))
                right.append(max(i, j))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(q: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace the columns of q not flagged valid with an orthonormal completion."""
    m = q.shape[0]
    basis = [q[:, i] for i in np.flatnonzero(valid)]
    out = q.copy()
    candidates = iter(np.eye(m))
    for i in np.flatnonzero(~valid):
        while True:
            x = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    x -= (b @ x) * b
            nrm = np.linalg.norm(x)
            if nrm > 1e-8:
                x /= nrm
                break
        basis.append(x)
        out[:, i] = x
    return out


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int):
    m, n = a.shape
    work = a.copy()
    v = np.eye(n, dtype=DTYPE)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for left, right in rounds:
            if left.size == 0:
                continue
            ai, aj = work[:, left], work[:, right]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            zeta = np.ones_like(gamma)
            zeta[active] = (beta[active] - alpha[active]) / (2.0 * gamma[active])
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            vi, vj = v[:, left], v[:, right]
            work[:, left] = c * ai - s * aj
            work[:, right] = s * ai + c * aj
            v[:, left] = c * vi - s * vj
            v[:, right] = s * vi + c * vj
        if not rotated:
            break
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    smax = sigma[0] if n else 0.0
    valid = sigma > max(smax * n * np.finfo(DTYPE).eps, np.finfo(DTYPE).tiny)
    u = np.zeros_like(work)
    u[:, valid] = work[:, valid] / sigma[valid]
    sigma = np.where(valid, sigma, 0.0)
    if not valid.all():
        u = _complete_basis(u, valid)
    return u, sigma, v


def svd(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 80) -> SvdResult:
    """Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalized pairwise in a round-robin order, so each round's
    rotations are disjoint and applied together.  Singular values come out
    sorted non-increasing; columns belonging to zero singular values are
    completed to an orthonormal set.
    """
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2:
        raise DimensionError(f"svd expects a rank-2 tensor, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("svd input contains non-finite entries")
    rows, cols = m.shape
    if rows >= cols:
        u, s, v = _jacobi_tall(m, tol, max_sweeps)
    else:
        v, s, u = _jacobi_tall(m.T.copy(), tol, max_sweeps)
    return SvdResult(u=u, s=s, v=v)
