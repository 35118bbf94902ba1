"""Numeric substrate: seeded random streams, matrix helpers and a jittered log-determinant.

Matrices are plain ``float64`` numpy arrays. Random draws never touch global
state; every draw goes through an :class:`RngStream` whose identity is the pair
``(root_seed, stream_key)``, so the same key always yields the same numbers no
matter which order (or thread) asks for them.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, SingularityError

# multipliers applied to the base jitter after a failed factorization
JITTER_LADDER = (1.0, 10.0, 100.0, 1000.0)
DEFAULT_RELATIVE_JITTER = 1e-6
# a Cholesky pivot below this fraction of the largest diagonal is treated as a failure
PIVOT_RTOL = 1e-10
SYMMETRY_ATOL = 1e-9


def _key_word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise DomainError(f"stream key integers must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key component {part!r}")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream addressed by ``(root_seed, key)``.

    ``key`` is a tuple such as ``(step, node_id, "score-sample")``.
    """

    root_seed: int
    key: tuple = ()

    def child(self, *parts) -> "RngStream":
        return RngStream(self.root_seed, self.key + tuple(parts))

    def generator(self) -> np.random.Generator:
        words = tuple(_key_word(p) for p in self.key)
        seq = np.random.SeedSequence(entropy=int(self.root_seed) & (2**64 - 1), spawn_key=words)
        return np.random.Generator(np.random.PCG64(seq))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _try_cholesky(k: np.ndarray):
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return None
    pivots = np.diag(chol)
    if not np.all(np.isfinite(pivots)):
        return None
    if pivots.min() ** 2 <= PIVOT_RTOL * max(np.max(np.diag(k)), np.finfo(float).tiny):
        return None
    return chol


def jitter_ladder(k: np.ndarray, jitter: float | None) -> list[float]:
    """Jitter values tried, in order, when factorizing ``k``."""
    mean_diag = float(np.mean(np.diag(k))) if k.size else 0.0
    default = DEFAULT_RELATIVE_JITTER * mean_diag if mean_diag > 0 else DEFAULT_RELATIVE_JITTER
    if jitter is None:
        jitter = default
    if jitter > 0:
        return [jitter * m for m in JITTER_LADDER]
    # an exact attempt first, then the default ladder
    return [0.0] + [default * m for m in JITTER_LADDER]


def log_det_psd(k, jitter: float | None = 0.0) -> float:
    """``log|k + jitter*I|`` for a symmetric positive semi-definite ``k``.

    The determinant is read off a Cholesky factor. When the factorization fails
    (or leaves a vanishing pivot) the jitter is escalated along
    :func:`jitter_ladder`; ``SingularityError`` is raised only once the ladder is
    exhausted. ``jitter=None`` starts from ``1e-6 * mean(diag(k))``.
    """
    k = as_matrix(k)
    n, m = k.shape
    if n != m:
        raise ShapeError(f"log-determinant needs a square matrix, got {k.shape}")
    if jitter is not None and jitter < 0:
        raise DomainError("jitter must be non-negative")
    if not np.allclose(k, k.T, rtol=0.0, atol=SYMMETRY_ATOL):
        raise ShapeError("log-determinant needs a symmetric matrix")
    if n == 0:
        return 0.0
    ladder = jitter_ladder(k, jitter)
    eye = np.eye(n)
    for j in ladder:
        chol = _try_cholesky(k + j * eye if j else k)
        if chol is not None:
            return float(2.0 * np.sum(np.log(np.diag(chol))))
    raise SingularityError(f"factorization failed for every jitter in {ladder}", ladder)


def rand_normal(stream: RngStream, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise DomainError("std must be non-negative")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return stream.generator().normal(mean, std, size=(rows, cols))


def bernoulli_mask(stream: RngStream, rows: int, cols: int, p_keep: float) -> np.ndarray:
    if not 0.0 <= p_keep <= 1.0:
        raise DomainError(f"p_keep must lie in [0, 1], got {p_keep}")
    u = stream.generator().random((rows, cols))
    return (u < p_keep).astype(np.float64)


def fmt_real(v) -> str:
    """17 significant digits, enough for an exact float round trip; ``None`` prints empty."""
    return "" if v is None else format(float(v), ".17g")
