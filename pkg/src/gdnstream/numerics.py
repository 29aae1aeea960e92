"""Dense-array kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects (float64 for correctness work,
float32 allowed on the benchmark path).  Every function here is pure and
keeps the dtype of its inputs.

``matmul`` sums over the inner dimension strictly left to right, so results
are bit-identical to a naive triple loop and reproducible run to run.  It
also reports multiply-adds to the innermost active :func:`count_macs` scope,
which is how the streaming harness instruments attention cost.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

EPS_NORM = 1e-12
ROPE_BASE = 10000.0

# Above this many intermediate products matmul accumulates with a k-loop
# instead of materialising the (m, k, n) product tensor.
_DENSE_LIMIT = 1 << 22


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


# ---------------------------------------------------------------------------
# multiply-add instrumentation

@dataclass
class MacCounter:
    total: int = 0
    parent: Optional["MacCounter"] = field(default=None, repr=False)

    def add(self, n: int) -> None:
        c = self
        while c is not None:
            c.total += n
            c = c.parent


_ACTIVE: contextvars.ContextVar[Optional[MacCounter]] = contextvars.ContextVar(
    "gdnstream_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-adds issued inside the block.

    Scopes nest: an inner scope's count is also added to every enclosing
    scope.  The active scope is a context variable, so threads and tasks
    do not see each other's counters.
    """
    counter = MacCounter(parent=_ACTIVE.get())
    token = _ACTIVE.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE.reset(token)


def tally_macs(n: int) -> None:
    counter = _ACTIVE.get()
    if counter is not None:
        counter.add(int(n))


# ---------------------------------------------------------------------------
# kernels

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product ``a @ b`` with a fixed summation order.

    Leading (batch) dimensions broadcast as in ``numpy.matmul``; both
    operands must be at least 2-D.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    dtype = np.result_type(a, b)
    tally_macs(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    if k == 0:
        return np.zeros(batch + (m, n), dtype=dtype)
    nbatch = int(np.prod(batch, dtype=np.int64))
    if nbatch * m * k * n <= _DENSE_LIMIT:
        prods = a[..., :, :, None] * b[..., None, :, :]
        # add.accumulate is a strictly sequential left-to-right scan
        return np.add.accumulate(prods, axis=-2)[..., -1, :].astype(dtype, copy=False)
    out = np.zeros(batch + (m, n), dtype=dtype)
    for p in range(k):
        out += a[..., :, p, None] * b[..., None, p, :]
    return out


def softmax_rows(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax along the last axis, optionally with an additive {0, -inf} mask."""
    z = np.asarray(x)
    if mask is not None:
        z = z + np.asarray(mask, dtype=z.dtype)
    row_max = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        if np.any(row_max == -np.inf):
            raise ContractError("softmax row has no unmasked entry (empty attention window)")
        raise ContractError("softmax input is not finite")
    e = np.exp(z - row_max)
    return e / np.sum(e, axis=-1, keepdims=True)


def row_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row, keepdims.

    Rows whose squares overflow are recomputed after scaling by their largest
    entry; every other row keeps the plain sum-of-squares result.
    """
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    bad = np.isinf(norm) & np.all(np.isfinite(x), axis=-1, keepdims=True)
    if np.any(bad):
        top = np.max(np.abs(x), axis=-1, keepdims=True)
        top = np.where(bad, top, 1.0)
        scaled = x / top
        norm = np.where(bad, top * np.sqrt(np.sum(scaled * scaled, axis=-1, keepdims=True)), norm)
    return norm


def l2norm_rows(x: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """Scale every row (last axis) to unit Euclidean norm.

    Rows whose norm is below ``eps`` map to the zero row.
    """
    x = np.asarray(x)
    norm = row_norms(x)
    small = norm < eps
    safe = np.where(small, 1.0, norm).astype(x.dtype, copy=False)
    return np.where(small, 0.0, x / safe).astype(x.dtype, copy=False)


def rope_angles(positions: Sequence[int], dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotation angles, shape (len(positions), dim // 2), always float64."""
    if dim % 2:
        raise ContractError(f"rotary embedding needs an even width, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 1 or np.any(pos < 0):
        raise ContractError("positions must be a 1-D list of nonnegative integers")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return pos[:, None] * inv_freq[None, :]


def rope(x: np.ndarray, positions: Sequence[int], base: float = ROPE_BASE,
         inverse: bool = False) -> np.ndarray:
    """Rotary position embedding over the last axis.

    ``x`` has shape (m, ..., D): axis 0 indexes tokens and is paired with
    ``positions``; any middle axes (e.g. heads) share the token's angle.
    Consecutive pairs (x[2i], x[2i+1]) rotate by ``pos * base**(-2i/D)``.
    ``inverse=True`` applies the transpose rotation.
    """
    x = np.asarray(x)
    if x.shape[0] != len(positions):
        raise ContractError(f"{len(positions)} positions for {x.shape[0]} rows")
    theta = rope_angles(positions, x.shape[-1], base)
    theta = theta.reshape((x.shape[0],) + (1,) * (x.ndim - 2) + (theta.shape[-1],))
    cos = np.cos(theta).astype(x.dtype, copy=False)
    sin = np.sin(theta).astype(x.dtype, copy=False)
    if inverse:
        sin = -sin
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    # split by sign so neither branch overflows
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(x.dtype, copy=False)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def concat(parts: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    return np.concatenate(list(parts), axis=axis)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded PCG64 generator.

    ``stream`` selects an independent substream of the same seed, so weights
    and noise drawn for one run never share samples.
    """
    return np.random.Generator(np.random.PCG64([int(seed) & (2**64 - 1), int(stream)]))


def dtype_for(precision: str) -> np.dtype:
    try:
        return {"double": np.dtype(np.float64), "single": np.dtype(np.float32)}[precision]
    except KeyError:
        raise ContractError(f"precision must be 'double' or 'single', got {precision!r}") from None
