"""Block-causal softmax attention over a growing per-layer KV cache.

This is the baseline ("teacher") mechanism.  During streaming, the query
rows always belong to the newest frame, which attends bidirectionally to
itself and without restriction to every cached frame, so no mask is
materialised here; the dense block-causal mask only appears in the test
oracle that replays a whole clip at once.

Cached keys are stored after RoPE at their global token positions
(``frame * L + j``), so a streaming run and a full replay agree bitwise.

The helpers taking an ``ops`` argument are written once and evaluated
either on arrays (``numerics``) or on autodiff nodes (``autodiff``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import numerics
from .numerics import ContractError


@dataclass(frozen=True)
class ProjectionSet:
    """Frozen Q/K/V/O projections of one attention layer (all d x d)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.num_heads <= 0 or d % self.num_heads:
            raise ContractError(f"hidden width {d} not divisible by {self.num_heads} heads")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ContractError(f"{name} has shape {w.shape}, expected {(d, d)}")
            if not np.all(np.isfinite(w)):
                raise ContractError(f"{name} is not finite")
            w.flags.writeable = False

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads

    @property
    def dtype(self) -> np.dtype:
        return self.w_q.dtype

    @classmethod
    def random(cls, d: int, num_heads: int, rng: np.random.Generator,
               scale: float = 1.0, dtype=np.float64) -> "ProjectionSet":
        std = scale / np.sqrt(d)
        ws = [(rng.standard_normal((d, d)) * std).astype(dtype) for _ in range(4)]
        return cls(*ws, num_heads=num_heads)

    def astype(self, dtype) -> "ProjectionSet":
        return ProjectionSet(*(np.array(w, dtype=dtype) for w in
                               (self.w_q, self.w_k, self.w_v, self.w_o)),
                             num_heads=self.num_heads)


@dataclass
class KVCache:
    """Per-layer store of past clean frames' keys (post-RoPE) and values."""

    keys: List[np.ndarray] = field(default_factory=list)
    values: List[np.ndarray] = field(default_factory=list)
    dtype: np.dtype = np.dtype(np.float64)

    @property
    def num_frames(self) -> int:
        return len(self.keys)

    @property
    def bytes_per_scalar(self) -> int:
        return np.dtype(self.dtype).itemsize

    def total_bytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))

    def clear(self) -> None:
        self.keys.clear()
        self.values.clear()


# ---------------------------------------------------------------------------
# backend-generic pieces

def split_heads(x, num_heads: int):
    L, d = x.shape
    return x.reshape((L, num_heads, d // num_heads))


def merge_heads(x):
    L, H, D = x.shape
    return x.reshape((L, H * D))


def frame_positions(frame_index: int, L: int) -> np.ndarray:
    return frame_index * L + np.arange(L)


def project_qkv(x, proj: ProjectionSet, ops=numerics):
    """Per-head Q, K, V of a frame, each (L, H, D), before RoPE."""
    H = proj.num_heads
    return (split_heads(ops.matmul(x, proj.w_q), H),
            split_heads(ops.matmul(x, proj.w_k), H),
            split_heads(ops.matmul(x, proj.w_v), H))


def attend(q, k, v, ops=numerics):
    """Unmasked per-head softmax attention.

    q: (L, H, D); k, v: (M, H, D) -> (L, H, D).  Scale is 1/sqrt(D).
    """
    D = q.shape[-1]
    qh = q.transpose((1, 0, 2))
    kh = k.transpose((1, 2, 0))
    vh = v.transpose((1, 0, 2))
    scores = ops.matmul(qh, kh) * float(1.0 / np.sqrt(D))
    probs = ops.softmax_rows(scores)
    return ops.matmul(probs, vh).transpose((1, 0, 2))


def softmax_layer_output(x, proj: ProjectionSet, past_keys, past_values,
                         frame_index: int, ops=numerics):
    """full_attention written against ``ops``; past_* are lists of (L, d)."""
    L = x.shape[0]
    H = proj.num_heads
    q, k, v = project_qkv(x, proj, ops)
    pos = frame_positions(frame_index, L)
    q = ops.rope(q, pos)
    k = ops.rope(k, pos)
    if past_keys:
        k = ops.concat([split_heads(pk, H) for pk in past_keys] + [k], axis=0)
        v = ops.concat([split_heads(pv, H) for pv in past_values] + [v], axis=0)
    o = attend(q, k, v, ops)
    return ops.matmul(merge_heads(o), proj.w_o)


def clean_frame_kv(clean_frame, proj: ProjectionSet, frame_index: int, ops=numerics):
    """(K post-RoPE, V), both (L, d), as appended to the cache."""
    L = clean_frame.shape[0]
    k = split_heads(ops.matmul(clean_frame, proj.w_k), proj.num_heads)
    v = ops.matmul(clean_frame, proj.w_v)
    k = ops.rope(k, frame_positions(frame_index, L))
    return merge_heads(k), v


# ---------------------------------------------------------------------------
# public operations

def _check_frame(x: np.ndarray, proj: ProjectionSet) -> None:
    if x.ndim != 2 or x.shape[1] != proj.d:
        raise ContractError(f"frame shape {x.shape} does not match hidden width {proj.d}")
    if x.shape[0] < 1:
        raise ContractError("a frame needs at least one token")


def full_attention(x_N: np.ndarray, cache: KVCache, proj: ProjectionSet,
                   frame_index: Optional[int] = None) -> np.ndarray:
    """Softmax attention of frame N over [cache; frame N], output-projected.

    ``frame_index`` defaults to the number of cached frames (the streaming
    case); pass it explicitly to query at a position past an empty cache.
    """
    _check_frame(x_N, proj)
    for k in cache.keys:
        if k.shape[1] != proj.d:
            raise ContractError("cached frame width does not match projections")
    if frame_index is None:
        frame_index = cache.num_frames
    return softmax_layer_output(x_N, proj, cache.keys, cache.values, frame_index)


def intra_attention(x_N: np.ndarray, proj: ProjectionSet) -> np.ndarray:
    """Bidirectional attention within one frame, frame-local positions.

    Returns the per-head mix (L, H, D) before the output projection.
    """
    _check_frame(x_N, proj)
    q, k, v = project_qkv(x_N, proj)
    local = np.arange(x_N.shape[0])
    return attend(numerics.rope(q, local), numerics.rope(k, local), v)


def append_clean_frame(cache: KVCache, clean_frame: np.ndarray, proj: ProjectionSet) -> None:
    _check_frame(clean_frame, proj)
    k, v = clean_frame_kv(clean_frame, proj, cache.num_frames)
    cache.keys.append(np.ascontiguousarray(k, dtype=cache.dtype))
    cache.values.append(np.ascontiguousarray(v, dtype=cache.dtype))
