"""Gated delta-rule recurrent state.

Per head, a token (k, v) with gates (alpha, beta) updates the D x D state as

    S <- alpha * S + beta * k^T (v - k S)

with k and v as 1 x D rows.  ``update_sequential`` applies this token by
token.  ``update_chunkwise`` produces the same state block by block: inside a
chunk the deltas ``u_j = beta_j (v_j - k_j S_{j-1})`` satisfy a unit lower
triangular system whose off-diagonal terms carry the cumulative decay, and
the chunk's end state is the decayed carry plus ``K^T diag(decay) U``.

The array kernels accept extra leading batch axes:
S is (..., H, D, D); k, v are (..., L, H, D); alpha, beta are (..., L, H).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .numerics import ContractError

DEFAULT_CHUNK = 16


@dataclass
class RecurrentState:
    """Fixed-size memory of one hybrid layer."""

    S: np.ndarray
    last_clean_frame: int = -1
    write_count: int = 0

    @classmethod
    def zeros(cls, num_heads: int, head_dim: int, dtype=np.float64) -> "RecurrentState":
        return cls(np.zeros((num_heads, head_dim, head_dim), dtype=dtype))

    @property
    def nbytes(self) -> int:
        return self.S.nbytes

    def reset(self) -> None:
        self.S = np.zeros_like(self.S)
        self.last_clean_frame = -1
        self.write_count = 0


@dataclass
class GatePredictors:
    """Per-token forget (alpha) and learning-rate (beta) projections."""

    w_alpha: np.ndarray
    b_alpha: np.ndarray
    w_beta: np.ndarray
    b_beta: np.ndarray

    @classmethod
    def default(cls, d: int, num_heads: int, dtype=np.float64) -> "GatePredictors":
        # retain by default (alpha ~ 0.88), write slowly (beta ~ 0.12)
        return cls(np.zeros((d, num_heads), dtype=dtype),
                   np.full(num_heads, 2.0, dtype=dtype),
                   np.zeros((d, num_heads), dtype=dtype),
                   np.full(num_heads, -2.0, dtype=dtype))

    @classmethod
    def random(cls, d: int, num_heads: int, rng: np.random.Generator,
               scale: float = 1.0, dtype=np.float64) -> "GatePredictors":
        std = scale / np.sqrt(d)
        return cls((rng.standard_normal((d, num_heads)) * std).astype(dtype),
                   rng.standard_normal(num_heads).astype(dtype),
                   (rng.standard_normal((d, num_heads)) * std).astype(dtype),
                   rng.standard_normal(num_heads).astype(dtype))


def predict_gates(x, gp: GatePredictors, ops=numerics):
    """alpha, beta = sigmoid(x W + b), each (L, H), strictly inside (0, 1)."""
    alpha = ops.sigmoid(ops.matmul(x, gp.w_alpha) + gp.b_alpha)
    beta = ops.sigmoid(ops.matmul(x, gp.w_beta) + gp.b_beta)
    return alpha, beta


# ---------------------------------------------------------------------------
# array kernels

def _check_inputs(S, k, v, alpha, beta):
    if S.shape[-2] != S.shape[-1]:
        raise ContractError(f"state must be square per head, got {S.shape}")
    H, D = S.shape[-3], S.shape[-1]
    if k.shape != v.shape or k.shape[-2:] != (H, D):
        raise ContractError(f"k/v shapes {k.shape}/{v.shape} do not match state {S.shape}")
    if alpha.shape != k.shape[:-1] or beta.shape != k.shape[:-1]:
        raise ContractError(f"gate shapes {alpha.shape}/{beta.shape} do not match tokens {k.shape[:-1]}")


def delta_rule_sequential(S, k, v, alpha, beta):
    """Token-by-token recurrence; returns the new state (inputs untouched)."""
    S = np.array(S, copy=True)
    _check_inputs(S, k, v, alpha, beta)
    for j in range(k.shape[-3]):
        kj = k[..., j, :, :]
        vj = v[..., j, :, :]
        pred = np.matmul(kj[..., None, :], S)[..., 0, :]
        resid = vj - pred
        a = alpha[..., j, :][..., None, None]
        b = beta[..., j, :][..., None, None]
        S = a * S + b * (kj[..., :, None] * resid[..., None, :])
    return S


def _forward_substitute(T, rhs):
    """Solve (I + T) U = rhs for strictly lower-triangular T, row by row.

    T: (..., c, c); rhs: (..., c, D).
    """
    U = np.empty_like(rhs)
    for j in range(rhs.shape[-2]):
        U[..., j, :] = rhs[..., j, :] - np.matmul(T[..., j, None, :j], U[..., :j, :])[..., 0, :]
    return U


def delta_rule_chunkwise(S, k, v, alpha, beta, chunk_size: int = DEFAULT_CHUNK):
    """Blocked evaluation of :func:`delta_rule_sequential`."""
    if chunk_size < 1:
        raise ContractError("chunk_size must be positive")
    S = np.array(S, copy=True)
    _check_inputs(S, k, v, alpha, beta)
    L = k.shape[-3]
    # heads in front of tokens: (..., H, L, D) and (..., H, L)
    kh = np.swapaxes(k, -3, -2)
    vh = np.swapaxes(v, -3, -2)
    # a gate that underflowed to 0 gets the smallest normal instead of log(0)
    a = np.swapaxes(alpha, -2, -1)
    log_a = np.log(np.maximum(a, np.finfo(a.dtype).tiny))
    bh = np.swapaxes(beta, -2, -1)
    for start in range(0, L, chunk_size):
        sl = slice(start, min(start + chunk_size, L))
        kc, vc, la, bc = kh[..., sl, :], vh[..., sl, :], log_a[..., sl], bh[..., sl]
        c = kc.shape[-2]
        cum = np.cumsum(la, axis=-1)          # log gamma_j
        prev = cum - la                       # log gamma_{j-1}
        # deltas see the carried state decayed up to the previous token
        carried = np.matmul(kc, S) * np.exp(prev)[..., None]
        rhs = bc[..., None] * (vc - carried)
        lower = np.tril(np.ones((c, c), dtype=bool), k=-1)
        expo = np.where(lower, prev[..., :, None] - cum[..., None, :], -np.inf)
        gram = np.matmul(kc, np.swapaxes(kc, -1, -2))
        T = bc[..., :, None] * np.exp(expo) * gram
        U = _forward_substitute(T, rhs)
        tail = np.exp(cum[..., -1:] - cum)    # gamma_c / gamma_j
        S = (np.exp(cum[..., -1])[..., None, None] * S
             + np.matmul(np.swapaxes(kc * tail[..., None], -1, -2), U))
    return S


def delta_macs(L: int, H: int, D: int) -> int:
    """Multiply-adds of one frame's state write: delta read plus rank-one write."""
    return 2 * L * H * D * D


# ---------------------------------------------------------------------------
# public operations on RecurrentState

def _commit(state: RecurrentState, S_new: np.ndarray) -> None:
    if not np.all(np.isfinite(S_new)):
        raise ContractError("recurrent state became non-finite (gate or weight blow-up)")
    state.S = S_new.astype(state.S.dtype, copy=False)
    state.write_count += 1


def update_sequential(state: RecurrentState, k, v, alpha, beta) -> None:
    """Absorb one frame's tokens (k, v: (L, H, D); gates (L, H)) in order."""
    S_new = delta_rule_sequential(state.S, k, v, alpha, beta)
    numerics.tally_macs(delta_macs(k.shape[0], k.shape[1], k.shape[2]))
    _commit(state, S_new)


def update_chunkwise(state: RecurrentState, k, v, alpha, beta,
                     chunk_size: int = DEFAULT_CHUNK) -> None:
    """Same contract as :func:`update_sequential`, blocked by ``chunk_size``."""
    S_new = delta_rule_chunkwise(state.S, k, v, alpha, beta, chunk_size)
    numerics.tally_macs(delta_macs(k.shape[0], k.shape[1], k.shape[2]))
    _commit(state, S_new)


def state_query(S, q, ops=numerics):
    """Rows of q (L, H, D) times the per-head state S (H, D, D) -> (L, H, D)."""
    return ops.matmul(q.transpose((1, 0, 2)), S).transpose((1, 0, 2))


def query(state: RecurrentState, q: np.ndarray) -> np.ndarray:
    """Read-only state query; every token sees the same S."""
    return state_query(state.S, q)
