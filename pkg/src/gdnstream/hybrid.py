"""Hybrid attention layer: local softmax plus a gated recurrent memory.

For frame N with hidden states x (L x d)::

    Q, K, V   = x W_q, x W_k, x W_v                (frozen teacher weights)
    O_intra   = softmax attention within frame N   (frame-local RoPE)
    Q'        = L2Norm(RoPE(phi_q(Q)))             (global RoPE)
    O_inter   = Q' S_{N-1}                         (one shared state read)
    G         = sigmoid(x W_g + b_g)               (scalar / per head / per element)
    y         = (O_intra + G * O_inter) W_o

The state is only written by :func:`absorb_clean_frame`, once per frame,
from the clean latent: K' = L2Norm(RoPE(phi_k(K))), V' = phi_v(V), and the
gated delta rule with per-token gates from :func:`gdn.predict_gates`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import blob, gdn, numerics
from .attention import (ProjectionSet, attend, frame_positions, merge_heads,
                        project_qkv)
from .gdn import GatePredictors, RecurrentState, state_query
from .numerics import ContractError

GRANULARITIES = ("scalar", "headwise", "elementwise")


class PolicyError(ContractError):
    """The streaming schedule broke the frame-level / clean-pass contract."""


@dataclass
class FeatureMaps:
    """Per-head D x D maps, stored as (H, D, D); head h only mixes its own coords."""

    phi_q: np.ndarray
    phi_k: np.ndarray
    phi_v: np.ndarray

    @classmethod
    def identity(cls, num_heads: int, head_dim: int, dtype=np.float64) -> "FeatureMaps":
        eye = np.broadcast_to(np.eye(head_dim, dtype=dtype), (num_heads, head_dim, head_dim))
        return cls(eye.copy(), eye.copy(), eye.copy())

    @classmethod
    def random(cls, num_heads: int, head_dim: int, rng: np.random.Generator,
               scale: float = 0.3, dtype=np.float64) -> "FeatureMaps":
        eye = np.eye(head_dim)

        def one():
            noise = rng.standard_normal((num_heads, head_dim, head_dim)) * scale / np.sqrt(head_dim)
            return (eye + noise).astype(dtype)
        return cls(one(), one(), one())


@dataclass
class GateParams:
    """Branch-fusion gate; w_g is d x g with g = 1, H or H*D by granularity."""

    w_g: np.ndarray
    b_g: np.ndarray
    granularity: str = "headwise"

    @classmethod
    def zeros(cls, d: int, num_heads: int, granularity: str = "headwise",
              dtype=np.float64) -> "GateParams":
        g = gate_width(granularity, d, num_heads)
        return cls(np.zeros((d, g), dtype=dtype), np.zeros(g, dtype=dtype), granularity)

    @classmethod
    def random(cls, d: int, num_heads: int, rng: np.random.Generator,
               granularity: str = "headwise", scale: float = 1.0,
               dtype=np.float64) -> "GateParams":
        g = gate_width(granularity, d, num_heads)
        return cls((rng.standard_normal((d, g)) * scale / np.sqrt(d)).astype(dtype),
                   (rng.standard_normal(g) * 0.5).astype(dtype), granularity)


def gate_width(granularity: str, d: int, num_heads: int) -> int:
    if granularity not in GRANULARITIES:
        raise ContractError(f"unknown gate granularity {granularity!r}")
    return {"scalar": 1, "headwise": num_heads, "elementwise": d}[granularity]


@dataclass
class HybridLayer:
    proj: ProjectionSet
    fmaps: FeatureMaps
    gates: GateParams
    gp: GatePredictors
    state: RecurrentState
    frame_level_access: bool = True
    clean_pass_only: bool = True
    chunk_size: int = gdn.DEFAULT_CHUNK
    noisy_writes: int = field(default=0, repr=False)

    @property
    def num_heads(self) -> int:
        return self.proj.num_heads

    @property
    def head_dim(self) -> int:
        return self.proj.head_dim

    @property
    def d(self) -> int:
        return self.proj.d


def make_layer(proj: ProjectionSet, granularity: str = "headwise",
               rng: Optional[np.random.Generator] = None, **flags) -> HybridLayer:
    """Student layer around frozen projections.

    Without ``rng`` the trainable parts take their documented defaults
    (identity feature maps, zero gate weights, retain-leaning gate biases);
    with ``rng`` they are randomised, which tests use to avoid symmetric
    special cases.
    """
    H, D, d, dt = proj.num_heads, proj.head_dim, proj.d, proj.dtype
    if rng is None:
        fmaps = FeatureMaps.identity(H, D, dt)
        gates = GateParams.zeros(d, H, granularity, dt)
        gp = GatePredictors.default(d, H, dt)
    else:
        fmaps = FeatureMaps.random(H, D, rng, dtype=dt)
        gates = GateParams.random(d, H, rng, granularity, dtype=dt)
        gp = GatePredictors.random(d, H, rng, dtype=dt)
    return HybridLayer(proj, fmaps, gates, gp, RecurrentState.zeros(H, D, dt), **flags)


# ---------------------------------------------------------------------------
# backend-generic pieces

def feature_map(x, phi, ops=numerics):
    """Apply per-head maps phi (H, D, D) to x (L, H, D)."""
    return state_query(phi, x, ops)


def gate_values(x, gates: GateParams, num_heads: int, ops=numerics):
    """Sigmoid gate shaped to broadcast against (L, H, D)."""
    L, d = x.shape
    g = ops.sigmoid(ops.matmul(x, gates.w_g) + gates.b_g)
    if gates.granularity == "scalar":
        return g.reshape((L, 1, 1))
    if gates.granularity == "headwise":
        return g.reshape((L, num_heads, 1))
    return g.reshape((L, num_heads, d // num_heads))


def linear_query(q, fmaps: FeatureMaps, frame_index: int, ops=numerics):
    pos = frame_positions(frame_index, q.shape[0])
    return ops.l2norm_rows(ops.rope(feature_map(q, fmaps.phi_q, ops), pos))


def hybrid_output(x, proj: ProjectionSet, fmaps: FeatureMaps, gates: GateParams,
                  S, frame_index: int, ops=numerics):
    """Layer output for frame ``frame_index`` reading state ``S``."""
    L = x.shape[0]
    q, k, v = project_qkv(x, proj, ops)
    local = np.arange(L)
    o_intra = attend(ops.rope(q, local), ops.rope(k, local), v, ops)
    o_inter = state_query(S, linear_query(q, fmaps, frame_index, ops), ops)
    g = gate_values(x, gates, proj.num_heads, ops)
    return ops.matmul(merge_heads(o_intra + g * o_inter), proj.w_o)


def recurrent_inputs(clean_frame, proj: ProjectionSet, fmaps: FeatureMaps,
                     gp: GatePredictors, frame_index: int, ops=numerics):
    """(K', V', alpha, beta) of a frame, ready for the delta rule."""
    L = clean_frame.shape[0]
    H = proj.num_heads
    k = ops.matmul(clean_frame, proj.w_k).reshape((L, H, proj.head_dim))
    v = ops.matmul(clean_frame, proj.w_v).reshape((L, H, proj.head_dim))
    pos = frame_positions(frame_index, L)
    k_lin = ops.l2norm_rows(ops.rope(feature_map(k, fmaps.phi_k, ops), pos))
    v_lin = feature_map(v, fmaps.phi_v, ops)
    alpha, beta = gdn.predict_gates(clean_frame, gp, ops)
    return k_lin, v_lin, alpha, beta


# ---------------------------------------------------------------------------
# public operations

def _check(layer: HybridLayer, x: np.ndarray, frame_index: int) -> None:
    if x.ndim != 2 or x.shape[1] != layer.d or x.shape[0] < 1:
        raise ContractError(f"frame shape {x.shape} does not match hidden width {layer.d}")
    if frame_index <= layer.state.last_clean_frame:
        raise PolicyError(f"frame {frame_index} was already absorbed "
                          f"(last clean frame {layer.state.last_clean_frame})")


def forward(layer: HybridLayer, x_N: np.ndarray, frame_index: int) -> np.ndarray:
    """Frame-level access: every token reads the same pre-update state."""
    _check(layer, x_N, frame_index)
    return hybrid_output(x_N, layer.proj, layer.fmaps, layer.gates, layer.state.S, frame_index)


def absorb_clean_frame(layer: HybridLayer, clean_frame: np.ndarray, frame_index: int) -> None:
    """The single state write of a frame, from its clean latent."""
    _check(layer, clean_frame, frame_index)
    if frame_index != layer.state.last_clean_frame + 1:
        raise PolicyError(f"frame {frame_index} absorbed out of order "
                          f"(expected {layer.state.last_clean_frame + 1})")
    k, v, alpha, beta = recurrent_inputs(clean_frame, layer.proj, layer.fmaps, layer.gp, frame_index)
    gdn.update_chunkwise(layer.state, k, v, alpha, beta, layer.chunk_size)
    layer.state.last_clean_frame = frame_index


def write_noisy_frame(layer: HybridLayer, x: np.ndarray, frame_index: int) -> None:
    """Ablation only: write a denoising intermediate into the state.

    Used when ``clean_pass_only`` is off, to reproduce the contamination the
    clean-pass rule prevents.  Counted in ``layer.noisy_writes``; neither
    ``write_count`` nor ``last_clean_frame`` moves.
    """
    _check(layer, x, frame_index)
    k, v, alpha, beta = recurrent_inputs(x, layer.proj, layer.fmaps, layer.gp, frame_index)
    S_new = gdn.delta_rule_chunkwise(layer.state.S, k, v, alpha, beta, layer.chunk_size)
    numerics.tally_macs(gdn.delta_macs(*k.shape))
    if not np.all(np.isfinite(S_new)):
        raise ContractError("recurrent state became non-finite (gate or weight blow-up)")
    layer.state.S = S_new.astype(layer.state.S.dtype, copy=False)
    layer.noisy_writes += 1


def forward_token_level_ablation(layer: HybridLayer, x_N: np.ndarray,
                                 frame_index: int) -> np.ndarray:
    """Token j reads a scratch state already written by tokens 1..j-1 of this frame."""
    _check(layer, x_N, frame_index)
    proj = layer.proj
    L = x_N.shape[0]
    q, k, v = project_qkv(x_N, proj)
    local = np.arange(L)
    o_intra = attend(numerics.rope(q, local), numerics.rope(k, local), v)
    q_lin = linear_query(q, layer.fmaps, frame_index)
    k_lin, v_lin, alpha, beta = recurrent_inputs(x_N, proj, layer.fmaps, layer.gp, frame_index)
    scratch = layer.state.S
    rows = []
    for j in range(L):
        rows.append(state_query(scratch, q_lin[j:j + 1]))
        scratch = gdn.delta_rule_sequential(scratch, k_lin[j:j + 1], v_lin[j:j + 1],
                                            alpha[j:j + 1], beta[j:j + 1])
    o_inter = np.concatenate(rows, axis=0)
    g = gate_values(x_N, layer.gates, proj.num_heads)
    return numerics.matmul(merge_heads(o_intra + g * o_inter), proj.w_o)


def intra_only(layer: HybridLayer) -> HybridLayer:
    """Copy of ``layer`` whose gate is shut (G == 0 exactly)."""
    gates = GateParams(layer.gates.w_g.copy(), np.full_like(layer.gates.b_g, -np.inf),
                       layer.gates.granularity)
    return HybridLayer(layer.proj, layer.fmaps, gates, layer.gp,
                       RecurrentState(layer.state.S.copy(), layer.state.last_clean_frame,
                                      layer.state.write_count),
                       layer.frame_level_access, layer.clean_pass_only, layer.chunk_size)


# ---------------------------------------------------------------------------
# serialization

_TENSORS = {
    "proj.w_q": ("proj", "w_q"), "proj.w_k": ("proj", "w_k"),
    "proj.w_v": ("proj", "w_v"), "proj.w_o": ("proj", "w_o"),
    "fmaps.phi_q": ("fmaps", "phi_q"), "fmaps.phi_k": ("fmaps", "phi_k"),
    "fmaps.phi_v": ("fmaps", "phi_v"),
    "gates.w_g": ("gates", "w_g"), "gates.b_g": ("gates", "b_g"),
    "gp.w_alpha": ("gp", "w_alpha"), "gp.b_alpha": ("gp", "b_alpha"),
    "gp.w_beta": ("gp", "w_beta"), "gp.b_beta": ("gp", "b_beta"),
    "state.S": ("state", "S"),
}


def layer_to_bytes(layer: HybridLayer) -> bytes:
    tensors = {name: getattr(getattr(layer, part), attr)
               for name, (part, attr) in _TENSORS.items()}
    meta = {
        "kind": "hybrid_layer",
        "num_heads": layer.num_heads,
        "granularity": layer.gates.granularity,
        "frame_level_access": layer.frame_level_access,
        "clean_pass_only": layer.clean_pass_only,
        "chunk_size": layer.chunk_size,
        "last_clean_frame": layer.state.last_clean_frame,
        "write_count": layer.state.write_count,
    }
    return blob.dumps(tensors, meta)


def layer_from_bytes(data: bytes) -> HybridLayer:
    t, meta = blob.loads(data)
    if meta.get("kind") != "hybrid_layer":
        raise blob.BlobFormatError(f"blob holds {meta.get('kind')!r}, not a hybrid layer")
    proj = ProjectionSet(t["proj.w_q"], t["proj.w_k"], t["proj.w_v"], t["proj.w_o"],
                         num_heads=meta["num_heads"])
    return HybridLayer(
        proj,
        FeatureMaps(t["fmaps.phi_q"], t["fmaps.phi_k"], t["fmaps.phi_v"]),
        GateParams(t["gates.w_g"], t["gates.b_g"], meta["granularity"]),
        GatePredictors(t["gp.w_alpha"], t["gp.b_alpha"], t["gp.w_beta"], t["gp.b_beta"]),
        RecurrentState(t["state.S"], meta["last_clean_frame"], meta["write_count"]),
        frame_level_access=meta["frame_level_access"],
        clean_pass_only=meta["clean_pass_only"],
        chunk_size=meta["chunk_size"],
    )


def save_layer(layer: HybridLayer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(layer_to_bytes(layer))


def load_layer(path) -> HybridLayer:
    with open(path, "rb") as fh:
        return layer_from_bytes(fh.read())
