"""Frame-by-frame generation with a toy block-stacked denoiser.

Each frame starts from seeded Gaussian noise and is refined by ``T`` velocity
steps ``z <- z + dt * v(z, t, c)`` on a uniform schedule.  During those
steps hybrid layers only *read* their state and softmax layers only *read*
their cache.  A final clean pass on the refined latent then commits the
frame: softmax layers append its keys/values, hybrid layers absorb it into
their state.  Every attention call is wrapped in a MAC counter, so the
recorded totals can be checked against :func:`count_attention_flops`.

Cost unit: one multiply-add (MAC).  Softmax exponentials, RoPE rotations
and normalisations are not counted.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import attention, hybrid, numerics
from .attention import KVCache, ProjectionSet
from .gdn import delta_macs
from .hybrid import HybridLayer
from .numerics import ContractError

BACKENDS = ("softmax", "hybrid")
CSV_COLUMNS = ("frame", "layer", "backend", "pass_type", "flops_macs", "bytes",
               "state_writes", "wall_ns")


class StreamError(ContractError):
    pass


@dataclass
class Block:
    backend: str
    proj: ProjectionSet
    w1: np.ndarray
    w2: np.ndarray
    layer: HybridLayer
    cache: KVCache

    @property
    def memory_bytes(self) -> int:
        if self.backend == "softmax":
            return self.cache.total_bytes()
        return self.layer.state.nbytes

    @property
    def state_writes(self) -> int:
        if self.backend == "softmax":
            return self.cache.num_frames
        return self.layer.state.write_count + self.layer.noisy_writes


@dataclass
class ToyModel:
    blocks: List[Block]
    cond: np.ndarray

    @property
    def d(self) -> int:
        return self.cond.shape[0]

    @property
    def num_heads(self) -> int:
        return self.blocks[0].proj.num_heads

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    @property
    def backends(self) -> Tuple[str, ...]:
        return tuple(b.backend for b in self.blocks)

    @property
    def dtype(self) -> np.dtype:
        return self.cond.dtype

    def reset(self) -> None:
        for b in self.blocks:
            b.cache.clear()
            b.layer.state.reset()
            b.layer.noisy_writes = 0

    def memory_bytes(self) -> int:
        return sum(b.memory_bytes for b in self.blocks)


def build_toy_model(d: int, num_heads: int, backends: Sequence[str], seed: int,
                    d_ff: Optional[int] = None, precision: str = "double",
                    granularity: str = "headwise", random_hybrid: bool = False,
                    weight_scale: float = 1.0) -> ToyModel:
    """Seeded toy model.

    Weights are drawn in a fixed order that does not depend on ``backends``,
    so two models built from the same seed share every parameter and differ
    only in which layers use the recurrent state.
    """
    for b in backends:
        if b not in BACKENDS:
            raise ContractError(f"unknown backend {b!r}")
    dtype = numerics.dtype_for(precision)
    d_ff = d_ff or 2 * d
    rng = numerics.make_rng(seed, stream=0)
    # hybrid-only parameters come from their own stream so they never shift the shared weights
    hyb_rng = numerics.make_rng(seed, stream=3) if random_hybrid else None
    blocks = []
    for backend in backends:
        proj = ProjectionSet.random(d, num_heads, rng, scale=weight_scale, dtype=dtype)
        w1 = (rng.standard_normal((d, d_ff)) / np.sqrt(d)).astype(dtype)
        w2 = (rng.standard_normal((d_ff, d)) / np.sqrt(d_ff) * 0.5).astype(dtype)
        layer = hybrid.make_layer(proj, granularity, hyb_rng)
        blocks.append(Block(backend, proj, w1, w2, layer, KVCache(dtype=dtype)))
    cond = (rng.standard_normal(d) * 0.1).astype(dtype)
    return ToyModel(blocks, cond)


def with_backends(model: ToyModel, backends: Sequence[str]) -> ToyModel:
    """Same weights, different backend per layer, fresh memory."""
    if len(backends) != model.num_layers:
        raise ContractError("one backend per layer required")
    blocks = []
    for blk, backend in zip(model.blocks, backends):
        src = blk.layer
        layer = HybridLayer(
            src.proj,
            hybrid.FeatureMaps(src.fmaps.phi_q.copy(), src.fmaps.phi_k.copy(), src.fmaps.phi_v.copy()),
            hybrid.GateParams(src.gates.w_g.copy(), src.gates.b_g.copy(), src.gates.granularity),
            type(src.gp)(src.gp.w_alpha.copy(), src.gp.b_alpha.copy(),
                         src.gp.w_beta.copy(), src.gp.b_beta.copy()),
            type(src.state).zeros(src.num_heads, src.head_dim, src.proj.dtype),
            src.frame_level_access, src.clean_pass_only, src.chunk_size)
        blocks.append(Block(backend, blk.proj, blk.w1.copy(), blk.w2.copy(), layer,
                            KVCache(dtype=blk.cache.dtype)))
    return ToyModel(blocks, model.cond.copy())


# ---------------------------------------------------------------------------
# model pieces shared with the differentiable path

def embed(z, t: float, cond):
    """Timestep as a scalar broadcast plus the conditioning vector."""
    return z + (float(t) + cond)


def rms_normalize(h, ops=numerics):
    """Rows rescaled to RMS 1 (pre-norm), keeping long runs bounded."""
    return ops.l2norm_rows(h) * float(np.sqrt(h.shape[-1]))


def feedforward(h, w1, w2, ops=numerics):
    return ops.matmul(ops.tanh(ops.matmul(rms_normalize(h, ops), w1)), w2)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsRow:
    frame: int
    layer: int
    backend: str
    pass_type: str
    flops_macs: int
    bytes: int
    state_writes: int
    wall_ns: int


@dataclass
class MetricsRecord:
    num_layers: int
    rows: List[MetricsRow] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return 1 + max((r.frame for r in self.rows), default=-1)

    def _per_frame(self, attr: str, layer: Optional[int] = None) -> np.ndarray:
        out = np.zeros(self.num_frames, dtype=np.int64)
        for r in self.rows:
            if layer is None or r.layer == layer:
                out[r.frame] += getattr(r, attr)
        return out

    def attention_macs(self, layer: Optional[int] = None) -> np.ndarray:
        """Cumulative MACs through the end of each frame."""
        return np.cumsum(self._per_frame("flops_macs", layer))

    def wall_time_ns(self) -> np.ndarray:
        return np.cumsum(self._per_frame("wall_ns"))

    def _end_of_frame(self, attr: str, layer: Optional[int]) -> np.ndarray:
        out = np.zeros((self.num_frames, self.num_layers), dtype=np.int64)
        for r in self.rows:
            if r.pass_type == "clean":
                out[r.frame, r.layer] = getattr(r, attr)
        return out.sum(axis=1) if layer is None else out[:, layer]

    def memory_bytes(self, layer: Optional[int] = None) -> np.ndarray:
        """Cache/state bytes held after each frame's clean pass."""
        return self._end_of_frame("bytes", layer)

    def state_writes(self, layer: Optional[int] = None) -> np.ndarray:
        """Cumulative memory writes after each frame."""
        return self._end_of_frame("state_writes", layer)

    def deterministic_rows(self):
        """Rows without wall time, for run-to-run comparison."""
        return [(r.frame, r.layer, r.backend, r.pass_type, r.flops_macs, r.bytes, r.state_writes)
                for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([getattr(r, c) for c in CSV_COLUMNS])


# ---------------------------------------------------------------------------
# generation

@dataclass
class StreamConfig:
    num_frames: int
    tokens_per_frame: int
    denoise_steps: int
    hidden: int
    heads: int
    seed: int = 0
    backends: Tuple[str, ...] = ("hybrid",)
    precision: str = "double"
    d_ff: Optional[int] = None

    def __post_init__(self):
        self.backends = tuple(self.backends)
        for name in ("num_frames", "tokens_per_frame", "denoise_steps", "hidden", "heads"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ContractError("hidden must be divisible by heads")
        numerics.dtype_for(self.precision)

    def build_model(self, **kwargs) -> ToyModel:
        return build_toy_model(self.hidden, self.heads, self.backends, self.seed,
                               d_ff=self.d_ff, precision=self.precision, **kwargs)


def _attend(blk: Block, h: np.ndarray, frame_index: int) -> np.ndarray:
    if blk.backend == "softmax":
        return attention.full_attention(h, blk.cache, blk.proj)
    if blk.layer.frame_level_access:
        return hybrid.forward(blk.layer, h, frame_index)
    return hybrid.forward_token_level_ablation(blk.layer, h, frame_index)


def _commit(blk: Block, h: np.ndarray, frame_index: int) -> None:
    if blk.backend == "softmax":
        attention.append_clean_frame(blk.cache, h, blk.proj)
    else:
        hybrid.absorb_clean_frame(blk.layer, h, frame_index)


def velocity(model: ToyModel, z: np.ndarray, t: float, frame_index: int,
             cond: Optional[np.ndarray] = None, commit: bool = False,
             metrics: Optional[MetricsRecord] = None) -> np.ndarray:
    """One forward pass of the toy denoiser; returns the velocity (L x d).

    Pre-norm residual blocks; the velocity is the normalised final stream.
    With ``commit`` this is the clean pass: each layer writes the frame into
    its cache/state right after reading it.
    """
    h = embed(z, t, model.cond if cond is None else cond)
    pass_type = "clean" if commit else "noisy"
    for li, blk in enumerate(model.blocks):
        u = rms_normalize(h)
        start = time.perf_counter_ns()
        with numerics.count_macs() as ctr:
            a = _attend(blk, u, frame_index)
            if commit:
                _commit(blk, u, frame_index)
            elif blk.backend == "hybrid" and not blk.layer.clean_pass_only:
                hybrid.write_noisy_frame(blk.layer, u, frame_index)
        if metrics is not None:
            metrics.rows.append(MetricsRow(frame_index, li, blk.backend, pass_type, ctr.total,
                                           blk.memory_bytes, blk.state_writes,
                                           time.perf_counter_ns() - start))
        h = h + a
        h = h + feedforward(h, blk.w1, blk.w2)
    return rms_normalize(h)


def generate(model: ToyModel, cfg: StreamConfig) -> Tuple[List[np.ndarray], MetricsRecord]:
    if model.d != cfg.hidden or model.num_heads != cfg.heads:
        raise ContractError("model and config dimensions differ")
    if model.dtype != numerics.dtype_for(cfg.precision):
        raise ContractError("model and config precision differ")
    model.reset()
    rng = numerics.make_rng(cfg.seed, stream=1)
    L, T = cfg.tokens_per_frame, cfg.denoise_steps
    dt = 1.0 / T
    metrics = MetricsRecord(model.num_layers)
    frames = []
    for i in range(cfg.num_frames):
        z = rng.standard_normal((L, cfg.hidden)).astype(model.dtype)
        for s in range(T):
            t = 1.0 - s * dt
            z = z + dt * velocity(model, z, t, i, metrics=metrics)
            if not np.all(np.isfinite(z)):
                raise StreamError(f"non-finite latent at frame {i}, step {s}")
        velocity(model, z, 0.0, i, commit=True, metrics=metrics)
        frames.append(z)
    return frames, metrics


# ---------------------------------------------------------------------------
# closed-form cost model

def count_attention_flops(backend: str, L: int, d: int, H: int, D: int,
                          history_frames: int, pass_type: str = "noisy",
                          granularity: str = "headwise") -> int:
    """MACs of one attention-layer pass for a frame with ``history_frames`` before it.

    softmax, any pass   4 L d^2 (Q,K,V,O) + 2 L (h+1) L D H (scores, mix)
      + clean pass      2 L d^2 (K,V of the clean frame for the cache)
    hybrid, any pass    4 L d^2 + 2 L^2 D H (intra) + L D^2 H (phi_q)
                        + L D^2 H (state query) + L d g (gate, g = 1 | H | d)
      + clean pass      2 L d^2 + 2 L D^2 H (phi_k, phi_v) + 2 L d H (alpha, beta)
                        + 2 L D^2 H (delta read + rank-one write)
    """
    if min(L, d, H, D, history_frames) < 0:
        raise ContractError("cost arguments must be nonnegative")
    if pass_type not in ("noisy", "clean"):
        raise ContractError(f"unknown pass type {pass_type!r}")
    proj = 4 * L * d * d
    clean = pass_type == "clean"
    if backend == "softmax":
        keys = (history_frames + 1) * L
        return proj + 2 * L * keys * D * H + (2 * L * d * d if clean else 0)
    if backend == "hybrid":
        g = hybrid.gate_width(granularity, d, H)
        macs = proj + 2 * L * L * D * H + 2 * L * D * D * H + L * d * g
        if clean:
            macs += 2 * L * d * d + 2 * L * D * D * H + 2 * L * d * H + delta_macs(L, H, D)
        return macs
    raise ContractError(f"unknown backend {backend!r}")


def cumulative_attention_flops(backend: str, L: int, d: int, H: int, D: int,
                               num_frames: int, denoise_steps: int,
                               granularity: str = "headwise") -> int:
    """Per-layer MACs for a whole run: T noisy passes plus one clean pass per frame."""
    total = 0
    for i in range(num_frames):
        total += denoise_steps * count_attention_flops(backend, L, d, H, D, i, "noisy", granularity)
        total += count_attention_flops(backend, L, d, H, D, i, "clean", granularity)
    return total


def memory_footprint(backend: str, L: int, d: int, H: int, D: int,
                     history_frames: int, precision: str = "double") -> int:
    """Per-layer bytes held for ``history_frames`` committed frames."""
    if min(L, d, H, D, history_frames) < 0:
        raise ContractError("memory arguments must be nonnegative")
    nbytes = numerics.dtype_for(precision).itemsize
    if backend == "softmax":
        return 2 * history_frames * L * d * nbytes
    if backend == "hybrid":
        return H * D * D * nbytes
    raise ContractError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# curve fitting

def fit_polynomial(xs, ys, degree: int) -> Tuple[np.ndarray, float]:
    """Least-squares polynomial (highest power first) and its R^2."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    coeffs = np.polyfit(xs, ys, degree)
    resid = ys - np.polyval(coeffs, xs)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return coeffs, r2


def fitted_degree(xs, ys, max_degree: int = 3, rtol: float = 1e-9) -> int:
    """Smallest degree whose fit reproduces every point to ``rtol``."""
    ys_arr = np.asarray(ys, dtype=np.float64)
    scale = max(float(np.max(np.abs(ys_arr))), 1.0)
    for deg in range(max_degree + 1):
        coeffs, _ = fit_polynomial(xs, ys_arr, deg)
        if np.max(np.abs(ys_arr - np.polyval(coeffs, xs))) <= rtol * scale:
            return deg
    return max_degree + 1


def exact_slope(xs, ys) -> Optional[int]:
    """Common integer slope of an exactly affine integer series, else None."""
    pairs = sorted(zip(xs, ys))
    if len(pairs) < 2:
        return None
    slopes = set()
    for (x0, y0), (x1, y1) in zip(pairs, pairs[1:]):
        dy, dx = int(y1) - int(y0), int(x1) - int(x0)
        if dy % dx:
            return None
        slopes.add(dy // dx)
    return slopes.pop() if len(slopes) == 1 else None
