"""Distilling softmax layers into hybrid layers.

Stage 1 trains one hybrid layer at a time to match its frozen softmax
teacher on the same hidden states (output MSE normalised by L*d).  Stage 2
trains all replaced layers of a toy model jointly to match the teacher
model's velocity.  Only the recurrent-branch parameters (feature maps, gate
weights, alpha/beta predictors) and, in Stage 2, the feed-forward weights of
replaced blocks receive gradients; the attention projections never do.

Gradients come from :mod:`gdnstream.autodiff`, including back-propagation
through the delta-rule recurrence across every context frame.  The
finite-difference routine here perturbs the plain array implementation
instead, so the two checks share no derivative code.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attention, autodiff, hybrid, numerics, streaming
from .attention import KVCache, ProjectionSet
from .autodiff import Var
from .hybrid import FeatureMaps, GateParams, HybridLayer
from .gdn import GatePredictors, RecurrentState
from .numerics import ContractError

LAYER_PARAMS = {
    "phi_q": ("fmaps", "phi_q"),
    "phi_k": ("fmaps", "phi_k"),
    "phi_v": ("fmaps", "phi_v"),
    "w_g": ("gates", "w_g"),
    "w_alpha": ("gp", "w_alpha"),
    "b_alpha": ("gp", "b_alpha"),
    "w_beta": ("gp", "w_beta"),
    "b_beta": ("gp", "b_beta"),
}
FROZEN_LAYER_PARAMS = ("w_q", "w_k", "w_v", "w_o", "b_g")


class FrozenParameterError(KeyError):
    """A gradient or update was requested for a frozen tensor."""


class DivergenceError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# trainable parameter sets

@dataclass
class TrainableSet:
    """Named handles on the trainable tensors of one or more hybrid layers.

    ``layers`` maps a key (e.g. ``"L3"``) to the layer whose recurrent-branch
    parameters train; ``ffn`` maps keys to blocks whose feed-forward weights
    also train (Stage 2).
    """

    layers: Dict[str, HybridLayer] = field(default_factory=dict)
    ffn: Dict[str, streaming.Block] = field(default_factory=dict)

    @classmethod
    def for_layer(cls, layer: HybridLayer, key: str = "layer") -> "TrainableSet":
        return cls({key: layer})

    @classmethod
    def for_model(cls, model: streaming.ToyModel, include_ffn: bool = True) -> "TrainableSet":
        hyb = {f"L{i}": b.layer for i, b in enumerate(model.blocks) if b.backend == "hybrid"}
        ffn = {f"L{i}": b for i, b in enumerate(model.blocks) if b.backend == "hybrid"} if include_ffn else {}
        return cls(hyb, ffn)

    def names(self) -> List[str]:
        out = [f"{key}.{p}" for key in self.layers for p in LAYER_PARAMS]
        out += [f"{key}.{w}" for key in self.ffn for w in ("w1", "w2")]
        return out

    def _locate(self, name: str):
        key, _, param = name.rpartition(".")
        if key in self.layers and param in LAYER_PARAMS:
            part, attr = LAYER_PARAMS[param]
            return getattr(self.layers[key], part), attr
        if key in self.ffn and param in ("w1", "w2"):
            return self.ffn[key], param
        if (key in self.layers or key in self.ffn) and param in FROZEN_LAYER_PARAMS:
            raise FrozenParameterError(f"{name} is frozen")
        raise FrozenParameterError(f"{name} is not a trainable parameter")

    def get(self, name: str) -> np.ndarray:
        owner, attr = self._locate(name)
        return getattr(owner, attr)

    def set(self, name: str, value: np.ndarray) -> None:
        owner, attr = self._locate(name)
        old = getattr(owner, attr)
        if value.shape != old.shape:
            raise ContractError(f"{name}: shape {value.shape} != {old.shape}")
        setattr(owner, attr, np.asarray(value, dtype=old.dtype))

    def frozen_digest(self) -> str:
        """SHA-256 over every frozen tensor reachable from this set."""
        h = hashlib.sha256()
        for key in sorted(self.layers):
            p = self.layers[key].proj
            for w in (p.w_q, p.w_k, p.w_v, p.w_o, self.layers[key].gates.b_g):
                h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()

    def bind(self, values: Dict[str, Var]) -> Dict[str, "Bound"]:
        """Per-key parameter views whose trainable fields are ``values``."""
        bound = {}
        for key, layer in self.layers.items():
            def v(p, _key=key):
                return values.get(f"{_key}.{p}", self.get(f"{_key}.{p}"))
            bound[key] = Bound(
                FeatureMaps(v("phi_q"), v("phi_k"), v("phi_v")),
                GateParams(v("w_g"), layer.gates.b_g, layer.gates.granularity),
                GatePredictors(v("w_alpha"), v("b_alpha"), v("w_beta"), v("b_beta")))
        for key, blk in self.ffn.items():
            b = bound.setdefault(key, Bound(None, None, None))
            b.w1 = values.get(f"{key}.w1", blk.w1)
            b.w2 = values.get(f"{key}.w2", blk.w2)
        return bound


@dataclass
class Bound:
    fmaps: Optional[FeatureMaps]
    gates: Optional[GateParams]
    gp: Optional[GatePredictors]
    w1: object = None
    w2: object = None


def gradients(loss_fn: Callable[[Dict[str, Bound], object], Var], params: TrainableSet,
              inputs, wrt: Optional[Sequence[str]] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss value and exact reverse-mode gradients for ``wrt`` (default: all trainables).

    ``loss_fn(bound, inputs)`` must build its scalar from autodiff operations,
    reading trainable tensors from ``bound``.
    """
    names = list(params.names() if wrt is None else wrt)
    for n in names:
        params._locate(n)
    leaves = {n: Var(np.array(params.get(n), dtype=np.float64), name=n) for n in names}
    loss = loss_fn(params.bind(leaves), inputs)
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("loss_fn must return a scalar Var")
    autodiff.backward(loss)
    grads = {n: (v.grad if v.grad is not None else np.zeros_like(v.value))
             for n, v in leaves.items()}
    return float(loss.value), grads


def finite_difference(loss: Callable[[], float], params: TrainableSet,
                      names: Optional[Sequence[str]] = None, eps: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences of ``loss()`` w.r.t. each element of the named tensors.

    Parameters are perturbed in place and restored afterwards.
    """
    out = {}
    for name in (params.names() if names is None else names):
        base = params.get(name).copy()
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            work = base.copy()
            work[idx] = base[idx] + eps
            params.set(name, work)
            up = loss()
            work[idx] = base[idx] - eps
            params.set(name, work)
            down = loss()
            g[idx] = (up - down) / (2 * eps)
        params.set(name, base)
        out[name] = g
    return out


def gradient_mismatch(analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray],
                      rtol: float = 1e-4, atol: float = 1e-8) -> Dict[str, float]:
    """Worst ratio |a - n| / max(rtol * max(|a|, |n|), atol) per tensor; <= 1 passes."""
    out = {}
    for name, a in analytic.items():
        n = numeric[name]
        tol = np.maximum(rtol * np.maximum(np.abs(a), np.abs(n)), atol)
        out[name] = float(np.max(np.abs(a - n) / tol)) if a.size else 0.0
    return out


# ---------------------------------------------------------------------------
# Stage 1: per-layer alignment

@dataclass
class AlignmentSample:
    """Clean context frames the student absorbs, plus one noisy frame to match on.

    ``teacher_cache`` holds the teacher's keys/values for the context, or is
    empty for a teacher that sees no history.
    """

    context: List[np.ndarray]
    x_t: np.ndarray
    teacher_cache: KVCache
    teacher_out: Optional[np.ndarray] = None

    @property
    def frame_index(self) -> int:
        return len(self.context)


def make_alignment_samples(proj: ProjectionSet, tokens_per_frame: int, history_frames: int,
                           count: int, rng: np.random.Generator,
                           teacher_history: bool = True) -> List[AlignmentSample]:
    """Seeded Gaussian latents standing in for teacher hidden states."""
    L, d = tokens_per_frame, proj.d
    samples = []
    for _ in range(count):
        context = [rng.standard_normal((L, d)) for _ in range(history_frames)]
        x_t = rng.standard_normal((L, d))
        cache = KVCache(dtype=proj.dtype)
        if teacher_history:
            for frame in context:
                attention.append_clean_frame(cache, frame, proj)
        s = AlignmentSample(context, x_t, cache)
        s.teacher_out = attention.full_attention(x_t, cache, proj, frame_index=s.frame_index)
        samples.append(s)
    return samples


def alignment_loss(student: HybridLayer, teacher_proj: ProjectionSet, teacher_cache: KVCache,
                   x_t: np.ndarray, frame_index: int) -> float:
    """||y' - y||_F^2 / (L d) with the student reading its current state."""
    _same_projections(student.proj, teacher_proj)
    y_student = hybrid.forward(student, x_t, frame_index)
    y_teacher = attention.full_attention(x_t, teacher_cache, teacher_proj, frame_index=frame_index)
    diff = y_student - y_teacher
    return float(np.sum(diff * diff) / diff.size)


def _same_projections(a: ProjectionSet, b: ProjectionSet) -> None:
    if a is b:
        return
    if a.num_heads != b.num_heads or any(
            x.shape != y.shape or not np.array_equal(x, y)
            for x, y in zip((a.w_q, a.w_k, a.w_v, a.w_o), (b.w_q, b.w_k, b.w_v, b.w_o))):
        raise ContractError("student and teacher must share the frozen projections")


def _primed(layer: HybridLayer, context: Sequence[np.ndarray]) -> HybridLayer:
    """View of ``layer`` (shared parameters) with a fresh state holding ``context``."""
    view = dataclasses.replace(layer, state=RecurrentState.zeros(layer.num_heads, layer.head_dim,
                                                                 layer.proj.dtype))
    for f, frame in enumerate(context):
        hybrid.absorb_clean_frame(view, frame, f)
    return view


def sample_alignment_loss(layer: HybridLayer, sample: AlignmentSample) -> float:
    view = _primed(layer, sample.context)
    return alignment_loss(view, layer.proj, sample.teacher_cache, sample.x_t, sample.frame_index)


def batch_alignment_loss(layer: HybridLayer, samples: Sequence[AlignmentSample]) -> float:
    return float(np.mean([sample_alignment_loss(layer, s) for s in samples]))


def alignment_loss_graph(bound: Bound, layer: HybridLayer, sample: AlignmentSample) -> Var:
    """Differentiable alignment loss; the state is rebuilt from the context inside the graph."""
    ad = autodiff
    proj = layer.proj
    S = np.zeros((layer.num_heads, layer.head_dim, layer.head_dim))
    for f, frame in enumerate(sample.context):
        k, v, a, b = hybrid.recurrent_inputs(frame, proj, bound.fmaps, bound.gp, f, ops=ad)
        S = ad.gdn_update(S, k, v, a, b)
    y = hybrid.hybrid_output(sample.x_t, proj, bound.fmaps, bound.gates, S,
                             sample.frame_index, ops=ad)
    diff = y - sample.teacher_out
    return ad.sum_all(diff * diff) * (1.0 / sample.x_t.size)


def _stage1_graph(layer: HybridLayer, key: str):
    def loss_fn(bound, samples):
        total = None
        for s in samples:
            term = alignment_loss_graph(bound[key], layer, s)
            total = term if total is None else total + term
        return total * (1.0 / len(samples))
    return loss_fn


# ---------------------------------------------------------------------------
# Stage 2: joint velocity matching

@dataclass
class JointSample:
    context: List[np.ndarray]
    x_t: np.ndarray
    t: float
    cond: np.ndarray
    teacher_v: Optional[np.ndarray] = None

    @property
    def frame_index(self) -> int:
        return len(self.context)


def prime(model: streaming.ToyModel, context: Sequence[np.ndarray],
          cond: Optional[np.ndarray] = None) -> None:
    """Reset memory and commit ``context`` latents with clean passes."""
    model.reset()
    for f, z in enumerate(context):
        streaming.velocity(model, z, 0.0, f, cond=cond, commit=True)


def _model_frame(model: streaming.ToyModel) -> int:
    blk = model.blocks[0]
    if blk.backend == "softmax":
        return blk.cache.num_frames
    return blk.layer.state.last_clean_frame + 1


def joint_loss(student: streaming.ToyModel, teacher: streaming.ToyModel, x_t: np.ndarray,
               t: float, c: np.ndarray, frame_index: Optional[int] = None) -> float:
    """||v_student - v_teacher||_2^2 on the same (x_t, t, c), each model reading its own memory."""
    if student.d != teacher.d or student.num_layers != teacher.num_layers:
        raise ContractError("student and teacher shapes differ")
    fi = _model_frame(teacher) if frame_index is None else frame_index
    v_s = streaming.velocity(student, x_t, t, fi, cond=c)
    v_t = streaming.velocity(teacher, x_t, t, fi, cond=c)
    diff = v_s - v_t
    return float(np.sum(diff * diff))


def make_joint_samples(teacher: streaming.ToyModel, tokens_per_frame: int, history_frames: int,
                       count: int, rng: np.random.Generator) -> List[JointSample]:
    L, d = tokens_per_frame, teacher.d
    out = []
    for _ in range(count):
        context = [rng.standard_normal((L, d)) for _ in range(history_frames)]
        x_t = rng.standard_normal((L, d))
        t = float(rng.uniform(0.0, 1.0))
        s = JointSample(context, x_t, t, teacher.cond.copy())
        prime(teacher, context, s.cond)
        s.teacher_v = streaming.velocity(teacher, x_t, t, s.frame_index, cond=s.cond)
        out.append(s)
    teacher.reset()
    return out


def sample_joint_loss(student: streaming.ToyModel, sample: JointSample) -> float:
    prime(student, sample.context, sample.cond)
    v = streaming.velocity(student, sample.x_t, sample.t, sample.frame_index, cond=sample.cond)
    diff = v - sample.teacher_v
    return float(np.sum(diff * diff))


def batch_joint_loss(student: streaming.ToyModel, samples: Sequence[JointSample]) -> float:
    return float(np.mean([sample_joint_loss(student, s) for s in samples]))


def velocity_graph(model: streaming.ToyModel, bound: Dict[str, Bound], sample: JointSample) -> Var:
    """Differentiable replay: clean passes over the context, then the noisy pass."""
    ad = autodiff
    mem = []
    for i, blk in enumerate(model.blocks):
        if blk.backend == "softmax":
            mem.append(([], []))
        else:
            H, D = blk.proj.num_heads, blk.proj.head_dim
            mem.append(np.zeros((H, D, D)))

    def run(z, t, f, commit):
        h = streaming.embed(z, t, sample.cond)
        for i, blk in enumerate(model.blocks):
            b = bound.get(f"L{i}")
            u = streaming.rms_normalize(h, ad)
            if blk.backend == "softmax":
                keys, vals = mem[i]
                a = attention.softmax_layer_output(u, blk.proj, keys, vals, f, ops=ad)
                if commit:
                    k, v = attention.clean_frame_kv(u, blk.proj, f, ops=ad)
                    keys.append(k)
                    vals.append(v)
            else:
                a = hybrid.hybrid_output(u, blk.proj, b.fmaps, b.gates, mem[i], f, ops=ad)
                if commit:
                    k, v, al, be = hybrid.recurrent_inputs(u, blk.proj, b.fmaps, b.gp, f, ops=ad)
                    mem[i] = ad.gdn_update(mem[i], k, v, al, be)
            h = h + a
            w1 = b.w1 if b is not None and b.w1 is not None else blk.w1
            w2 = b.w2 if b is not None and b.w2 is not None else blk.w2
            h = h + streaming.feedforward(h, w1, w2, ad)
        return streaming.rms_normalize(h, ad)

    for f, z in enumerate(sample.context):
        run(z, 0.0, f, commit=True)
    return run(sample.x_t, sample.t, sample.frame_index, commit=False)


def _stage2_graph(model: streaming.ToyModel):
    def loss_fn(bound, samples):
        total = None
        for s in samples:
            diff = velocity_graph(model, bound, s) - s.teacher_v
            term = autodiff.sum_all(diff * diff)
            total = term if total is None else total + term
        return total * (1.0 / len(samples))
    return loss_fn


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainRun:
    steps: int
    learning_rate: float
    seed: int
    loss_trace: List[float] = field(default_factory=list)
    final_loss: float = math.nan
    optimizer: str = "sgd"

    @property
    def smoothed(self) -> np.ndarray:
        """Running minimum of the loss trace."""
        return np.minimum.accumulate(np.asarray(self.loss_trace))

    def manifest(self) -> dict:
        return {"steps": self.steps, "learning_rate": self.learning_rate, "seed": self.seed,
                "optimizer": self.optimizer, "final_loss": self.final_loss,
                "initial_loss": self.loss_trace[0] if self.loss_trace else None}


class _Optimizer:
    """SGD with momentum, or Adam; state is kept per parameter name."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.9,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.momentum, self.betas, self.eps = kind, lr, momentum, betas, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: TrainableSet, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            p = params.get(name)
            if self.kind == "sgd":
                m = self.momentum * self.m.get(name, 0.0) + g
                self.m[name] = m
                params.set(name, p - self.lr * m)
            else:
                b1, b2 = self.betas
                m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
                v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
                self.m[name], self.v[name] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                params.set(name, p - self.lr * mhat / (np.sqrt(vhat) + self.eps))


def _train(loss_fn, params: TrainableSet, data_sampler, eval_loss, steps: int, lr: float,
           seed: int, optimizer: str, momentum: float) -> TrainRun:
    if steps < 1:
        raise ContractError("steps must be >= 1")
    rng = numerics.make_rng(seed, stream=2)
    opt = _Optimizer(optimizer, lr, momentum)
    run = TrainRun(steps, lr, seed, optimizer=optimizer)
    batch = None
    for step in range(steps):
        batch = data_sampler(rng)
        loss, grads = gradients(loss_fn, params, batch)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"loss became non-finite at step {step}")
        run.loss_trace.append(loss)
        if lr:
            opt.step(params, grads)
    run.final_loss = float(eval_loss(batch))
    if not math.isfinite(run.final_loss):
        raise DivergenceError(f"loss became non-finite after step {steps - 1}")
    return run


def fixed_batch(samples: Sequence) -> Callable[[np.random.Generator], Sequence]:
    """Data sampler that returns the same batch every step (full-batch descent)."""
    samples = list(samples)
    return lambda rng: samples


def train_stage1(layer: HybridLayer, teacher: ProjectionSet, data_sampler, steps: int,
                 lr: float, seed: int = 0, optimizer: str = "sgd",
                 momentum: float = 0.9) -> TrainRun:
    """Gradient descent on the alignment loss of one layer.

    ``data_sampler(rng)`` returns a list of :class:`AlignmentSample`; the
    projections are shared with ``teacher`` and stay bitwise unchanged.
    """
    _same_projections(layer.proj, teacher)
    params = TrainableSet.for_layer(layer)
    return _train(_stage1_graph(layer, "layer"), params, data_sampler,
                  lambda batch: batch_alignment_loss(layer, batch),
                  steps, lr, seed, optimizer, momentum)


def train_stage2(student: streaming.ToyModel, data_sampler, steps: int, lr: float,
                 seed: int = 0, optimizer: str = "sgd", momentum: float = 0.9,
                 include_ffn: bool = True) -> TrainRun:
    """Joint velocity matching over every hybrid block of ``student``.

    ``data_sampler(rng)`` returns :class:`JointSample` objects whose
    ``teacher_v`` already holds the frozen teacher's velocity.
    """
    params = TrainableSet.for_model(student, include_ffn)
    run = _train(_stage2_graph(student), params, data_sampler,
                 lambda batch: batch_joint_loss(student, batch),
                 steps, lr, seed, optimizer, momentum)
    student.reset()
    return run
