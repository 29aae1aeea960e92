import numpy as np
import pytest

from gdnstream import attention, distill, hybrid, numerics, streaming
from gdnstream.attention import KVCache, ProjectionSet
from gdnstream.distill import FrozenParameterError, TrainableSet
from gdnstream.numerics import ContractError

import oracles
from conftest import random_layer


def _setup(seed, history=2, count=2, teacher_history=True, d=16, heads=2, L=4, student_rng=True):
    r = numerics.make_rng(seed)
    proj = ProjectionSet.random(d, heads, r)
    layer = hybrid.make_layer(proj, "headwise", r if student_rng else None)
    samples = distill.make_alignment_samples(proj, L, history, count, r, teacher_history)
    return layer, samples


def test_first_frame_loss_is_exactly_zero(rng):
    layer = random_layer(0)
    x = rng.standard_normal((4, 8))
    assert distill.alignment_loss(layer, layer.proj, KVCache(), x, 0) == 0.0


def test_shut_gate_against_empty_teacher_cache(rng):
    layer = random_layer(1)
    for f in range(2):
        hybrid.absorb_clean_frame(layer, rng.standard_normal((4, 8)), f)
    shut = hybrid.intra_only(layer)
    loss = distill.alignment_loss(shut, layer.proj, KVCache(), rng.standard_normal((4, 8)), 2)
    # only RoPE rounding at shifted global positions remains
    assert loss <= 1e-25


def test_loss_matches_straight_line_oracle():
    layer, samples = _setup(2, student_rng=False, count=1)
    s = samples[0]
    got = distill.sample_alignment_loss(layer, s)
    want = oracles.alignment_loss(layer, s.context, s.x_t)
    assert got > 0
    assert abs(got - want) <= 1e-12


def test_alignment_contract_errors(rng):
    layer = random_layer(3)
    with pytest.raises(ContractError):
        distill.alignment_loss(layer, layer.proj, KVCache(), rng.standard_normal((4, 6)), 0)
    other = ProjectionSet.random(8, 2, rng)
    with pytest.raises(ContractError):
        distill.alignment_loss(layer, other, KVCache(), rng.standard_normal((4, 8)), 0)


def test_graph_loss_equals_array_loss():
    layer, samples = _setup(4, count=3)
    ts = TrainableSet.for_layer(layer)
    value, _ = distill.gradients(distill._stage1_graph(layer, "layer"), ts, samples)
    assert abs(value - distill.batch_alignment_loss(layer, samples)) <= 1e-14


def test_frozen_parameters_are_refused():
    layer, samples = _setup(5)
    ts = TrainableSet.for_layer(layer)
    assert "layer.w_q" not in ts.names() and "layer.b_g" not in ts.names()
    for name in ("layer.w_q", "layer.w_o", "layer.b_g", "nolayer.phi_q"):
        with pytest.raises(FrozenParameterError):
            distill.gradients(distill._stage1_graph(layer, "layer"), ts, samples, wrt=[name])


@pytest.mark.parametrize("seed", range(5))
def test_gate_weight_gradient_matches_differences(seed):
    layer, samples = _setup(10 + seed, count=1)
    ts = TrainableSet.for_layer(layer)
    _, g = distill.gradients(distill._stage1_graph(layer, "layer"), ts, samples, wrt=["layer.w_g"])
    fd = distill.finite_difference(lambda: distill.batch_alignment_loss(layer, samples), ts,
                                   ["layer.w_g"])
    assert distill.gradient_mismatch(g, fd)["layer.w_g"] <= 1.0


def test_key_map_gradient_through_three_frames():
    layer, samples = _setup(20, history=3, count=1)
    ts = TrainableSet.for_layer(layer)
    _, g = distill.gradients(distill._stage1_graph(layer, "layer"), ts, samples, wrt=["layer.phi_k"])
    assert np.any(g["layer.phi_k"] != 0)
    fd = distill.finite_difference(lambda: distill.batch_alignment_loss(layer, samples), ts,
                                   ["layer.phi_k"])
    assert distill.gradient_mismatch(g, fd)["layer.phi_k"] <= 1.0


def test_gradient_mismatch_metric():
    a = {"w": np.array([1.0, 1e-10])}
    n = {"w": np.array([1.00009, 5e-9])}
    assert distill.gradient_mismatch(a, n)["w"] <= 1.0
    n = {"w": np.array([1.001, 0.0])}
    assert distill.gradient_mismatch(a, n)["w"] > 1.0


def test_train_zero_lr_constant_and_frozen_weights_untouched():
    layer, samples = _setup(30, student_rng=False)
    ts = TrainableSet.for_layer(layer)
    digest = ts.frozen_digest()
    run = distill.train_stage1(layer, layer.proj, distill.fixed_batch(samples), 5, 0.0, seed=1)
    assert len(set(run.loss_trace)) == 1 and len(run.loss_trace) == 5
    run = distill.train_stage1(layer, layer.proj, distill.fixed_batch(samples), 20, 2.0, seed=1)
    assert ts.frozen_digest() == digest
    assert run.final_loss < run.loss_trace[0]
    assert np.all(np.diff(run.smoothed) <= 0)


def test_training_is_deterministic():
    traces = []
    for _ in range(2):
        layer, samples = _setup(31, student_rng=False)
        traces.append(distill.train_stage1(layer, layer.proj, distill.fixed_batch(samples),
                                           10, 2.0, seed=4).loss_trace)
    assert traces[0] == traces[1]


def test_adam_option_reduces_loss():
    layer, samples = _setup(32, student_rng=False)
    run = distill.train_stage1(layer, layer.proj, distill.fixed_batch(samples), 20, 0.01,
                               seed=0, optimizer="adam")
    assert run.final_loss < run.loss_trace[0]
    with pytest.raises(ContractError):
        distill.train_stage1(layer, layer.proj, distill.fixed_batch(samples), 1, 0.1, optimizer="lbfgs")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    layer, samples = _setup(33, student_rng=False)
    with pytest.raises(distill.DivergenceError, match="step"):
        distill.train_stage1(layer, layer.proj, distill.fixed_batch(samples), 50, 1e12, seed=0)


def test_steps_must_be_positive():
    layer, samples = _setup(34)
    with pytest.raises(ContractError):
        distill.train_stage1(layer, layer.proj, distill.fixed_batch(samples), 0, 1.0)


# ---------------------------------------------------------------------------
# joint loss

def _models(seed=0, backends=("softmax", "hybrid", "softmax")):
    teacher = streaming.build_toy_model(16, 2, ["softmax"] * len(backends), seed, random_hybrid=True)
    return teacher, streaming.with_backends(teacher, backends)


def test_joint_loss_zero_without_replacement(rng):
    teacher, _ = _models()
    student = streaming.with_backends(teacher, ["softmax"] * 3)
    ctx = [rng.standard_normal((4, 16)) for _ in range(2)]
    distill.prime(teacher, ctx)
    distill.prime(student, ctx)
    assert distill.joint_loss(student, teacher, rng.standard_normal((4, 16)), 0.3, teacher.cond) == 0.0


def test_intra_only_replacement_isolates_one_layer(rng):
    teacher, student = _models()
    student.blocks[1].layer = hybrid.intra_only(student.blocks[1].layer)
    # one context frame: frame 0 has no cross-frame term, so both models prime identically
    ctx = [rng.standard_normal((4, 16))]
    distill.prime(teacher, ctx)
    distill.prime(student, ctx)
    x, t = rng.standard_normal((4, 16)), 0.4
    # teacher forward with layer 1 reduced to its within-frame branch
    h = streaming.embed(x, t, teacher.cond)
    for i, blk in enumerate(teacher.blocks):
        u = streaming.rms_normalize(h)
        if i == 1:
            a = numerics.matmul(attention.intra_attention(u, blk.proj).reshape(4, 16), blk.proj.w_o)
        else:
            a = attention.full_attention(u, blk.cache, blk.proj)
        h = h + a
        h = h + streaming.feedforward(h, blk.w1, blk.w2)
    isolated = streaming.rms_normalize(h)
    v_t = streaming.velocity(teacher, x, t, 1)
    want = float(np.sum((isolated - v_t) ** 2))
    got = distill.joint_loss(student, teacher, x, t, teacher.cond)
    assert got > 0 and abs(got - want) <= 1e-12 * max(1.0, want)


def test_joint_loss_is_pure(rng):
    teacher, student = _models(1)
    ctx = [rng.standard_normal((4, 16))]
    distill.prime(teacher, ctx)
    distill.prime(student, ctx)
    x = rng.standard_normal((4, 16))
    a = distill.joint_loss(student, teacher, x, 0.5, teacher.cond)
    with numerics.count_macs():
        b = distill.joint_loss(student, teacher, x, 0.5, teacher.cond)
    assert a == b


def test_joint_loss_shape_contract():
    teacher, _ = _models()
    other = streaming.build_toy_model(16, 2, ["softmax"] * 2, 0)
    with pytest.raises(ContractError):
        distill.joint_loss(other, teacher, np.zeros((4, 16)), 0.5, teacher.cond)


def test_joint_graph_matches_array_path_and_trains():
    teacher, student = _models(2, ("hybrid", "softmax", "hybrid"))
    samples = distill.make_joint_samples(teacher, 4, 2, 2, numerics.make_rng(2, 5))
    ts = TrainableSet.for_model(student)
    assert "L0.w1" in ts.names() and "L1.w1" not in ts.names()
    value, _ = distill.gradients(distill._stage2_graph(student), ts, samples)
    assert abs(value - distill.batch_joint_loss(student, samples)) <= 1e-12
    digest = ts.frozen_digest()
    run = distill.train_stage2(student, distill.fixed_batch(samples), 15, 0.05, seed=0)
    assert run.final_loss < run.loss_trace[0]
    assert ts.frozen_digest() == digest


def test_joint_gradients_match_differences():
    teacher, student = _models(3, ("softmax", "hybrid"))
    samples = distill.make_joint_samples(teacher, 4, 2, 1, numerics.make_rng(3, 5))
    ts = TrainableSet.for_model(student)
    names = ["L1.phi_v", "L1.w2", "L1.b_beta"]
    _, g = distill.gradients(distill._stage2_graph(student), ts, samples, wrt=names)
    fd = distill.finite_difference(lambda: distill.batch_joint_loss(student, samples), ts, names)
    assert max(distill.gradient_mismatch(g, fd).values()) <= 1.0
