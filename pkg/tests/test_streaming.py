import csv

import numpy as np
import pytest

from gdnstream import numerics, streaming
from gdnstream.streaming import StreamConfig

SMALL = dict(tokens_per_frame=4, hidden=16, heads=2)


def _run(backends, n=4, T=2, seed=0, precision="double", **model_kw):
    cfg = StreamConfig(n, SMALL["tokens_per_frame"], T, SMALL["hidden"], SMALL["heads"], seed,
                       tuple(backends), precision)
    model = cfg.build_model(**model_kw)
    frames, metrics = streaming.generate(model, cfg)
    return model, frames, metrics


def test_first_frame_identical_across_backends():
    _, fs, _ = _run(["softmax"] * 3, n=1)
    _, fh, _ = _run(["hybrid"] * 3, n=1, random_hybrid=True)
    assert np.array_equal(fs[0], fh[0])


@pytest.mark.parametrize("T", [1, 2, 4, 8])
def test_one_state_write_per_frame(T):
    model, _, metrics = _run(["hybrid", "softmax", "hybrid"], n=5, T=T)
    for i, blk in enumerate(model.blocks):
        assert blk.state_writes == 5
        assert list(metrics.state_writes(i)) == [1, 2, 3, 4, 5]
    assert all(b.layer.state.write_count == 5 for b in model.blocks if b.backend == "hybrid")


@pytest.mark.parametrize("granularity", ["scalar", "headwise", "elementwise"])
def test_instrumented_macs_equal_closed_form(granularity):
    n, T = 5, 3
    model, _, metrics = _run(["softmax", "hybrid"], n=n, T=T, granularity=granularity)
    L, d, H = SMALL["tokens_per_frame"], SMALL["hidden"], SMALL["heads"]
    for i, backend in enumerate(["softmax", "hybrid"]):
        expect = streaming.cumulative_attention_flops(backend, L, d, H, d // H, n, T, granularity)
        assert int(metrics.attention_macs(i)[-1]) == expect
    for r in metrics.rows:
        assert r.flops_macs == streaming.count_attention_flops(
            r.backend, L, d, H, d // H, r.frame, r.pass_type, granularity)


def test_no_history_difference_is_linear_branch_terms():
    L, d, H, D = 16, 64, 4, 16
    diff = (streaming.count_attention_flops("hybrid", L, d, H, D, 0)
            - streaming.count_attention_flops("softmax", L, d, H, D, 0))
    state_query, phi_q, gate = L * D * D * H, L * D * D * H, L * d * H
    assert diff == state_query + phi_q + gate


def test_softmax_per_pass_history_term_doubles():
    L, d, H, D = 16, 64, 4, 16
    base = streaming.count_attention_flops("softmax", L, d, H, D, 0)
    k = 1000
    r = ((streaming.count_attention_flops("softmax", L, d, H, D, 2 * k) - base)
         / (streaming.count_attention_flops("softmax", L, d, H, D, k) - base))
    assert r == 2.0
    assert (streaming.count_attention_flops("hybrid", L, d, H, D, 2 * k)
            == streaming.count_attention_flops("hybrid", L, d, H, D, k))


def test_memory_footprint_formulas():
    assert streaming.memory_footprint("hybrid", 16, 64, 4, 16, 0) == \
        streaming.memory_footprint("hybrid", 16, 64, 4, 16, 10**6) == 4 * 16 * 16 * 8
    s = [streaming.memory_footprint("softmax", 16, 64, 4, 16, n, "single") for n in range(5)]
    assert set(np.diff(s)) == {2 * 16 * 64 * 4}


def test_reported_bytes_match_live_buffers():
    model, _, metrics = _run(["softmax", "hybrid"], n=10, T=1)
    soft, hyb = model.blocks
    live_soft = sum(a.nbytes for a in soft.cache.keys + soft.cache.values)
    assert metrics.memory_bytes(0)[-1] == live_soft == streaming.memory_footprint(
        "softmax", 4, 16, 2, 8, 10)
    assert metrics.memory_bytes(1)[-1] == hyb.layer.state.S.nbytes == streaming.memory_footprint(
        "hybrid", 4, 16, 2, 8, 10)


def test_determinism_and_prefix_causality():
    for backends in (["softmax"] * 2, ["hybrid"] * 2):
        _, a, ma = _run(backends, n=6)
        _, b, mb = _run(backends, n=6)
        _, c, _ = _run(backends, n=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert ma.deterministic_rows() == mb.deterministic_rows()
        assert all(np.array_equal(x, y) for x, y in zip(a[:3], c))


def test_metrics_are_cumulative_and_nondecreasing():
    _, _, m = _run(["softmax", "hybrid"], n=5)
    for series in (m.attention_macs(), m.memory_bytes(), m.state_writes(), m.wall_time_ns()):
        assert np.all(np.diff(series) >= 0)


def test_metrics_csv_layout(tmp_path):
    _, _, m = _run(["hybrid"], n=2, T=2)
    path = tmp_path / "m.csv"
    m.to_csv(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == streaming.CSV_COLUMNS
    assert len(rows) == 1 + 2 * (2 + 1)
    assert {r[3] for r in rows[1:]} == {"noisy", "clean"}


def test_single_precision_path():
    _, frames, m = _run(["hybrid", "softmax"], n=3, precision="single")
    assert frames[0].dtype == np.float32
    assert m.memory_bytes(1)[-1] == 2 * 3 * 4 * 16 * 4


def test_fitted_shapes_small_sweep():
    xs = [2, 4, 6, 8]
    for backend, deg in (("softmax", 2), ("hybrid", 1)):
        _, _, m = _run([backend], n=8, T=1)
        ys = [int(m.attention_macs()[n - 1]) for n in xs]
        assert streaming.fitted_degree(xs, ys) == deg
        assert streaming.fit_polynomial(xs, ys, deg)[1] >= 0.999


def test_exact_slope():
    assert streaming.exact_slope([1, 2, 4], [10, 20, 40]) == 10
    assert streaming.exact_slope([1, 2, 4], [5, 5, 5]) == 0
    assert streaming.exact_slope([1, 2, 3], [1, 2, 4]) is None
    assert streaming.exact_slope([3], [1]) is None


def test_noisy_write_ablation_records_extra_writes():
    cfg = StreamConfig(3, 4, 2, 16, 2, 0, ("hybrid",))
    model = cfg.build_model()
    model.blocks[0].layer.clean_pass_only = False
    _, m = streaming.generate(model, cfg)
    assert model.blocks[0].layer.state.write_count == 3
    assert model.blocks[0].state_writes == 3 + 3 * 2


def test_token_level_access_changes_frames():
    cfg = StreamConfig(3, 4, 2, 16, 2, 0, ("hybrid",))
    model = cfg.build_model(random_hybrid=True)
    base, _ = streaming.generate(model, cfg)
    model.blocks[0].layer.frame_level_access = False
    tok, _ = streaming.generate(model, cfg)
    assert not np.array_equal(base[2], tok[2])


def test_with_backends_shares_weights():
    model = streaming.build_toy_model(16, 2, ["softmax"] * 2, seed=3)
    other = streaming.with_backends(model, ["hybrid", "softmax"])
    assert other.backends == ("hybrid", "softmax")
    assert other.blocks[0].proj is model.blocks[0].proj
    assert np.array_equal(other.blocks[1].w1, model.blocks[1].w1)
    direct = streaming.build_toy_model(16, 2, ["hybrid", "softmax"], seed=3)
    assert np.array_equal(direct.blocks[1].proj.w_q, model.blocks[1].proj.w_q)


def test_non_finite_latent_is_reported(monkeypatch):
    cfg = StreamConfig(2, 4, 2, 16, 2)
    model = cfg.build_model()
    monkeypatch.setattr(streaming, "velocity", lambda *a, **k: np.full((4, 16), np.inf))
    with pytest.raises(streaming.StreamError, match="frame 0, step 0"):
        streaming.generate(model, cfg)


def test_config_contracts():
    with pytest.raises(numerics.ContractError):
        StreamConfig(0, 4, 2, 16, 2)
    with pytest.raises(numerics.ContractError):
        StreamConfig(1, 4, 2, 15, 2)
    model = streaming.build_toy_model(16, 2, ["hybrid"], seed=0)
    with pytest.raises(numerics.ContractError):
        streaming.generate(model, StreamConfig(1, 4, 1, 32, 2))
    with pytest.raises(numerics.ContractError):
        streaming.build_toy_model(16, 2, ["mamba"], seed=0)
