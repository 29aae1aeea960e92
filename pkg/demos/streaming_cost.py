"""Stream frames with both backends and watch cost grow (or not).

    python3 demos/streaming_cost.py [frames]

Softmax layers keep every past key/value, so per-frame attention work grows
with the history and memory grows by a fixed amount per frame.  Hybrid layers
fold each clean frame into a fixed-size state instead.
"""

import sys

from gdnstream import streaming

N = int(sys.argv[1]) if len(sys.argv) > 1 else 24
L, d, H, T, LAYERS = 8, 32, 4, 4, 2

results = {}
for backend in streaming.BACKENDS:
    cfg = streaming.StreamConfig(N, L, T, d, H, seed=0, backends=(backend,) * LAYERS)
    frames, metrics = streaming.generate(cfg.build_model(), cfg)
    results[backend] = metrics

print(f"{N} frames, L={L} tokens/frame, d={d}, H={H}, T={T} denoise steps, {LAYERS} layers\n")
print(f"{'frame':>5} {'softmax MACs':>14} {'hybrid MACs':>14} {'softmax B':>10} {'hybrid B':>9}")
sm, hy = results["softmax"], results["hybrid"]
for n in range(0, N, max(1, N // 8)):
    print(f"{n:5d} {sm.attention_macs()[n]:14d} {hy.attention_macs()[n]:14d} "
          f"{sm.memory_bytes()[n]:10d} {hy.memory_bytes()[n]:9d}")

xs = list(range(1, N + 1))
for name, m in results.items():
    deg = streaming.fitted_degree(xs, m.attention_macs())
    print(f"\n{name}: cumulative MACs fit an exact polynomial of degree {deg}; "
          f"state writes per layer {m.state_writes(0)[-1]}")

# where a single noisy pass becomes cheaper with the recurrent branch
D = d // H
for h in range(10_000):
    if (streaming.count_attention_flops("hybrid", L, d, H, D, h)
            < streaming.count_attention_flops("softmax", L, d, H, D, h)):
        print(f"\nper-pass crossover: hybrid is cheaper once {h} frames of history exist")
        break
