"""Distil one softmax layer into a hybrid layer, then tune the whole stack.

    python3 demos/distill_layer.py

Stage 1 trains only the feature maps, the fusion gate and the alpha/beta
predictors of a single layer so that its output on the current frame matches
the softmax teacher reading the same history.  Stage 2 then matches the
velocity of the full toy denoiser, also updating the feedforward weights of
the replaced layer.
"""

from gdnstream import attention, distill, hybrid, numerics, streaming

d, H, L = 16, 2, 4

rng = numerics.make_rng(0, stream=70)
proj = attention.ProjectionSet.random(d, H, rng)
student = hybrid.make_layer(proj, "headwise")
samples = distill.make_alignment_samples(proj, L, history_frames=2, count=8, rng=rng)

run = distill.train_stage1(student, proj, distill.fixed_batch(samples), steps=300, lr=2.0)
print("stage 1 (one layer, 2 frames of history)")
for step in range(0, 300, 50):
    print(f"  step {step:3d}  loss {run.loss_trace[step]:.3e}")
print(f"  final     loss {run.final_loss:.3e}  ({run.loss_trace[0] / run.final_loss:.0f}x lower)")

teacher = streaming.build_toy_model(d, H, ["softmax"] * 3, seed=1)
model = streaming.with_backends(teacher, ["softmax", "hybrid", "softmax"])
joint = distill.make_joint_samples(teacher, L, history_frames=2, count=4,
                                   rng=numerics.make_rng(1, stream=9))
run = distill.train_stage2(model, distill.fixed_batch(joint), steps=60, lr=0.05)
print("\nstage 2 (layer 1 replaced, velocity matching)")
print(f"  loss {run.loss_trace[0]:.3e} -> {run.final_loss:.3e}")
