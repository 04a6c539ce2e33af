"""
Regulating a quality gradient against a semantic one
====================================================

A walk through the gradient rule used during fine-tuning, first on
two-dimensional vectors where the geometry is easy to see, then on the
gradients of a real (tiny) dual encoder.
"""

import numpy as np

from grmp.params import GradientVector, Layout
from grmp.qgr import gradient_angle, regulate


def vec(*values):
    v = np.array(values, dtype=float)
    return GradientVector(v, Layout.from_shapes([("g", v.shape)]))


# When the two gradients disagree (negative dot product) the quality
# gradient passes through untouched.
g_qua, g_sem = vec(1.0, 1.0), vec(-1.0, 0.0)
print("disagreeing:", regulate(g_qua, g_sem, 5.0).values)

# When they agree, the shared component is scaled by (1 - lambda).
# lambda = 1 removes it entirely, larger values push against it.
g_sem = vec(1.0, 0.0)
for lam in (0.0, 1.0, 5.0):
    out = regulate(g_qua, g_sem, lam)
    print(f"lambda={lam:g}: {out.values}  dot with G_sem {out.dot(g_sem):+.1f}  "
          f"angle {gradient_angle(out, g_sem):.1f} deg")

# The same rule on a model. A tunable copy with shifted prompts is compared
# with the frozen initialization, so the semantic KL term has a gradient.
from grmp.model import DualEncoder, finetune_parameter_names
from grmp.qgr import step_gradients
from grmp.synth import build_benchmark

_, ev = build_benchmark(seed=0)
semantic = DualEncoder.initialize(prompt_seed=0)
model = DualEncoder.initialize(prompt_seed=1)
store = model.params.with_trainable(finetune_parameter_names(model.params, model.config))
# Train without regulation until a step where the two gradients agree.
from grmp.optim import Adam
from grmp.qgr import FinetuneConfig, finetune_step

y = np.linspace(0.0, 1.0, 16)
opt = Adam(1e-3, weight_decay=0.01)
for step in range(200):
    images = ev.images[np.random.default_rng(step).choice(len(ev), 16, replace=False)]
    p_sem = semantic.semantic_distribution(images)
    ce, kl, g_qua, g_sem = step_gradients(store, model.config, images, y, p_sem)
    if g_qua.dot(g_sem) > 0:
        break
    store, _, _ = finetune_step(store, model.config, images, y, p_sem, FinetuneConfig(lam=0.0), opt)
print(f"\nstep {step}: {g_qua.values.size} trainable parameters, "
      f"loss_ce {ce:.4f}, loss_kl {kl:.4f}")
print(f"angle between G_qua and G_sem: {gradient_angle(g_qua, g_sem):.2f} deg")
for lam in (1.0, 5.0):
    out = regulate(g_qua, g_sem, lam)
    print(f"lambda={lam:g}: angle after regulation {gradient_angle(out, g_sem):.2f} deg")
