"""
The three bag perturbations behind the teacher's regularizer
=============================================================

The teacher is asked to give the same answer for a bag and for three
altered copies: one with uniform-noise instances appended, one with every
instance jittered inside a small ball, and one with a fraction of instances
removed. An entropy term on the altered copies pushes predictions away
from 0.5.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from distill_mil import COLON_VAT, VatConfig, build_model, vat_loss
from distill_mil.data import MnistBagsSpec, generate_mnist_bags, load_digit_pool
from distill_mil.vat import perturb_bag

pool = load_digit_pool("mnist5k")
bag = generate_mnist_bags(MnistBagsSpec(1, 6, seed=4), pool)[0]
cfg = VatConfig(delta=3.0)
views = perturb_bag(bag, cfg, np.random.default_rng(0))

rows = [("original", bag), ("noise added", views.noisy), ("jittered", views.jittered)]
rows += [(f"dropped {i}", b) for i, b in enumerate(views.pruned)]
width = max(len(b) for _, b in rows)
fig, axes = plt.subplots(len(rows), width, figsize=(width, len(rows)))
for r, (name, b) in enumerate(rows):
    for c in range(width):
        ax = axes[r, c]
        ax.axis("off")
        if c < len(b):
            ax.imshow(b.instances[c, 0], cmap="gray", vmin=0, vmax=1)
    axes[r, 0].set_title(name, fontsize=7, loc="left")
fig.savefig("vat_perturbations.png", dpi=120)
print("sizes", {name: len(b) for name, b in rows})

# jitter size under each norm
print("l2 jitter norm", np.linalg.norm((views.jittered.instances - bag.instances).reshape(len(bag), -1), axis=1))

# the loss and its four terms for an untrained teacher
model = build_model("lenet5", seed=0)
res = vat_loss(model, bag, COLON_VAT, np.random.default_rng(1))
print({k: round(v, 4) for k, v in res.record().items()})
