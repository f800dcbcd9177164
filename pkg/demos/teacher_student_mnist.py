"""
Teacher to student on MNIST-bags
================================

A bag is positive when it holds a nine. The teacher only ever sees bag
labels. The student copies the teacher and is trained to match its softened
bag prediction and its per-instance predictions, which is what improves
instance labelling. Runs in a few minutes on one CPU.
"""

import numpy as np
import torch

from distill_mil import DistillConfig, TrainConfig, VatConfig, train_student, train_teacher
from distill_mil.data import MnistBagsSpec, generate_mnist_bags, load_digit_pool
from distill_mil.experiments import evaluate_model

torch.set_num_threads(1)
pool = load_digit_pool("mnist5k")
train_pool, test_pool = pool.split(0.2, seed=0)
train = generate_mnist_bags(MnistBagsSpec(100, 10, seed=0), train_pool)
test = generate_mnist_bags(MnistBagsSpec(200, 10, seed=1), test_pool, prefix="test")
cfg = TrainConfig("rmsprop", 1e-3, epochs=15, seed=0)

baseline, _ = train_teacher(train, VatConfig.baseline(), cfg)
teacher, th = train_teacher(train, VatConfig(delta=3.0), cfg)
student, sh = train_student(teacher, train, DistillConfig(), cfg)

for name, m in (("baseline", baseline), ("teacher", teacher), ("student", student)):
    for r in evaluate_model(m, test, name):
        print(f"{name:>8} {r.level:>8}  acc {r.accuracy:.3f}  F1 {r.f1:.3f}  AUROC {r.auroc:.3f}")

# per-term loss curves, the data behind a convergence plot
for key in ("total", "cls", "bag_kd", "inst_kd", "entropy"):
    print(key, np.round(sh.series(key), 4))
