"""
Four white-box attacks on a small CNN
=====================================

Trains a plain SmallCNN on synthetic CIFAR-shaped data for a few
epochs, then runs FGSM, PGD, JSMA and CW against it on a handful of test
images and looks at how large the perturbations are under each norm.
Runs in about two minutes on one CPU core.
"""

import numpy as np

from advdetect.attacks import generate_attack_set
from advdetect.classifiers import TrainConfig, accuracy, train_classifier
from advdetect.data import make_synthetic
from advdetect.types import AttackConfig

data = make_synthetic(n_train=2000, n_test=200, seed=0)
model = train_classifier(data, TrainConfig(epochs=8, batch_size=64, learning_rate=0.02, augmentation=False, seed=0))
x, y = data.x_test[:40], data.y_test[:40]
print(f"clean accuracy on the 40 images: {accuracy(model, x, y):.3f}")

# %%
# Defaults: eps 8/255 for FGSM and PGD, JSMA with theta 1.0 and gamma 0.1,
# CW with confidence 0. FGSM/PGD are untargeted, JSMA and CW aim at the
# next class, (y + 1) mod 10. Fewer CW iterations here to keep it quick.
configs = [
    AttackConfig("FGSM"),
    AttackConfig("PGD", steps=10),
    AttackConfig("JSMA"),
    AttackConfig("CW", cw_iters=50, cw_binary_steps=3),
]

print(f"{'attack':6} {'success':>8} {'acc':>6} {'Linf*255':>9} {'L2':>7} {'L0':>6}")
for cfg in configs:
    batch = generate_attack_set(model, x, y, cfg, seed=0)
    d = (batch.adv - x).reshape(len(x), -1)
    print(
        f"{cfg.family.value:6} {batch.success_mask.mean():8.2f} {accuracy(model, batch.adv, y):6.2f} "
        f"{np.abs(d).max() * 255:9.2f} {np.linalg.norm(d, axis=1).mean():7.3f} "
        f"{np.count_nonzero(d, axis=1).mean():6.0f}"
    )

# %%
# FGSM and PGD spend the whole Linf budget on almost every pixel, JSMA
# touches few pixels but moves each one all the way to 1, and CW finds the
# smallest L2 change that flips the decision.
