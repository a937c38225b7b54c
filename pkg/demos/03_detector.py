"""
Detecting adversarial examples from two sets of logits
======================================================

A plain model and a robust model (same architecture, trained on key-shuffled
images) agree on clean inputs. Perturbations crafted against the plain model
transfer badly to the robust one, so on adversarial inputs the two disagree.
A small binary classifier over the concatenated logits picks that up.

Takes a few minutes on one CPU core.
"""

import numpy as np

from advdetect.attacks import generate_attack_set
from advdetect.classifiers import TrainConfig, accuracy, train_classifier
from advdetect.data import make_detector_split, make_synthetic
from advdetect.detector import extract_features, labelled_features, train_detector
from advdetect.metrics import evaluate_features
from advdetect.types import AttackConfig, PermutationKey

data = make_synthetic(n_train=3000, n_test=500, seed=1)
plain = train_classifier(data, TrainConfig(epochs=8, batch_size=64, learning_rate=0.02, augmentation=False, seed=0))
robust = train_classifier(data, TrainConfig(epochs=8, batch_size=64, learning_rate=0.02, augmentation=False, seed=1), PermutationKey(7, 4))
print(f"clean accuracy  plain {accuracy(plain, *data.test):.3f}  robust {accuracy(robust, *data.test):.3f}")

# %%
# Attack the plain model only; the robust model just sees the result.
split = make_detector_split(data.test, n_train=400, n_test=100, seed=0)
x = np.concatenate([split.det_train_clean, split.det_test_clean])
y = np.concatenate([split.det_train_labels, split.det_test_labels])
adv = generate_attack_set(plain, x, y, AttackConfig("PGD"), seed=0).adv
print(f"under PGD       plain {accuracy(plain, adv, y):.3f}  robust {accuracy(robust, adv, y):.3f}")

# %%
# Features are raw logits, plain first: 2 x 10 numbers per image.
f = extract_features(plain, robust, x[:3])
print("feature shape:", f.shape)
print("clean row, plain half :", np.round(f[0, :10], 2))
print("clean row, robust half:", np.round(f[0, 10:], 2))

# %%
# Fit on 400 clean + 400 adversarial, test on the held-out 100 + 100.
n = len(split.det_train_clean)
for kind in ("LOGISTIC", "MLP"):
    feats, labels = labelled_features(plain, robust, split.det_train_clean, adv[:n])
    det = train_detector(feats, labels, kind, seed=0)
    res = evaluate_features(det, extract_features(plain, robust, split.det_test_clean), extract_features(plain, robust, adv[n:]))
    print(f"{kind:8} AUC {res.auc:.3f}  Acc {res.acc:.3f}  {res.cm}")

# %%
# A linear model over the logits can only weigh each class score; it cannot
# directly express "the two argmaxes differ". One hidden layer can, which is
# why the MLP usually comes out ahead.
