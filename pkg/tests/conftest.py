import numpy as np
import pytest
import torch
import torch.nn as nn

from advdetect.classifiers import Classifier, SmallCNN


class Linear(nn.Module):
    """Flatten NCHW input and apply a fixed affine map."""

    def __init__(self, weight, bias=None):
        super().__init__()
        weight = torch.as_tensor(weight, dtype=torch.float64)
        self.fc = nn.Linear(weight.shape[1], weight.shape[0]).double()
        with torch.no_grad():
            self.fc.weight.copy_(weight)
            self.fc.bias.copy_(torch.zeros(weight.shape[0]) if bias is None else torch.as_tensor(bias))

    def forward(self, x):
        # NCHW -> NHWC flatten so feature order matches the numpy (n, h, w, c) layout
        return self.fc(x.permute(0, 2, 3, 1).flatten(1))


def linear_classifier(weight, bias=None, image_shape=None):
    weight = np.asarray(weight, dtype=np.float64)
    if image_shape is None:
        image_shape = (1, weight.shape[1], 1)
    return Classifier(Linear(weight, bias), "CUSTOM", weight.shape[0], image_shape)


@pytest.fixture
def small_cnn():
    torch.manual_seed(0)
    return Classifier(SmallCNN(3, 10, 16), "SMALL_CNN", 10, (16, 16, 3))


@pytest.fixture
def small_cnn64():
    torch.manual_seed(0)
    return Classifier(SmallCNN(3, 10, 16).double(), "SMALL_CNN", 10, (16, 16, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
