"""Multi-modal head: superpose the two branch features and classify."""

import torch
from torch import nn

from .errors import InvalidConfigError, InvalidInputError
from .losses import softmax


def superpose(x1, x2, average=False):
    """Elementwise sum of the two feature vectors (mean when average=True).

    The two options differ only by a fixed 1/2 scale that the affine head
    absorbs; sum is the default.
    """
    x1 = torch.as_tensor(x1)
    x2 = torch.as_tensor(x2)
    if x1.shape != x2.shape:
        raise InvalidInputError(
            "feature shapes differ: %r vs %r" % (tuple(x1.shape), tuple(x2.shape))
        )
    fused = x1 + x2
    if average:
        fused = fused * 0.5
    return fused


class FusionHead(nn.Module):
    """Affine map from the fused feature to K logits."""

    def __init__(self, feature_dim, n_classes):
        super().__init__()
        self.affine = nn.Linear(feature_dim, n_classes)

    def forward(self, x3):
        return self.affine(x3)


def fusion_classify(x3, head: FusionHead):
    """Return (logits, probabilities) of the fused feature under the head."""
    x3 = torch.as_tensor(x3)
    if x3.shape[-1] != head.affine.in_features:
        raise InvalidConfigError(
            "fused feature width %d does not match head width %d"
            % (x3.shape[-1], head.affine.in_features)
        )
    logits = head(x3)
    return logits, softmax(logits)
