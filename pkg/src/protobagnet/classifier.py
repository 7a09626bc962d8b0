"""Classification heads mapping pooled prototype scores to class logits."""

import torch
from torch import nn

from ._validation import InputError


class SoftAggregation(nn.Module):
    """One weight per prototype; cross-class weights are structurally zero.

    ``logit_i = sum_{j: class_of(j) = i} w_j * score_j``.
    """

    def __init__(self, class_of, n_classes=None, dtype=torch.float32):
        super().__init__()
        class_of = torch.as_tensor(class_of, dtype=torch.long)
        self.n_classes = n_classes or int(class_of.max()) + 1
        self.register_buffer("class_of", class_of)
        self.weight = nn.Parameter(torch.ones(len(class_of), dtype=dtype))

    def effective_weight(self):
        """``(c, b)`` weight matrix with zeros off the class blocks."""
        mask = nn.functional.one_hot(self.class_of, self.n_classes).T.to(self.weight.dtype)
        return mask * self.weight

    def forward(self, scores):
        if scores.shape[-1] != len(self.class_of):
            raise InputError(f"expected {len(self.class_of)} scores, got {scores.shape[-1]}")
        return scores @ self.effective_weight().T

    def l1(self):
        return self.weight.abs().sum()


class DenseHead(nn.Module):
    """Fully connected ``c x b`` head (the ProtoPNet layout)."""

    def __init__(self, class_of, n_classes=None, cross_class=-0.5, dtype=torch.float32):
        super().__init__()
        class_of = torch.as_tensor(class_of, dtype=torch.long)
        self.n_classes = n_classes or int(class_of.max()) + 1
        self.register_buffer("class_of", class_of)
        mask = nn.functional.one_hot(class_of, self.n_classes).T.to(dtype)
        self.weight = nn.Parameter((mask + cross_class * (1 - mask)).contiguous())

    def effective_weight(self):
        return self.weight

    def forward(self, scores):
        if scores.shape[-1] != self.weight.shape[1]:
            raise InputError(f"expected {self.weight.shape[1]} scores, got {scores.shape[-1]}")
        return scores @ self.weight.T

    def l1(self):
        return self.weight.abs().sum()


def init_sa_weights(bank):
    return SoftAggregation(bank.class_of, bank.n_classes, dtype=bank.vectors.dtype)


def sa_forward(scores, head):
    return head(scores)


def make_head(kind, bank):
    if kind == "sa":
        return init_sa_weights(bank)
    if kind == "dense":
        return DenseHead(bank.class_of, bank.n_classes, dtype=bank.vectors.dtype)
    raise InputError(f"unknown head {kind!r}; expected 'sa' or 'dense'")
