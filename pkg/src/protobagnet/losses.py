"""Training objective: cross-entropy plus cluster, separation, two L1 terms and dissimilarity."""

import logging
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    clst: float = 0.8
    sep: float = 0.08
    l1c: float = 1e-4
    l1s: float = 4e-2
    diss: float = 5e-3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value >= 0 and value < float("inf")):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")

    def to_dict(self):
        return asdict(self)


PROTO_BAGNET = LossWeights(l1s=4e-2, diss=5e-3)
PROTOPNET = LossWeights(l1s=0.0, diss=0.0)

TERMS = ("ce", "clst", "sep", "l1c", "l1s", "diss")


def cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` (log-sum-exp stabilised)."""
    if logits.ndim == 1:
        logits, labels = logits[None], torch.as_tensor([labels])
    return F.cross_entropy(logits, torch.as_tensor(labels, device=logits.device))


def _min_distances(distance_maps):
    return distance_maps.flatten(2).min(dim=-1).values  # (B, b)


def cluster_loss(distance_maps, labels, class_of):
    """Mean over samples of the smallest distance to any patch from an own-class prototype."""
    mins = _min_distances(distance_maps)
    own = class_of[None, :] == torch.as_tensor(labels)[:, None]
    masked = torch.where(own, mins, torch.full_like(mins, float("inf")))
    return masked.min(dim=1).values.mean()


def separation_loss(distance_maps, labels, class_of):
    """Negated mean smallest distance to an other-class prototype."""
    labels = torch.as_tensor(labels)
    mins = _min_distances(distance_maps)
    other = class_of[None, :] != labels[:, None]
    if not torch.any(other):
        logger.warning("separation loss on a bank with a single class is defined as 0")
        return mins.sum() * 0
    masked = torch.where(other, mins, torch.full_like(mins, float("inf")))
    return -masked.min(dim=1).values.mean()


def l1_classifier(head):
    return head.l1()


def l1_similarity(similarity_maps):
    """Mean over maps of each map's mean absolute activation."""
    return similarity_maps.abs().flatten(-2).mean(dim=-1).mean()


def dissimilarity_penalty(vectors, class_of=None):
    """Sum of squared distances over unordered prototype pairs.

    With ``class_of`` only same-class pairs count.
    """
    if vectors.shape[0] < 2:
        return vectors.sum() * 0
    diff = vectors[:, None, :] - vectors[None, :, :]
    sq = (diff**2).sum(-1)
    if class_of is not None:
        class_of = torch.as_tensor(class_of)
        sq = sq * (class_of[:, None] == class_of[None, :]).to(sq.dtype)
    return sq.sum() / 2


def total_loss(parts, weights: LossWeights):
    """Combine term values; the dissimilarity term is subtracted."""
    return (
        parts["ce"]
        + weights.clst * parts["clst"]
        + weights.sep * parts["sep"]
        + weights.l1c * parts["l1c"]
        + weights.l1s * parts["l1s"]
        - weights.diss * parts["diss"]
    )


DISS_PAIRS = ("all", "within-class")


def loss_terms(output, labels, model, diss_pairs="all"):
    """All six term values for one forward pass of :class:`~protobagnet.model.ProtoBagNet`."""
    class_of = model.prototypes.class_of
    return {
        "ce": cross_entropy(output.logits, labels),
        "clst": cluster_loss(output.distances, labels, class_of),
        "sep": separation_loss(output.distances, labels, class_of),
        "l1c": l1_classifier(model.head),
        "l1s": l1_similarity(output.similarities),
        "diss": dissimilarity_penalty(model.prototypes.vectors, class_of if diss_pairs == "within-class" else None),
    }
