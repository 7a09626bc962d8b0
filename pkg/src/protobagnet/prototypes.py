"""Prototype bank, distance/similarity maps, top-k pooling and prototype push."""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._validation import DataError, InputError
from .backbone import Box, feature_to_input_box

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-4


@dataclass
class Provenance:
    """Where a pushed prototype came from."""

    sample_id: str
    sample_index: int
    label: int
    cell: tuple
    box: Box
    distance: float
    similarity: float

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "sample_index": self.sample_index,
            "label": self.label,
            "cell": list(self.cell),
            "box": self.box.as_list(),
            "distance": self.distance,
            "similarity": self.similarity,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["sample_id"],
            d["sample_index"],
            d["label"],
            tuple(d["cell"]),
            Box(*d["box"]),
            d["distance"],
            d["similarity"],
        )


class PrototypeBank(nn.Module):
    """``b = m * c`` prototype vectors of depth ``D``, ``m`` per class.

    Prototypes have 1x1 spatial extent, so each is a single feature vector.
    ``provenance`` and ``patches`` are filled by :func:`push_prototypes`.
    """

    def __init__(self, vectors, class_of):
        super().__init__()
        class_of = torch.as_tensor(class_of, dtype=torch.long)
        counts = torch.bincount(class_of)
        if len(counts) < 2 or not torch.all(counts == counts[0]) or counts[0] < 1:
            raise InputError("every class needs the same positive number of prototypes (c >= 2)")
        self.vectors = nn.Parameter(torch.as_tensor(vectors))
        self.register_buffer("class_of", class_of)
        self.provenance = None
        self.patches = None

    @property
    def n_prototypes(self):
        return self.vectors.shape[0]

    @property
    def n_classes(self):
        return int(self.class_of.max()) + 1

    @property
    def per_class(self):
        return self.n_prototypes // self.n_classes

    @property
    def depth(self):
        return self.vectors.shape[1]

    def class_mask(self):
        """``(c, b)`` 0/1 matrix with a one where prototype ``j`` belongs to class ``i``."""
        return nn.functional.one_hot(self.class_of, self.n_classes).T.to(self.vectors.dtype)

    def prototypes_of(self, cls):
        return torch.nonzero(self.class_of == cls).flatten().tolist()


def init_prototypes(m, c, depth, seed=0, dtype=torch.float32):
    """Uniform ``[0, 1)`` initialisation, deterministic in ``seed``."""
    if m < 1 or c < 1 or depth < 1:
        raise InputError("m, c and D must all be >= 1")
    gen = torch.Generator().manual_seed(seed)
    vectors = torch.rand(m * c, depth, generator=gen, dtype=torch.float64).to(dtype)
    class_of = torch.arange(c).repeat_interleave(m)
    return PrototypeBank(vectors, class_of)


def squared_distance_maps(features, vectors):
    """``(B, D, M, N)`` features and ``(b, D)`` prototypes to ``(B, b, M, N)`` squared distances."""
    if isinstance(vectors, PrototypeBank):
        vectors = vectors.vectors
    if features.shape[1] != vectors.shape[1]:
        raise InputError(f"feature depth {features.shape[1]} != prototype depth {vectors.shape[1]}")
    z2 = (features**2).sum(dim=1, keepdim=True)
    p2 = (vectors**2).sum(dim=1).view(1, -1, 1, 1)
    zp = torch.einsum("bdmn,pd->bpmn", features, vectors)
    return torch.relu(z2 - 2 * zp + p2)


def similarity_from_distance(d, eps=DEFAULT_EPSILON):
    """``log((d + 1) / (d + eps))``: positive, decreasing, ``log(1/eps)`` at ``d = 0``."""
    if isinstance(d, torch.Tensor):
        return torch.log((d + 1) / (d + eps))
    return float(np.log((d + 1.0) / (d + eps)))


def topk_indices(maps, k):
    """Flat indices of the ``k`` largest entries of each map, ties in row-major order."""
    if maps.shape[-1] * maps.shape[-2] == 0:
        raise InputError("empty similarity map")
    flat = maps.flatten(-2)
    k = min(k, flat.shape[-1])
    order = torch.sort(flat, dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def topk_avg_pool(maps, k):
    """Mean of the ``k`` largest entries of each ``(..., M, N)`` map.

    ``k`` larger than ``M*N`` is clipped; ``k=1`` is exactly max pooling.
    """
    idx = topk_indices(maps, k)
    return maps.flatten(-2).gather(-1, idx).mean(dim=-1)


def _iter_batches(n, size):
    for start in range(0, n, size):
        yield start, min(start + size, n)


@torch.no_grad()
def push_prototypes(bank, backbone, images, labels, sample_ids=None, batch_size=64, eps=DEFAULT_EPSILON):
    """Replace every prototype with its nearest same-class training feature vector.

    Distances are measured with the pre-push vectors. Ties resolve to the first
    (image, row, col) in scan order. Returns the list of push log lines.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(n)]
    for cls in range(bank.n_classes):
        if not np.any(labels == cls):
            raise DataError(f"no training samples of class {cls} to push prototypes onto")

    geom = backbone.geometry
    old = bank.vectors.detach().clone()
    b = bank.n_prototypes
    best_d = torch.full((b,), float("inf"), dtype=torch.float64)
    best_loc = [None] * b
    best_vec = [None] * b
    class_of = bank.class_of
    was_training = backbone.training
    backbone.eval()
    try:
        for start, stop in _iter_batches(n, batch_size):
            x = images[start:stop]
            feats = backbone(x)
            dists = squared_distance_maps(feats, old)  # (B, b, M, N)
            ys = torch.as_tensor(labels[start:stop])
            for j in range(b):
                own = torch.nonzero(ys == class_of[j]).flatten()
                if len(own) == 0:
                    continue
                dj = dists[own, j]  # (B', M, N)
                flat = dj.flatten()
                pos = int(torch.argmin(flat))
                value = float(flat[pos])
                if value < best_d[j]:
                    i_local, rem = divmod(pos, dj.shape[1] * dj.shape[2])
                    h, w = divmod(rem, dj.shape[2])
                    i = start + int(own[i_local])
                    best_d[j] = value
                    best_loc[j] = (i, h, w)
                    best_vec[j] = feats[int(own[i_local]), :, h, w].clone()
    finally:
        backbone.train(was_training)

    provenance, patches, log = [], [], []
    for j in range(b):
        i, h, w = best_loc[j]
        bank.vectors.data[j] = best_vec[j].to(bank.vectors.dtype)
        box = feature_to_input_box(geom, (h, w))
        dist = float(best_d[j])
        prov = Provenance(str(sample_ids[i]), i, int(labels[i]), (h, w), box, dist, similarity_from_distance(dist, eps))
        provenance.append(prov)
        patches.append(images[i, :, box.row0 : box.row1, box.col0 : box.col1].detach().cpu().numpy().copy())

    seen = {}
    for j, prov in enumerate(provenance):
        key = (prov.sample_index, prov.cell)
        dup = f" DUPLICATE of prototype {seen[key]}" if key in seen else ""
        seen.setdefault(key, j)
        line = (
            f"prototype {j} (class {int(class_of[j])}): sample={prov.sample_id} cell={prov.cell} "
            f"box={prov.box.as_list()} distance={prov.distance:.6g}{dup}"
        )
        log.append(line)
        logger.info(line)
    bank.provenance = provenance
    bank.patches = patches
    return log


def has_duplicate_provenance(bank):
    if bank.provenance is None:
        return False
    keys = [(p.sample_index, p.cell) for p in bank.provenance]
    return len(set(keys)) != len(keys)


def min_pairwise_distance(vectors):
    v = vectors.detach().double()
    d = ((v[:, None] - v[None]) ** 2).sum(-1)
    d.fill_diagonal_(float("inf"))
    return float(d.min())
