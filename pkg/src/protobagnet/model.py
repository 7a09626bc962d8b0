"""The assembled network: backbone, prototype layer, pooling and head."""

from typing import NamedTuple

import torch
from torch import nn

from .backbone import BackboneConfig, build_backbone
from .classifier import make_head
from .prototypes import DEFAULT_EPSILON, init_prototypes, similarity_from_distance, squared_distance_maps, topk_avg_pool


class ModelOutput(NamedTuple):
    logits: torch.Tensor  # (B, c)
    scores: torch.Tensor  # (B, b) pooled similarities
    similarities: torch.Tensor  # (B, b, M, N)
    distances: torch.Tensor  # (B, b, M, N)
    features: torch.Tensor  # (B, D, M, N)


class ProtoBagNet(nn.Module):
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        m=5,
        n_classes=2,
        k=5,
        eps=DEFAULT_EPSILON,
        head="sa",
        seed=0,
        dtype=torch.float32,
    ):
        super().__init__()
        self.k = k
        self.eps = eps
        self.head_kind = head
        self.backbone = build_backbone(backbone_cfg, seed).to(dtype)
        self.prototypes = init_prototypes(m, n_classes, backbone_cfg.depth, seed=seed + 1, dtype=dtype)
        self.head = make_head(head, self.prototypes)

    @property
    def geometry(self):
        return self.backbone.geometry

    def similarity_maps(self, x):
        feats = self.backbone(x)
        dists = squared_distance_maps(feats, self.prototypes.vectors)
        return similarity_from_distance(dists, self.eps), dists, feats

    def forward(self, x):
        sims, dists, feats = self.similarity_maps(x)
        scores = topk_avg_pool(sims, self.k)
        return ModelOutput(self.head(scores), scores, sims, dists, feats)

    def parameter_groups(self):
        return {
            "backbone": list(self.backbone.parameters()),
            "prototypes": [self.prototypes.vectors],
            "head": list(self.head.parameters()),
        }
