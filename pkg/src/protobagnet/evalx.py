"""Interpretability evaluation: localisation precision, occlusion faithfulness, prototype importance."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import feature_to_input_box
from .estimator import as_estimator
from .prototypes import topk_indices
from .trainer import roc_auc

DISEASE = 1


def _mean_sd(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"mean": float("nan"), "sd": float("nan"), "n": 0}
    return {"mean": float(values.mean()), "sd": float(values.std()), "n": int(values.size)}


def topk_boxes(est, Xt, k):
    """Per sample, per prototype: list of the ``k`` pooled input boxes (score order)."""
    sims = est.similarity_maps(Xt, normalized=True)
    idx = topk_indices(sims, k).numpy()  # (n, b, k)
    n_cols = sims.shape[-1]
    geom = est.geometry_
    return [
        [[feature_to_input_box(geom, divmod(int(p), n_cols)) for p in per_proto] for per_proto in per_sample]
        for per_sample in idx
    ]


def box_mask(boxes, height, width):
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        mask[b.row0 : b.row1, b.col0 : b.col1] = True
    return mask


def _is_hit(box, markers, mask, mode):
    if mode == "marker":
        return any(box.contains(r, c) for r, c in markers)
    if mode == "mask":
        return bool(mask[box.row0 : box.row1, box.col0 : box.col1].any())
    raise ValueError(f"hit mode must be 'marker' or 'mask', got {mode!r}")


def localization_precision(ckpt, images, labels, masks=None, markers=None, k=None, hit="marker"):
    """Fraction of disease-prototype parts that contain an annotated lesion.

    Evaluated on diseased images only. A part hits when its box contains a
    lesion marker (``hit="marker"``) or overlaps the lesion mask
    (``hit="mask"``). Returns mean and SD over (image, prototype) pairs for
    every ``k' = 1..k``.
    """
    est = as_estimator(ckpt)
    k = est.model_.k if k is None else k
    labels = np.asarray(labels)
    if markers is None and masks is None:
        raise ValueError("localisation precision needs lesion markers or masks")
    if hit == "marker" and markers is None:
        raise ValueError("hit='marker' needs lesion markers")
    if hit == "mask" and masks is None:
        raise ValueError("hit='mask' needs lesion masks")
    chosen = np.flatnonzero(labels == DISEASE)
    if len(chosen) == 0:
        raise ValueError("no diseased images to evaluate")
    Xt = est.prepare(np.asarray(images)[chosen])
    boxes = topk_boxes(est, Xt, k)
    protos = est.model_.prototypes.prototypes_of(DISEASE)
    hits = []
    for row, i in enumerate(chosen):
        mk = markers[i] if markers is not None else ()
        ms = masks[i] if masks is not None else None
        for j in protos:
            hits.append([_is_hit(b, mk, ms, hit) for b in boxes[row][j]])
    hits = np.asarray(hits, dtype=np.float64)
    kk = hits.shape[1]
    per_k = {kp: _mean_sd(hits[:, :kp].mean(axis=1)) for kp in range(1, kk + 1)}
    return {"k": kk, "hit": hit, "per_k": per_k, "precision": per_k[kk]["mean"], "hits": hits.tolist()}


@dataclass
class FaithfulnessResult:
    labels: np.ndarray
    proba_original: np.ndarray  # disease-class probability
    proba_occluded: np.ndarray
    auc_original: float
    auc_occluded: float
    fill: object  # float, or "original" for the no-op control
    k: int
    keep_fraction: np.ndarray = field(default=None)

    @property
    def deltas(self):
        return self.proba_occluded - self.proba_original

    def per_class(self):
        out = {}
        for cls in np.unique(self.labels):
            sel = self.labels == cls
            out[int(cls)] = {
                "original": _mean_sd(self.proba_original[sel]),
                "occluded": _mean_sd(self.proba_occluded[sel]),
                "shift": float(self.proba_occluded[sel].mean() - self.proba_original[sel].mean()),
            }
        return out

    def to_dict(self):
        return {
            "k": self.k,
            "fill": self.fill,
            "n": int(len(self.labels)),
            "auc_original": self.auc_original,
            "auc_occluded": self.auc_occluded,
            "per_class": {str(c): v for c, v in self.per_class().items()},
            "mean_keep_fraction": float(np.mean(self.keep_fraction)) if self.keep_fraction is not None else None,
            "deltas": self.deltas.tolist(),
        }

    def table(self):
        rows = []
        for cls, stats in self.per_class().items():
            rows.append(
                {
                    "class": cls,
                    "n": stats["original"]["n"],
                    "prob_original_mean": stats["original"]["mean"],
                    "prob_original_sd": stats["original"]["sd"],
                    "prob_occluded_mean": stats["occluded"]["mean"],
                    "prob_occluded_sd": stats["occluded"]["sd"],
                    "auc_original": self.auc_original,
                    "auc_occluded": self.auc_occluded,
                }
            )
        return rows


def occlude(Xt, keep, fill):
    """Replace every pixel outside ``keep`` (``(n, H, W)`` bool) with ``fill``.

    ``fill`` is a scalar or a tensor broadcastable to ``Xt`` (normalised units).
    """
    keep_t = torch.as_tensor(keep)[:, None].expand_as(Xt)
    if isinstance(fill, (int, float)):
        fill = torch.full_like(Xt, fill)
    return torch.where(keep_t, Xt, torch.as_tensor(fill, dtype=Xt.dtype).expand_as(Xt))


def _fill_value(fill, Xt):
    """Scalar fills pass through; ``"original"`` keeps every pixel (a no-op control)."""
    if isinstance(fill, str):
        if fill != "original":
            raise ValueError(f"fill must be a number or 'original', got {fill!r}")
        return Xt
    return float(fill)


def _union_keep(boxes, height, width, protos=None):
    keep = np.zeros((len(boxes), height, width), dtype=bool)
    for i, per_sample in enumerate(boxes):
        for j, proto_boxes in enumerate(per_sample):
            if protos is None or j in protos:
                for b in proto_boxes:
                    keep[i, b.row0 : b.row1, b.col0 : b.col1] = True
    return keep


def occlusion_faithfulness(ckpt, images, labels, k=None, fill=0.0):
    """Keep only the union of all prototypes' top-k boxes and re-classify.

    ``fill`` is in normalised units, so the default 0 is the training-set mean;
    ``"original"`` is the no-op control.
    """
    est = as_estimator(ckpt)
    k = est.model_.k if k is None else k
    labels = np.asarray(labels)
    Xt = est.prepare(images)
    geom = est.geometry_
    boxes = topk_boxes(est, Xt, k)
    keep = _union_keep(boxes, geom.input_height, geom.input_width)
    Xo = occlude(Xt, keep, _fill_value(fill, Xt))
    p0 = est.predict_proba_normalized(Xt)[:, DISEASE]
    p1 = est.predict_proba_normalized(Xo)[:, DISEASE]
    return FaithfulnessResult(
        labels, p0, p1, roc_auc(labels, p0), roc_auc(labels, p1), fill, int(k), keep.mean(axis=(1, 2))
    )


def prototype_importance(ckpt, images, labels, prototype, k=None, fill=0.0):
    """Change in disease probability when a prototype's top-k parts are also masked.

    The baseline is the top-k-only occluded image; the chosen prototype's
    boxes are then filled as well. Deltas are reported per true class.
    """
    return prototype_importance_all(ckpt, images, labels, k, fill, prototypes=[prototype])[prototype]


def prototype_importance_all(ckpt, images, labels, k=None, fill=0.0, prototypes=None):
    est = as_estimator(ckpt)
    k = est.model_.k if k is None else k
    labels = np.asarray(labels)
    Xt = est.prepare(images)
    geom = est.geometry_
    H, W = geom.input_height, geom.input_width
    boxes = topk_boxes(est, Xt, k)
    keep = _union_keep(boxes, H, W)
    fill = _fill_value(fill, Xt)
    Xo = occlude(Xt, keep, fill)
    base = est.predict_proba_normalized(Xo)[:, DISEASE]
    if prototypes is None:
        prototypes = range(est.model_.prototypes.n_prototypes)
    out = {}
    for j in prototypes:
        removed = np.stack([~box_mask(per_sample[j], H, W) for per_sample in boxes])
        Xr = occlude(Xo, removed, fill)
        delta = est.predict_proba_normalized(Xr)[:, DISEASE] - base
        by_class = {int(c): _mean_sd(delta[labels == c]) for c in np.unique(labels)}
        for c in by_class:
            sel = delta[labels == c]
            by_class[c]["median_abs"] = float(np.median(np.abs(sel)))
            by_class[c]["frac_positive"] = float((sel > 0).mean())
            by_class[c]["frac_negative"] = float((sel < 0).mean())
        out[j] = {
            "prototype": int(j),
            "class": int(est.model_.prototypes.class_of[j]),
            "by_class": by_class,
            "deltas": delta,
        }
    return out


def importance_sign_rates(importance, labels):
    """Pooled sign agreement over (sample, prototype) pairs.

    Disease prototypes on diseased images should lower the disease probability
    when removed; healthy prototypes on healthy images should raise it.
    """
    labels = np.asarray(labels)
    disease, healthy = [], []
    for res in importance.values():
        d = res["deltas"]
        if res["class"] == DISEASE:
            disease.extend(d[labels == DISEASE] < 0)
        else:
            healthy.extend(d[labels != DISEASE] > 0)
    return {
        "disease_on_diseased_lowered": float(np.mean(disease)) if disease else float("nan"),
        "healthy_on_healthy_raised": float(np.mean(healthy)) if healthy else float("nan"),
    }


def bootstrap_ci(labels, scores, metric=roc_auc, n_boot=1000, alpha=0.05, seed=0):
    """Percentile bootstrap interval for ``metric(labels, scores)``."""
    labels, scores = np.asarray(labels), np.asarray(scores)
    rng = np.random.default_rng(seed)
    stats = []
    for _ in range(n_boot):
        idx = rng.integers(0, len(labels), len(labels))
        if len(np.unique(labels[idx])) < 2:
            continue
        stats.append(metric(labels[idx], scores[idx]))
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    return float(metric(labels, scores)), float(lo), float(hi)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(result, path):
    data = result.to_dict() if hasattr(result, "to_dict") else result
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
    return path


def write_csv(rows, path):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path
