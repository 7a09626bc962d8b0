"""Local and global explanations.

Local explanations report, for every prototype, the ``k`` feature cells that
enter its pooled score together with their exact input boxes. The
percentile-box variant (tight box around the upper quantile of the upsampled
similarity map) is kept as a comparison baseline; it is not tied to what the
model actually pooled.
"""

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbone import Box, feature_to_input_box
from .estimator import as_estimator
from .prototypes import topk_indices

METHODS = ("rf-box", "percentile-box")

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExplanationReport",
    "type": "object",
    "required": ["sample_id", "method", "predicted_label", "probability", "k", "prototypes"],
    "properties": {
        "sample_id": {"type": "string"},
        "method": {"enum": list(METHODS)},
        "predicted_label": {"type": "integer", "minimum": 0},
        "probability": {"type": "number", "minimum": 0, "maximum": 1},
        "k": {"type": "integer", "minimum": 1},
        "prototypes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["prototype", "class", "pooled_score", "overlapping", "parts"],
                "properties": {
                    "prototype": {"type": "integer", "minimum": 0},
                    "class": {"type": "integer", "minimum": 0},
                    "pooled_score": {"type": "number"},
                    "overlapping": {"type": "boolean"},
                    "parts": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["box", "score"],
                            "properties": {
                                "cell": {"type": ["array", "null"], "items": {"type": "integer"}},
                                "box": {
                                    "type": "array",
                                    "items": {"type": "integer", "minimum": 0},
                                    "minItems": 4,
                                    "maxItems": 4,
                                },
                                "score": {"type": "number"},
                            },
                        },
                    },
                },
            },
        },
    },
}


@dataclass
class Part:
    cell: tuple | None
    box: Box
    score: float

    def to_dict(self):
        return {"cell": None if self.cell is None else list(self.cell), "box": self.box.as_list(), "score": self.score}


@dataclass
class PrototypeExplanation:
    prototype: int
    cls: int
    pooled_score: float
    parts: list = field(default_factory=list)

    @property
    def overlapping(self):
        boxes = [p.box for p in self.parts]
        return any(a.intersects(b) for i, a in enumerate(boxes) for b in boxes[i + 1 :])

    def to_dict(self):
        return {
            "prototype": self.prototype,
            "class": self.cls,
            "pooled_score": self.pooled_score,
            "overlapping": self.overlapping,
            "parts": [p.to_dict() for p in self.parts],
        }


@dataclass
class ExplanationReport:
    sample_id: str
    method: str
    predicted_label: int
    probability: float  # probability of the disease class (label 1)
    k: int
    prototypes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "method": self.method,
            "predicted_label": self.predicted_label,
            "probability": self.probability,
            "k": self.k,
            "prototypes": [p.to_dict() for p in self.prototypes],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def boxes(self, prototype=None):
        items = self.prototypes if prototype is None else [self.prototypes[prototype]]
        return [part.box for p in items for part in p.parts]


def topk_parts(sim_map, geometry, k):
    """The ``(cell, box, score)`` triples pooled from one ``(M, N)`` map."""
    sim_map = torch.as_tensor(sim_map)
    n_cols = sim_map.shape[-1]
    flat = sim_map.flatten()
    parts = []
    for pos in topk_indices(sim_map, k).tolist():
        cell = divmod(pos, n_cols)
        parts.append(Part(cell, feature_to_input_box(geometry, cell), float(flat[pos])))
    return parts


def upsample(sim_map, height, width):
    """Bilinear upsampling of an ``(M, N)`` map to the input resolution."""
    t = torch.as_tensor(sim_map, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0, 0].numpy()


def percentile_box_from_map(sim_map, height, width, q=0.95):
    """Tight box around the upsampled map's values at or above its ``q``-quantile."""
    up = upsample(sim_map, height, width)
    if np.ptp(up) == 0:
        warnings.warn("constant similarity map: percentile box covers the whole image", RuntimeWarning, stacklevel=2)
        return Box(0, 0, height, width)
    mask = up >= np.quantile(up, q)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def _single(est, image):
    x = np.asarray(image)
    if x.ndim == 2:
        x = x[None]
    return x[None]


def local_explanation(ckpt, image, k=None, sample_id="", method="rf-box", q=0.95):
    """Explain one image: per-prototype evidence boxes.

    With ``method="rf-box"`` the parts are exactly the cells averaged by the
    top-k pooling (same tie-breaking). ``"percentile-box"`` gives one box per
    prototype from the upper quantile of the upsampled similarity map.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    est = as_estimator(ckpt)
    k = est.model_.k if k is None else k
    x = _single(est, image)
    Xt = est.prepare(x)
    with torch.no_grad():
        est.model_.eval()
        sims = est.model_.similarity_maps(Xt)[0][0]
    proba = est.predict_proba_normalized(Xt)[0]
    geom = est.geometry_
    bank = est.model_.prototypes
    explanations = []
    for j in range(bank.n_prototypes):
        parts = topk_parts(sims[j], geom, k)
        pooled = float(np.mean([p.score for p in parts]))
        if method == "percentile-box":
            box = percentile_box_from_map(sims[j].numpy(), geom.input_height, geom.input_width, q)
            parts = [Part(None, box, float(sims[j].max()))]
        explanations.append(PrototypeExplanation(j, int(bank.class_of[j]), pooled, parts))
    label = int(np.argmax(proba))
    disease = float(proba[1]) if len(proba) > 1 else float(proba[0])
    return ExplanationReport(str(sample_id), method, label, disease, int(k), explanations)


def percentile_bbox(ckpt, image, prototype, q=0.95):
    est = as_estimator(ckpt)
    sims = est.similarity_maps(_single(est, image))[0, prototype].numpy()
    geom = est.geometry_
    return percentile_box_from_map(sims, geom.input_height, geom.input_width, q)


@dataclass
class PrototypePatch:
    prototype: int
    cls: int
    tile: np.ndarray  # (C, h, w) in image intensity units
    provenance: dict

    def to_dict(self):
        return {"prototype": self.prototype, "class": self.cls, "shape": list(self.tile.shape), **self.provenance}


def global_explanation(ckpt):
    """Image tiles the prototypes were projected onto, with their provenance."""
    est = as_estimator(ckpt)
    bank = est.model_.prototypes
    if bank.provenance is None or bank.patches is None:
        raise ValueError("prototypes have no provenance; run push (fit or .push) before a global explanation")
    out = []
    for j, (prov, patch) in enumerate(zip(bank.provenance, bank.patches)):
        tile = est.to_image_space(patch[None])[0]
        out.append(PrototypePatch(j, int(bank.class_of[j]), tile, prov.to_dict()))
    return out


# --- rendering ---------------------------------------------------------------

_JET = np.array(
    [[0.0, 0.0, 0.5], [0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0]]
)


def colormap(values):
    """Piecewise-linear jet colormap for values in ``[0, 1]``; returns ``(..., 3)`` floats."""
    v = np.clip(values, 0.0, 1.0) * (len(_JET) - 1)
    lo = np.floor(v).astype(int)
    hi = np.minimum(lo + 1, len(_JET) - 1)
    frac = (v - lo)[..., None]
    return _JET[lo] * (1 - frac) + _JET[hi] * frac


def grayscale(image):
    """Min-max scaled ``(H, W, 3)`` float rendering of a single-channel image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    lo, hi = img.min(), img.max()
    g = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return np.repeat(g[..., None], 3, axis=-1)


def render_overlay(image, sim_map=None, boxes=(), alpha=0.5, box_color=(1.0, 1.0, 0.0)):
    """RGB uint8 rendering of ``image`` with a heatmap and/or box outlines.

    The heatmap is bilinearly upsampled, scaled by its maximum and blended with
    per-pixel weight ``alpha * heat``, so a zero map leaves the image unchanged.
    """
    rgb = grayscale(image)
    h, w = rgb.shape[:2]
    if sim_map is not None:
        heat = upsample(np.asarray(sim_map), h, w)
        top = heat.max()
        heat = heat / top if top > 0 else np.zeros_like(heat)
        a = alpha * heat[..., None]
        rgb = (1 - a) * rgb + a * colormap(heat)
    out = np.round(rgb * 255).astype(np.uint8)
    color = np.round(np.asarray(box_color) * 255).astype(np.uint8)
    for box in boxes:
        r0, c0, r1, c1 = box.as_list() if isinstance(box, Box) else box
        out[r0, c0:c1] = color
        out[r1 - 1, c0:c1] = color
        out[r0:r1, c0] = color
        out[r0:r1, c1 - 1] = color
    return out


def save_png(rgb, path):
    Image.fromarray(rgb).save(path)
    return path
