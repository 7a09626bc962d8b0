"""Staged training (warm-up, joint, push, last layer) and classification metrics."""

import copy
import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from scipy.stats import rankdata

from ._validation import DataError, TrainingError
from .losses import DISS_PAIRS, TERMS, LossWeights, loss_terms, total_loss
from .prototypes import push_prototypes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    warm_epochs: int = 5
    joint_epochs: int = 40
    push_period: int = 10
    last_epochs: int = 10
    lr_backbone: float = 1e-4
    lr_prototypes: float = 3e-3
    lr_head: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    class_weighted: bool = False
    prototype_radius: float | None = None  # None -> 10 * sqrt(D)
    prototype_box: bool = True  # also clip prototypes to the backbone's output range
    diss_pairs: str = "all"  # or "within-class"
    head_after_every_push: bool = True  # last-layer cycle after each push, not only the final one
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        for name in ("warm_epochs", "joint_epochs", "last_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.push_period < 1:
            raise ValueError("push_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.diss_pairs not in DISS_PAIRS:
            raise ValueError(f"diss_pairs must be one of {DISS_PAIRS}, got {self.diss_pairs!r}")

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = self.loss_weights.to_dict()
        return d

    @property
    def total_epochs(self):
        return self.warm_epochs + self.joint_epochs + self.last_epochs


METRIC_COLUMNS = (
    ["epoch", "stage"]
    + list(TERMS)
    + ["total", "pushed", "val_accuracy", "val_auc", "val_recall", "val_precision"]
)


def roc_auc(labels, scores):
    """Mann-Whitney AUC; tied scores earn half credit. NaN (with a warning) for one class."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC is undefined for a single-class dataset", RuntimeWarning, stacklevel=2)
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(labels, proba):
    """Accuracy (argmax), AUC on the disease-class probability, recall and precision of class 1."""
    labels = np.asarray(labels)
    proba = np.asarray(proba)
    pred = proba.argmax(axis=1)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    return {
        "accuracy": float((pred == labels).mean()),
        "auc": roc_auc(labels, proba[:, 1]),
        "recall": tp / (tp + fn) if tp + fn else float("nan"),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
    }


@torch.no_grad()
def predict_logits(model, images, batch_size=128):
    was_training = model.training
    model.eval()
    try:
        out = [model(images[i : i + batch_size]).logits for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out)


def probabilities(logits):
    return torch.softmax(logits.double(), dim=1).numpy()


def evaluate_classification(model, images, labels, batch_size=128):
    if hasattr(model, "predict_proba"):
        proba = model.predict_proba(images)
    else:
        proba = probabilities(predict_logits(model, images, batch_size))
    return classification_metrics(labels, proba)


def _clamp_prototypes(model, radius, box=None):
    with torch.no_grad():
        v = model.prototypes.vectors
        norms = v.norm(dim=1, keepdim=True)
        scale = torch.clamp(radius / norms.clamp_min(1e-12), max=1.0)
        v.mul_(scale)
        if box is not None and box != (None, None):
            v.clamp_(min=box[0], max=box[1])


def _set_trainable(model, groups):
    for name, params in model.parameter_groups().items():
        for p in params:
            p.requires_grad_(name in groups)


def _optimizer(model, cfg, groups):
    lrs = {"backbone": cfg.lr_backbone, "prototypes": cfg.lr_prototypes, "head": cfg.lr_head}
    params = model.parameter_groups()
    return torch.optim.Adam([{"params": params[g], "lr": lrs[g]} for g in groups])


STAGE_GROUPS = {
    "warm": ("prototypes",),
    "joint": ("backbone", "prototypes"),
    "last": ("head",),
}


class Trainer:
    """Runs the staged schedule on an already-built :class:`ProtoBagNet`.

    ``images`` are normalised tensors. The best post-push state by validation
    AUC is restored at the end; without a validation set the final state is kept.
    """

    def __init__(self, model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.history = []
        self.push_log = []
        self._gen = torch.Generator().manual_seed(cfg.seed)

    def _batches(self, labels):
        n = len(labels)
        if self.cfg.class_weighted:
            counts = np.bincount(labels, minlength=2).astype(np.float64)
            w = torch.as_tensor(1.0 / counts[labels])
            order = torch.multinomial(w, n, replacement=True, generator=self._gen)
        else:
            order = torch.randperm(n, generator=self._gen)
        for start in range(0, n, self.cfg.batch_size):
            yield order[start : start + self.cfg.batch_size]

    def _epoch(self, stage, optimizer, images, labels):
        model, cfg = self.model, self.cfg
        weights = cfg.loss_weights
        if stage == "last":
            # only the head trains: terms that do not involve it are kept for logging only
            weights = replace(weights, clst=0.0, sep=0.0, l1s=0.0, diss=0.0)
        radius = cfg.prototype_radius or 10.0 * math.sqrt(model.prototypes.depth)
        box = model.backbone.output_range if cfg.prototype_box else None
        model.train()
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        seen = 0
        y_all = torch.as_tensor(labels)
        for idx in self._batches(labels):
            x, y = images[idx], y_all[idx]
            out = model(x)
            parts = loss_terms(out, y, model, self.cfg.diss_pairs)
            loss = total_loss(parts, weights)
            if not torch.isfinite(loss):
                dump = ", ".join(f"{k}={float(v.detach()):.6g}" for k, v in parts.items())
                raise TrainingError(f"non-finite loss in stage {stage!r}: {dump}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if stage != "last":
                _clamp_prototypes(model, radius, box)
            for key, val in parts.items():
                sums[key] += float(val.detach()) * len(idx)
            sums["total"] += float(loss.detach()) * len(idx)
            seen += len(idx)
        return {k: v / seen for k, v in sums.items()}

    def _push(self, images, labels, sample_ids):
        log = push_prototypes(
            self.model.prototypes, self.model.backbone, images, labels, sample_ids, eps=self.model.eps
        )
        self.push_log.extend(log)

    def _validate(self, val):
        if val is None:
            return {}
        metrics = classification_metrics(val[1], probabilities(predict_logits(self.model, val[0])))
        return {f"val_{k}": v for k, v in metrics.items()}

    def fit(self, images, labels, val=None, sample_ids=None):
        cfg, model = self.cfg, self.model
        labels = np.asarray(labels)
        for cls in range(model.prototypes.n_classes):
            if not np.any(labels == cls):
                raise DataError(f"training data has no samples of class {cls}")
        if cfg.total_epochs == 0:
            return self

        best = None
        epoch = 0

        def record(stage, terms, pushed):
            nonlocal best
            row = {"epoch": epoch, "stage": stage, **terms, "pushed": int(pushed), **self._validate(val)}
            self.history.append(row)
            logger.info("epoch %d %s loss=%.4f %s", epoch, stage, terms.get("total", float("nan")),
                        {k: row[k] for k in row if k.startswith("val_")})
            # candidates are post-push states, after their last-layer cycle when there is one;
            # val AUC decides, accuracy breaks AUC ties, then the later state wins
            if (stage == "last") if cfg.last_epochs > 0 else pushed:
                key = (_finite(row.get("val_auc")), _finite(row.get("val_accuracy")))
                if best is None or val is None or key >= best[0]:
                    best = (key, copy.deepcopy(model.state_dict()), model.prototypes.provenance, model.prototypes.patches)

        _set_trainable(model, STAGE_GROUPS["warm"])
        opt = _optimizer(model, cfg, STAGE_GROUPS["warm"])
        for _ in range(cfg.warm_epochs):
            epoch += 1
            record("warm", self._epoch("warm", opt, images, labels), False)

        def last_layer_cycle():
            nonlocal epoch
            _set_trainable(model, STAGE_GROUPS["last"])
            opt_last = _optimizer(model, cfg, STAGE_GROUPS["last"])
            for _ in range(cfg.last_epochs):
                epoch += 1
                record("last", self._epoch("last", opt_last, images, labels), False)
            _set_trainable(model, STAGE_GROUPS["joint"])

        _set_trainable(model, STAGE_GROUPS["joint"])
        opt = _optimizer(model, cfg, STAGE_GROUPS["joint"])
        pushed_last = False
        for j in range(cfg.joint_epochs):
            epoch += 1
            terms = self._epoch("joint", opt, images, labels)
            pushed_last = (j + 1) % cfg.push_period == 0
            if pushed_last:
                self._push(images, labels, sample_ids)
            record("joint", terms, pushed_last)
            if pushed_last and cfg.head_after_every_push and j + 1 < cfg.joint_epochs:
                last_layer_cycle()
        if not pushed_last:
            self._push(images, labels, sample_ids)
            record("push", {}, True)
        last_layer_cycle()

        _set_trainable(model, ("backbone", "prototypes", "head"))
        if best is not None:
            model.load_state_dict(best[1])
            model.prototypes.provenance, model.prototypes.patches = best[2], best[3]
        model.eval()
        return self


def _finite(value):
    return -math.inf if value is None or math.isnan(value) else value


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: _fmt(row.get(k, "")) for k in METRIC_COLUMNS})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def train(cfg: TrainConfig, train_set, val_set=None, **estimator_params):
    """Fit a classifier on ``(images, labels)`` tuples or sample lists.

    Returns the checkpoint and the per-epoch metrics log.
    """
    from .estimator import ProtoBagNetClassifier
    from .data import stack

    def unpack(ds):
        if ds is None:
            return None, None, None
        if isinstance(ds, (list, tuple)) and ds and hasattr(ds[0], "image"):
            X, y = stack(ds)
            return X, y, [s.sample_id for s in ds]
        return ds[0], ds[1], None

    X, y, ids = unpack(train_set)
    Xv, yv, _ = unpack(val_set)
    est = ProtoBagNetClassifier.from_train_config(cfg, **estimator_params)
    est.fit(X, y, X_val=Xv, y_val=yv, sample_ids=ids)
    return est.to_checkpoint(), est.history_
