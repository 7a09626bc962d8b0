"""scikit-learn compatible estimator wrapping the prototype network."""

import contextlib
import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, as_tensor, check_images, check_labels, torch_dtype
from .backbone import BackboneConfig, preset_config
from .checkpoint import Checkpoint
from .data import channel_stats, normalize
from .losses import LossWeights
from .model import ProtoBagNet
from .prototypes import Provenance
from .trainer import Trainer, TrainConfig, predict_logits, probabilities

logger = logging.getLogger(__name__)

PRESETS = {
    "proto-bagnet": dict(k=5, head="sa", lambda_l1s=4e-2, lambda_diss=5e-3),
    "protopnet-baseline": dict(k=1, head="dense", lambda_l1s=0.0, lambda_diss=0.0),
}


@contextlib.contextmanager
def numeric_mode(deterministic=True, n_threads=None):
    """Single-threaded, deterministic kernels for the duration of the block."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    try:
        if deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        elif n_threads:
            torch.set_num_threads(n_threads)
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


class ProtoBagNetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Prototype classifier over a small receptive-field backbone.

    ``X`` is an image stack ``(n, C, H, W)`` (or ``(n, H, W)`` for one channel).
    ``transform`` returns the ``b`` pooled prototype scores, ``predict_proba``
    the softmax over class logits. Images are normalised with the training-set
    per-channel mean and standard deviation captured in ``fit``.

    Parameters
    ----------
    backbone : str or BackboneConfig
        Preset name (``"desk"``, ``"bagnet33"``) or an explicit layer config.
    m : int
        Prototypes per class.
    k : int
        Number of top similarity cells averaged into each prototype score.
    head : {"sa", "dense"}
        Soft aggregation (cross-class weights fixed at zero) or a dense layer.
    lambda_* : float
        Loss weights; the dissimilarity term is subtracted.
    """

    def __init__(
        self,
        backbone="desk",
        m=5,
        n_classes=2,
        k=5,
        eps=1e-4,
        head="sa",
        lambda_clst=0.8,
        lambda_sep=0.08,
        lambda_l1c=1e-4,
        lambda_l1s=4e-2,
        lambda_diss=5e-3,
        warm_epochs=5,
        joint_epochs=40,
        push_period=10,
        last_epochs=10,
        lr_backbone=1e-4,
        lr_prototypes=3e-3,
        lr_head=1e-3,
        batch_size=64,
        class_weighted=False,
        prototype_radius=None,
        prototype_box=True,
        diss_pairs="all",
        head_after_every_push=True,
        dtype="float32",
        random_state=0,
        deterministic=True,
        n_threads=None,
    ):
        self.backbone = backbone
        self.m = m
        self.n_classes = n_classes
        self.k = k
        self.eps = eps
        self.head = head
        self.lambda_clst = lambda_clst
        self.lambda_sep = lambda_sep
        self.lambda_l1c = lambda_l1c
        self.lambda_l1s = lambda_l1s
        self.lambda_diss = lambda_diss
        self.warm_epochs = warm_epochs
        self.joint_epochs = joint_epochs
        self.push_period = push_period
        self.last_epochs = last_epochs
        self.lr_backbone = lr_backbone
        self.lr_prototypes = lr_prototypes
        self.lr_head = lr_head
        self.batch_size = batch_size
        self.class_weighted = class_weighted
        self.prototype_radius = prototype_radius
        self.prototype_box = prototype_box
        self.diss_pairs = diss_pairs
        self.head_after_every_push = head_after_every_push
        self.dtype = dtype
        self.random_state = random_state
        self.deterministic = deterministic
        self.n_threads = n_threads

    @classmethod
    def from_preset(cls, name, **overrides):
        try:
            params = dict(PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_train_config(cls, cfg: TrainConfig, **params):
        w = cfg.loss_weights
        return cls(
            lambda_clst=w.clst,
            lambda_sep=w.sep,
            lambda_l1c=w.l1c,
            lambda_l1s=w.l1s,
            lambda_diss=w.diss,
            warm_epochs=cfg.warm_epochs,
            joint_epochs=cfg.joint_epochs,
            push_period=cfg.push_period,
            last_epochs=cfg.last_epochs,
            lr_backbone=cfg.lr_backbone,
            lr_prototypes=cfg.lr_prototypes,
            lr_head=cfg.lr_head,
            batch_size=cfg.batch_size,
            class_weighted=cfg.class_weighted,
            prototype_radius=cfg.prototype_radius,
            prototype_box=cfg.prototype_box,
            diss_pairs=cfg.diss_pairs,
            head_after_every_push=cfg.head_after_every_push,
            random_state=cfg.seed,
            deterministic=cfg.deterministic,
            **params,
        )

    def train_config(self):
        return TrainConfig(
            warm_epochs=self.warm_epochs,
            joint_epochs=self.joint_epochs,
            push_period=self.push_period,
            last_epochs=self.last_epochs,
            lr_backbone=self.lr_backbone,
            lr_prototypes=self.lr_prototypes,
            lr_head=self.lr_head,
            batch_size=self.batch_size,
            seed=self.random_state,
            loss_weights=LossWeights(
                self.lambda_clst, self.lambda_sep, self.lambda_l1c, self.lambda_l1s, self.lambda_diss
            ),
            class_weighted=self.class_weighted,
            prototype_radius=self.prototype_radius,
            prototype_box=self.prototype_box,
            diss_pairs=self.diss_pairs,
            head_after_every_push=self.head_after_every_push,
            deterministic=self.deterministic,
        )

    def _backbone_config(self, channels, height, width):
        if isinstance(self.backbone, str):
            return preset_config(self.backbone, channels, height, width)
        if isinstance(self.backbone, dict):
            return BackboneConfig.from_dict({**self.backbone, "in_channels": channels, "height": height, "width": width})
        if isinstance(self.backbone, BackboneConfig):
            return self.backbone.with_input(height, width, channels)
        return BackboneConfig(tuple(self.backbone), channels, height, width)

    def _build(self, channels, height, width):
        self.torch_dtype_ = torch_dtype(self.dtype)
        cfg = self._backbone_config(channels, height, width).validate()
        self.model_ = ProtoBagNet(
            cfg, self.m, self.n_classes, self.k, self.eps, self.head, seed=self.random_state, dtype=self.torch_dtype_
        )
        self.geometry_ = self.model_.geometry
        self.classes_ = np.arange(self.n_classes)
        self.input_shape_ = (channels, height, width)

    # --- input handling -------------------------------------------------

    def prepare(self, X):
        """Validate and normalise raw images into a model-ready tensor."""
        check_is_fitted(self, "model_")
        X = check_images(X, *self.input_shape_)
        return as_tensor(normalize(X.astype(np.float64), self.mean_, self.std_), self.torch_dtype_)

    def to_image_space(self, Xn):
        Xn = Xn.detach().cpu().numpy() if isinstance(Xn, torch.Tensor) else np.asarray(Xn)
        shape = (1, -1, 1, 1)
        return Xn * self.std_.reshape(shape) + self.mean_.reshape(shape)

    # --- fitting ----------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None, sample_ids=None):
        X = check_images(X)
        y = check_labels(y, len(X), self.n_classes)
        self._build(*X.shape[1:])
        mean, std = channel_stats(X)
        if np.any(std <= 0):
            raise ConfigError("training images have zero variance in some channel")
        self.mean_, self.std_ = mean, std
        Xt = self.prepare(X)
        val = None
        if X_val is not None:
            val = (self.prepare(X_val), check_labels(y_val, len(X_val), self.n_classes))
        cfg = self.train_config()
        with numeric_mode(self.deterministic, self.n_threads):
            trainer = Trainer(self.model_, cfg).fit(Xt, y, val, sample_ids)
        self.history_ = trainer.history
        self.push_log_ = trainer.push_log
        return self

    def push(self, X, y, sample_ids=None):
        """Project prototypes onto their nearest same-class training patches."""
        from .prototypes import push_prototypes

        Xt = self.prepare(X)
        with numeric_mode(self.deterministic, self.n_threads):
            self.push_log_ = push_prototypes(
                self.model_.prototypes, self.model_.backbone, Xt, check_labels(y, len(Xt)), sample_ids, eps=self.eps
            )
        return self

    # --- inference ------------------------------------------------------------

    def _logits(self, Xt):
        return predict_logits(self.model_, Xt)

    def decision_function(self, X):
        return self._logits(self.prepare(X)).double().numpy()

    def predict_proba(self, X):
        return probabilities(self._logits(self.prepare(X)))

    def predict_proba_normalized(self, Xt):
        """Class probabilities for already normalised images (used by occlusion tests)."""
        return probabilities(self._logits(Xt))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    @torch.no_grad()
    def transform(self, X):
        """Pooled prototype scores ``(n, b)``."""
        Xt = self.prepare(X)
        self.model_.eval()
        return torch.cat([self.model_(Xt[i : i + 128]).scores for i in range(0, len(Xt), 128)]).double().numpy()

    @torch.no_grad()
    def similarity_maps(self, X, normalized=False):
        """Similarity maps ``(n, b, M, N)``."""
        Xt = X if normalized else self.prepare(X)
        self.model_.eval()
        return torch.cat([self.model_.similarity_maps(Xt[i : i + 128])[0] for i in range(0, len(Xt), 128)])

    @property
    def prototype_bank_(self):
        check_is_fitted(self, "model_")
        return self.model_.prototypes

    # --- persistence ----------------------------------------------------------

    def to_checkpoint(self):
        check_is_fitted(self, "model_")
        arrays = {name: t.detach().cpu().numpy() for name, t in self.model_.state_dict().items()}
        arrays["normalization/mean"] = np.asarray(self.mean_, dtype=np.float64)
        arrays["normalization/std"] = np.asarray(self.std_, dtype=np.float64)
        bank = self.model_.prototypes
        if bank.patches is not None:
            for j, patch in enumerate(bank.patches):
                arrays[f"prototype_patches/{j}"] = patch
        params = {k: v for k, v in self.get_params().items() if k != "backbone"}
        meta = {
            "params": params,
            "backbone": self.model_.backbone.cfg.to_dict(),
            "geometry": self.geometry_.to_dict(),
            "input_shape": list(self.input_shape_),
            "provenance": None if bank.provenance is None else [p.to_dict() for p in bank.provenance],
        }
        return Checkpoint(arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt):
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        meta = ckpt.meta
        est = cls(backbone=BackboneConfig.from_dict(meta["backbone"]), **meta["params"])
        est._build(*meta["input_shape"])
        state = {
            name: torch.from_numpy(arr.copy())
            for name, arr in ckpt.arrays.items()
            if not name.startswith(("normalization/", "prototype_patches/"))
        }
        est.model_.load_state_dict(state)
        est.model_.eval()
        est.mean_ = ckpt.arrays["normalization/mean"]
        est.std_ = ckpt.arrays["normalization/std"]
        bank = est.model_.prototypes
        if meta.get("provenance") is not None:
            bank.provenance = [Provenance.from_dict(d) for d in meta["provenance"]]
            bank.patches = [ckpt.arrays[f"prototype_patches/{j}"] for j in range(bank.n_prototypes)]
        est.history_ = []
        est.push_log_ = []
        return est

    def save(self, path):
        return self.to_checkpoint().save(path)

    @classmethod
    def load(cls, path):
        return cls.from_checkpoint(Checkpoint.load(path))


def as_estimator(obj):
    """Accept a fitted estimator, a :class:`Checkpoint` or a checkpoint path."""
    if isinstance(obj, ProtoBagNetClassifier):
        return obj
    return ProtoBagNetClassifier.from_checkpoint(obj)
