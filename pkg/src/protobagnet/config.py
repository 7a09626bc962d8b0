"""Experiment configuration: one YAML file, dotted-path overrides, preset expansion.

Layout (every key optional; missing keys take the defaults below)::

    preset: proto-bagnet          # or protopnet-baseline
    seed: 0
    output_dir: runs/default      # relative paths resolve under $PROTOBAGNET_OUTPUT
    threads: null
    deterministic: true
    model: {backbone: desk, m: 5, n_classes: 2, k: 5, eps: 1.0e-4, head: sa}
    loss: {clst: 0.8, sep: 0.08, l1c: 1.0e-4, l1s: 4.0e-2, diss: 5.0e-3}
    train: {warm_epochs: 5, joint_epochs: 40, ...}
    data: {source: synthetic, n_train: 2000, n_val: 200, n_test: 500, synth: {...}, manifest: null}

The snapshot written next to every output is the fully expanded form.
"""

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ._validation import ConfigError
from .data import SynthConfig
from .losses import LossWeights
from .trainer import TrainConfig

OUTPUT_ENV = "PROTOBAGNET_OUTPUT"

PRESETS = {
    "proto-bagnet": {"model": {"k": 5, "head": "sa"}, "loss": {"l1s": 4e-2, "diss": 5e-3}},
    "protopnet-baseline": {"model": {"k": 1, "head": "dense"}, "loss": {"l1s": 0.0, "diss": 0.0}},
}


@dataclass
class ModelConfig:
    backbone: object = "desk"  # preset name or list of layer dicts
    m: int = 5
    n_classes: int = 2
    k: int = 5
    eps: float = 1e-4
    head: str = "sa"
    dtype: str = "float32"


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "folder"
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    synth: dict = field(default_factory=dict)  # SynthConfig fields; seed comes from the experiment seed
    manifest: str | None = None  # folder source: manifest.csv with a split column
    root: str | None = None
    side: int | None = None


@dataclass
class ExperimentConfig:
    preset: str = "proto-bagnet"
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int | None = None
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)

    # --- construction ----------------------------------------------------

    @classmethod
    def from_dict(cls, raw):
        raw = copy.deepcopy(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        preset = raw.get("preset", cls.preset)
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        # preset values sit under explicit ones
        merged = _deep_merge(copy.deepcopy(PRESETS[preset]), raw)
        try:
            model = ModelConfig(**merged.pop("model", {}))
            data = DataConfig(**merged.pop("data", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(model=model, data=data, **merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()):
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(apply_overrides(raw, overrides))

    # --- typed views ---------------------------------------------------------

    def loss_weights(self):
        try:
            return LossWeights(**self.loss)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self):
        try:
            return TrainConfig(seed=self.seed, loss_weights=self.loss_weights(), deterministic=self.deterministic, **self.train)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def synth_config(self, split_offset=0):
        try:
            return SynthConfig(**{**self.data.synth, "seed": self.seed * 1000 + split_offset})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def estimator_params(self):
        m = self.model
        t = self.train_config()
        backbone = m.backbone if isinstance(m.backbone, str) else {"layers": list(m.backbone)}
        return dict(
            backbone=backbone,
            m=m.m,
            n_classes=m.n_classes,
            k=m.k,
            eps=m.eps,
            head=m.head,
            dtype=m.dtype,
            lambda_clst=t.loss_weights.clst,
            lambda_sep=t.loss_weights.sep,
            lambda_l1c=t.loss_weights.l1c,
            lambda_l1s=t.loss_weights.l1s,
            lambda_diss=t.loss_weights.diss,
            warm_epochs=t.warm_epochs,
            joint_epochs=t.joint_epochs,
            push_period=t.push_period,
            last_epochs=t.last_epochs,
            lr_backbone=t.lr_backbone,
            lr_prototypes=t.lr_prototypes,
            lr_head=t.lr_head,
            batch_size=t.batch_size,
            class_weighted=t.class_weighted,
            prototype_radius=t.prototype_radius,
            prototype_box=t.prototype_box,
            diss_pairs=t.diss_pairs,
            head_after_every_push=t.head_after_every_push,
            random_state=self.seed,
            deterministic=self.deterministic,
            n_threads=self.threads,
        )

    def validate(self):
        if self.model.head not in ("sa", "dense"):
            raise ConfigError(f"model.head must be 'sa' or 'dense', got {self.model.head!r}")
        if self.model.k < 1 or self.model.m < 1:
            raise ConfigError("model.k and model.m must be >= 1")
        if self.data.source not in ("synthetic", "folder"):
            raise ConfigError(f"data.source must be 'synthetic' or 'folder', got {self.data.source!r}")
        if self.data.source == "folder" and not self.data.root:
            raise ConfigError("data.root is required for a folder source")
        self.train_config()
        if self.data.source == "synthetic":
            self.synth_config().validate()
        return self

    # --- output ---------------------------------------------------------------

    def to_dict(self):
        """Fully expanded form (what the snapshot records)."""
        d = asdict(self)
        d["loss"] = self.loss_weights().to_dict()
        t = self.train_config().to_dict()
        for key in ("loss_weights", "seed", "deterministic"):
            t.pop(key)
        d["train"] = t
        d["data"]["synth"] = {k: v for k, v in self.synth_config().to_dict().items() if k != "seed"}
        for k, v in d["data"]["synth"].items():
            if isinstance(v, tuple):
                d["data"]["synth"][k] = list(v)
        return d

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    def resolve_output(self, override=None):
        out = Path(override or self.output_dir)
        if not out.is_absolute():
            out = Path(os.environ.get(OUTPUT_ENV, ".")) / out
        return out


def _deep_merge(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def apply_overrides(raw, overrides):
    """Apply ``a.b.c=value`` strings (values parsed as YAML scalars) to a raw dict."""
    raw = copy.deepcopy(raw or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {path}: {key} is not a section")
        node[keys[-1]] = yaml.safe_load(value)
    return raw
