"""Small receptive-field convolutional feature extractor.

Every feature cell sees a fixed ``r x r`` input window, and the mapping from
cells to input boxes is exact. Valid (unpadded) convolutions are the default
so the boxes of interior cells never need clipping.
"""

from dataclasses import asdict, dataclass

import torch
from torch import nn

from ._validation import ConfigError, InputError

NONLINEARITIES = {"relu": nn.ReLU, "sigmoid": nn.Sigmoid, None: None, "none": None}
# range of each activation's output; None means unbounded on that side
OUTPUT_RANGE = {"relu": (0.0, None), "sigmoid": (0.0, 1.0), None: (None, None), "none": (None, None)}


@dataclass(frozen=True)
class LayerSpec:
    kernel: int = 3
    stride: int = 1
    out_channels: int = 32
    padding: int = 0
    nonlinearity: str | None = "relu"
    norm: bool = False

    def validate(self):
        if self.kernel not in (1, 3):
            raise ConfigError(f"kernel size must be 1 or 3, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass(frozen=True)
class BackboneConfig:
    layers: tuple = ()
    in_channels: int = 1
    height: int = 128
    width: int = 128

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self):
        return self.layers[-1].out_channels

    def validate(self):
        if not self.layers:
            raise ConfigError("backbone needs at least one layer")
        if self.in_channels < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("input channels and sides must be positive")
        for spec in self.layers:
            spec.validate()
        geom = geometry_from_config(self)
        if geom.feature_height < 1 or geom.feature_width < 1:
            raise ConfigError(
                f"input {self.height}x{self.width} is too small for receptive field {geom.receptive_field}"
            )
        return self

    def with_input(self, height, width, in_channels=None):
        return BackboneConfig(
            self.layers,
            self.in_channels if in_channels is None else in_channels,
            height,
            width,
        )

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "in_channels": self.in_channels,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), d["in_channels"], d["height"], d["width"])


@dataclass(frozen=True)
class Box:
    """Half-open pixel box ``[row0, row1) x [col0, col1)``."""

    row0: int
    col0: int
    row1: int
    col1: int

    @property
    def height(self):
        return self.row1 - self.row0

    @property
    def width(self):
        return self.col1 - self.col0

    def as_list(self):
        return [self.row0, self.col0, self.row1, self.col1]

    def contains(self, row, col):
        return self.row0 <= row < self.row1 and self.col0 <= col < self.col1

    def intersects(self, other):
        return (
            self.row0 < other.row1 and other.row0 < self.row1 and self.col0 < other.col1 and other.col0 < self.col1
        )


@dataclass(frozen=True)
class RFGeometry:
    receptive_field: int
    total_stride: int
    total_padding: int
    feature_height: int
    feature_width: int
    input_height: int
    input_width: int

    def to_dict(self):
        return asdict(self)


def _conv_out(size, spec):
    return (size + 2 * spec.padding - spec.kernel) // spec.stride + 1


def geometry_from_config(cfg):
    """Closed-form receptive field, jump and offset of the last layer."""
    r, jump, pad = 1, 1, 0
    h, w = cfg.height, cfg.width
    for spec in cfg.layers:
        r += (spec.kernel - 1) * jump
        pad += spec.padding * jump
        jump *= spec.stride
        h, w = _conv_out(h, spec), _conv_out(w, spec)
    return RFGeometry(r, jump, pad, h, w, cfg.height, cfg.width)


# Presets. "desk" gives r=11, s=4; "bagnet33" reproduces the r=33, s=8 geometry.
# Both end in a ReLU: a sigmoid output saturates to 0/1 codes and push then
# snaps several prototypes onto the same patch.
PRESETS = {
    "desk": (
        LayerSpec(3, 1, 8),
        LayerSpec(3, 1, 16),
        LayerSpec(3, 2, 32),
        LayerSpec(3, 2, 64),
        LayerSpec(1, 1, 64),
    ),
    "bagnet33": (
        LayerSpec(3, 1, 32),
        LayerSpec(3, 2, 64),
        LayerSpec(3, 2, 64),
        LayerSpec(3, 2, 128),
        LayerSpec(3, 1, 128),
        LayerSpec(1, 1, 128),
    ),
    "identity": (LayerSpec(1, 1, 1, nonlinearity=None),),
}


def preset_config(name, in_channels=1, height=128, width=128):
    try:
        layers = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None
    return BackboneConfig(layers, in_channels, height, width)


class Backbone(nn.Module):
    """Stack of 1x1/3x3 convolutions with optional normalisation."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.geometry = geometry_from_config(cfg)
        layers = []
        channels = cfg.in_channels
        for spec in cfg.layers:
            conv = nn.Conv2d(channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
            layers.append(conv)
            if spec.norm:
                layers.append(nn.BatchNorm2d(spec.out_channels))
            act = NONLINEARITIES[spec.nonlinearity]
            if act is not None:
                layers.append(act())
            channels = spec.out_channels
        self.body = nn.Sequential(*layers)

    @property
    def depth(self):
        return self.cfg.depth

    @property
    def output_range(self):
        """(low, high) bounds of the feature values; ``None`` where unbounded."""
        return OUTPUT_RANGE[self.cfg.layers[-1].nonlinearity]

    def forward(self, x):
        c, h, w = self.cfg.in_channels, self.cfg.height, self.cfg.width
        if x.ndim != 4 or x.shape[1] != c:
            raise InputError(f"expected (B, {c}, H, W) input, got {tuple(x.shape)}")
        return self.body(x)

    def forward_checked(self, x):
        """Forward pass that also enforces the configured input size."""
        if tuple(x.shape[1:]) != (self.cfg.in_channels, self.cfg.height, self.cfg.width):
            raise InputError(
                f"expected images {self.cfg.in_channels}x{self.cfg.height}x{self.cfg.width}, got {tuple(x.shape[1:])}"
            )
        return self.forward(x)

    def freeze_normalization(self):
        """Reset every normalisation layer to the identity map and keep it in eval mode."""
        for mod in self.body:
            if isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()
        self._norm_frozen = True
        return self.train(self.training)

    def train(self, mode=True):
        super().train(mode)
        if getattr(self, "_norm_frozen", False):
            for mod in self.body:
                if isinstance(mod, nn.BatchNorm2d):
                    mod.eval()
        return self


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    """Deterministically initialised backbone for ``cfg``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed & 0xFFFF_FFFF_FFFF_FFFF)
        return Backbone(cfg)


def forward_features(backbone, images):
    return backbone.forward_checked(images)


def receptive_field_geometry(backbone) -> RFGeometry:
    return backbone.geometry if isinstance(backbone, Backbone) else geometry_from_config(backbone)


def feature_to_input_box(geom: RFGeometry, cell) -> Box:
    """Input box seen by feature cell ``(h, w)``, clipped to the image."""
    h, w = cell
    if not (0 <= h < geom.feature_height and 0 <= w < geom.feature_width):
        raise IndexError(f"cell {cell} outside feature map {geom.feature_height}x{geom.feature_width}")
    s, p, r = geom.total_stride, geom.total_padding, geom.receptive_field
    r0, c0 = h * s - p, w * s - p
    return Box(
        max(r0, 0),
        max(c0, 0),
        min(r0 + r, geom.input_height),
        min(c0 + r, geom.input_width),
    )
