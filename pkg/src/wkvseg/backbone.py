"""Three-stage conv/RWKV backbone producing a stride 4/8/16 feature pyramid."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import MBConv, VRWKVBlock
from .core import Conv2d, Module, Tensor, ops
from .errors import ConfigurationError, ContractError

STRIDES = (4, 8, 16)

VARIANTS = {
    "T": ((2, 4, 14), (32, 64, 192)),
    "S": ((2, 4, 14), (64, 128, 384)),
    "B": ((2, 4, 14), (128, 256, 768)),
}

# published backbone sizes, used as targets by the `params` command
REFERENCE_PARAMS = {"T": 5.0e6, "S": 19.7e6, "B": 78.7e6}


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[int, int, int]
    channels: tuple[int, int, int]
    variant: str = "custom"
    strides: tuple[int, int, int] = field(default=STRIDES)
    qshift_variant: str = "additive"

    def __post_init__(self):
        if len(self.blocks) != 3 or len(self.channels) != 3:
            raise ConfigurationError("backbone needs exactly three stages")
        if tuple(self.strides) != STRIDES:
            raise ConfigurationError(f"stage strides must be {STRIDES}, got {self.strides}")
        if any(b < 0 for b in self.blocks) or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"bad stage settings {self.blocks} / {self.channels}")
        if self.channels[0] % 2:
            raise ConfigurationError("stage-1 width must be even (stem halves it)")
        if self.channels[2] % 4:
            raise ConfigurationError("stage-3 width must be divisible by 4 for Q-Shift")

    @classmethod
    def from_variant(cls, name: str, **kw) -> "BackboneConfig":
        if name not in VARIANTS:
            raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        blocks, channels = VARIANTS[name]
        return cls(blocks, channels, variant=name, **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> tuple["BackboneConfig", int]:
        """Parse ``{variant, seed}`` or ``{blocks, channels, seed}``."""
        seed = int(doc.get("seed", 0))
        if "variant" in doc and doc["variant"] in VARIANTS:
            return cls.from_variant(doc["variant"]), seed
        try:
            return cls(tuple(doc["blocks"]), tuple(doc["channels"]),
                       variant=doc.get("variant", "custom")), seed
        except KeyError as exc:
            raise ConfigurationError(f"backbone config missing {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> tuple["BackboneConfig", int]:
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "blocks": list(self.blocks),
                "channels": list(self.channels), "qshift_variant": self.qshift_variant}


@dataclass
class FeaturePyramid:
    x_hr: Tensor  # stride 4
    x_mr: Tensor  # stride 8
    x: Tensor  # stride 16


class Backbone(Module):
    """Stem to stride 4, MBConv stages 1-2, VRWKV stage 3.

    A stride-2 MBConv (no residual) precedes stages 2 and 3.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        n1, n2, n3 = cfg.blocks
        self.stem1 = Conv2d(rng, 3, c1 // 2, kernel=3, stride=2)
        self.stem2 = Conv2d(rng, c1 // 2, c1, kernel=3, stride=2)
        self.stage1 = [MBConv(rng, c1) for _ in range(n1)]
        self.down2 = MBConv(rng, c1, c2, stride=2)
        self.stage2 = [MBConv(rng, c2) for _ in range(n2)]
        self.down3 = MBConv(rng, c2, c3, stride=2)
        self.stage3 = [VRWKVBlock(rng, c3, cfg.qshift_variant) for _ in range(n3)]

    def forward(self, image) -> FeaturePyramid:
        return backbone_forward(self, image)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    return Backbone(cfg, np.random.default_rng(seed))


def backbone_forward(model: Backbone, image) -> FeaturePyramid:
    image = ops.lift(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h % 16 or w % 16 or h == 0 or w == 0:
        raise ContractError(f"image size {h}x{w} must be divisible by 16 (pad first)")
    x = model.stem2(ops.gelu(model.stem1(image)))
    for blk in model.stage1:
        x = blk(x)
    x_hr = x
    x = model.down2(x)
    for blk in model.stage2:
        x = blk(x)
    x_mr = x
    x = model.down3(x)
    for blk in model.stage3:
        x = blk(x)
    return FeaturePyramid(x_hr, x_mr, x)


def param_count(model: Module) -> int:
    return model.num_parameters()


def pad_to_multiple(image: np.ndarray, multiple: int = 16) -> np.ndarray:
    """Zero-pad the bottom/right of an (H, W, C) image up to ``multiple``."""
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)))
