"""Promptable mask head: prompt encoder, two-way decoder, multi-scale
conv refinement and per-query dot-product mask logits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, FeaturePyramid, backbone_forward
from .core import Conv2d, LayerNorm, Linear, Module, Parameter, Tensor, ops, trunc_normal
from .errors import ConfigurationError, DimensionError, ValidationError

LABELS = {"bg": 0, "fg": 1}
BOX_TL, BOX_BR = 2, 3


# ------------------------------------------------------------------ prompts


@dataclass
class Prompt:
    """A box ``(x0, y0, x1, y1)`` or labelled points, in [0, 1] image coords."""

    kind: str
    box: tuple[float, float, float, float] | None = None
    points: list[tuple[float, float, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind == "box":
            if self.box is None or len(self.box) != 4:
                raise ValidationError("box prompt needs four coordinates")
            x0, y0, x1, y1 = (float(c) for c in self.box)
            if not all(0.0 <= c <= 1.0 for c in (x0, y0, x1, y1)):
                raise ValidationError(f"box {self.box} outside [0, 1]")
            if x0 > x1 or y0 > y1:
                raise ValidationError(f"box corners out of order: {self.box}")
            self.box = (x0, y0, x1, y1)
        elif self.kind == "point":
            if not self.points:
                raise ValidationError("point prompt needs at least one point")
            checked = []
            for x, y, label in self.points:
                if label not in LABELS:
                    raise ValidationError(f"point label must be 'fg' or 'bg', got {label!r}")
                if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                    raise ValidationError(f"point ({x}, {y}) outside [0, 1]")
                checked.append((float(x), float(y), label))
            self.points = checked
        else:
            raise ValidationError(f"prompt kind must be 'box' or 'point', got {self.kind!r}")

    @classmethod
    def from_box(cls, x0, y0, x1, y1) -> "Prompt":
        return cls("box", box=(x0, y0, x1, y1))

    @classmethod
    def from_points(cls, points) -> "Prompt":
        return cls("point", points=list(points))

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "box": list(self.box)}
        return {"kind": "point", "points": [list(p) for p in self.points]}


def sincos_encoding(coords: np.ndarray, dim: int, max_freq: float = 64.0) -> np.ndarray:
    """Fixed sine/cosine features of (x, y) pairs in [0, 1].

    The lowest frequency spans half a period over [0, 1], so the map is
    injective; higher ones are geometric up to ``max_freq`` half-periods.
    """
    if dim % 4:
        raise ConfigurationError(f"positional encoding width must be divisible by 4, got {dim}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n_freq = dim // 4
    freqs = math.pi * max_freq ** (np.arange(n_freq) / max(n_freq - 1, 1))
    ax = coords[:, :1] * freqs
    ay = coords[:, 1:] * freqs
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=1)


def grid_encoding(h: int, w: int, dim: int) -> np.ndarray:
    """Encoding of cell centres of an h x w grid, raster order, shape (h*w, dim)."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return sincos_encoding(np.stack([xs.ravel(), ys.ravel()], axis=1), dim)


class PromptEncoder(Module):
    def __init__(self, rng, dim: int):
        self.dim = dim
        # rows: background point, foreground point, box top-left, box bottom-right
        self.type_embed = Parameter(trunc_normal(rng, (4, dim), 1.0), "type_embed")

    def forward(self, prompt: Prompt) -> Tensor:
        return prompt_encode(prompt, self)


def prompt_encode(prompt: Prompt, enc: PromptEncoder) -> Tensor:
    if prompt.kind == "box":
        x0, y0, x1, y1 = prompt.box
        coords = [(x0, y0), (x1, y1)]
        kinds = [BOX_TL, BOX_BR]
    else:
        coords = [(x, y) for x, y, _ in prompt.points]
        kinds = [LABELS[label] for _, _, label in prompt.points]
    pe = sincos_encoding(np.array(coords), enc.dim).astype(enc.type_embed.dtype)
    return ops.add(pe, ops.getitem(enc.type_embed, np.array(kinds)))


# ------------------------------------------------------------------ decoder


class Attention(Module):
    def __init__(self, rng, dim: int, heads: int = 4):
        if dim % heads:
            raise ConfigurationError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim, zero=True)

    def forward(self, q_in, k_in, v_in) -> Tensor:
        n, dim = q_in.shape
        m = k_in.shape[0]
        hd = dim // self.heads

        def split(t, length):
            return ops.transpose(ops.reshape(t, (length, self.heads, hd)), (1, 0, 2))

        q = split(self.q(q_in), n)
        k = split(self.k(k_in), m)
        v = split(self.v(v_in), m)
        logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
        mixed = ops.matmul(ops.softmax(logits, axis=-1), v)
        return self.out(ops.reshape(ops.transpose(mixed, (1, 0, 2)), (n, dim)))


class MLP(Module):
    def __init__(self, rng, dim: int, hidden: int, zero_out: bool = True):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim, zero=zero_out)

    def forward(self, x) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TwoWayLayer(Module):
    """Token self-attention, token-to-image attention, token MLP, then
    image-to-token attention; every branch is a pre-norm residual."""

    def __init__(self, rng, dim: int, heads: int = 4):
        self.norm_self = LayerNorm(dim)
        self.self_attn = Attention(rng, dim, heads)
        self.norm_t2i = LayerNorm(dim)
        self.norm_img = LayerNorm(dim)
        self.t2i = Attention(rng, dim, heads)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = MLP(rng, dim, 2 * dim)
        self.norm_i2t_tok = LayerNorm(dim)
        self.norm_i2t_img = LayerNorm(dim)
        self.i2t = Attention(rng, dim, heads)

    def forward(self, tokens, token_pe, image, image_pe):
        t = self.norm_self(tokens)
        q = ops.add(t, token_pe)
        tokens = ops.add(tokens, self.self_attn(q, q, t))

        t = self.norm_t2i(tokens)
        img = self.norm_img(image)
        tokens = ops.add(tokens, self.t2i(ops.add(t, token_pe), ops.add(img, image_pe), img))

        tokens = ops.add(tokens, self.mlp(self.norm_mlp(tokens)))

        t = self.norm_i2t_tok(tokens)
        img = self.norm_i2t_img(image)
        image = ops.add(image, self.i2t(ops.add(img, image_pe), ops.add(t, token_pe), t))
        return tokens, image


class MaskDecoder(Module):
    def __init__(self, rng, dim: int, heads: int = 4, depth: int = 2):
        self.dim = dim
        self.mask_token = Parameter(trunc_normal(rng, (1, dim), 1.0), "mask_token")
        self.layers = [TwoWayLayer(rng, dim, heads) for _ in range(depth)]

    def forward(self, prompt_emb, x):
        return mask_decode(prompt_emb, x, self)


def mask_decode(prompt_emb, x, dec: MaskDecoder) -> tuple[Tensor, Tensor]:
    """Returns (F_M, Q): updated stride-16 features and the mask query."""
    x = ops.lift(x)
    prompt_emb = ops.lift(prompt_emb, x)
    h, w, c = x.shape
    if c != dec.dim or prompt_emb.shape[-1] != dec.dim:
        raise DimensionError(f"decoder width {dec.dim}, got image {c}, prompt {prompt_emb.shape}")
    tokens = ops.concat([dec.mask_token, prompt_emb], axis=0)
    token_pe = tokens
    image = ops.reshape(x, (h * w, c))
    image_pe = grid_encoding(h, w, c).astype(x.dtype)
    for layer in dec.layers:
        tokens, image = layer(tokens, token_pe, image, image_pe)
    return ops.reshape(image, (h, w, c)), ops.getitem(tokens, slice(0, 1))


# ------------------------------------------------------------------ refinement


class Branch(Module):
    """Two convs aligning one pyramid level to ``c_mask`` channels."""

    def __init__(self, rng, c_in: int, c_mask: int):
        self.align = Conv2d(rng, c_in, c_mask, kernel=1)
        self.mix = Conv2d(rng, c_mask, c_mask, kernel=3)

    def forward(self, x, size) -> Tensor:
        y = self.mix(ops.gelu(self.align(x)))
        return ops.resize_bilinear(y, size)


class RefineFuse(Module):
    """Per-level branches resampled to stride 4, concatenated, then two
    fusion convs producing the refined mask features."""

    def __init__(self, rng, channels: tuple[int, int, int], c_mask: int = 32):
        c1, c2, c3 = channels
        self.c_mask = c_mask
        self.branch_fm = Branch(rng, c3, c_mask)
        self.branch_x = Branch(rng, c3, c_mask)
        self.branch_mr = Branch(rng, c2, c_mask)
        self.branch_hr = Branch(rng, c1, c_mask)
        self.fuse1 = Conv2d(rng, 4 * c_mask, c_mask, kernel=3)
        self.fuse2 = Conv2d(rng, c_mask, c_mask, kernel=3)

    def context(self, x, x_mr, x_hr) -> list[Tensor]:
        """Prompt-independent branches, reusable across prompts."""
        size = x_hr.shape[:2]
        return [self.branch_x(x, size), self.branch_mr(x_mr, size), self.branch_hr(x_hr, size)]

    def forward(self, f_m, x, x_mr, x_hr) -> Tensor:
        return refine_fuse(f_m, x, x_mr, x_hr, self)

    def fuse(self, f_m, context: list[Tensor]) -> Tensor:
        size = context[0].shape[:2]
        fused = ops.concat([self.branch_fm(f_m, size), *context], axis=-1)
        return self.fuse2(ops.gelu(self.fuse1(fused)))


def refine_fuse(f_m, x, x_mr, x_hr, refine: RefineFuse) -> Tensor:
    x_hr = ops.lift(x_hr)
    if x.shape[:2] != f_m.shape[:2] or x_mr.shape[0] * 2 != x_hr.shape[0] \
            or x.shape[0] * 4 != x_hr.shape[0]:
        raise DimensionError(
            f"inconsistent pyramid: F_M {f_m.shape}, X {x.shape}, X_mr {x_mr.shape}, X_hr {x_hr.shape}")
    return refine.fuse(f_m, refine.context(x, x_mr, x_hr))


def predict_masks(q, f_refined, out_size: tuple[int, int]) -> Tensor:
    """Per-query channel dot products at stride 4, upsampled to ``out_size``.

    ``q`` is (nq, C_mask), ``f_refined`` (h, w, C_mask); returns (nq, H, W).
    """
    q, f_refined = ops.lift(q), ops.lift(f_refined)
    h, w, c = f_refined.shape
    if q.shape[-1] != c:
        raise DimensionError(f"query width {q.shape[-1]} != mask feature width {c}")
    nq = q.shape[0]
    logits = ops.matmul(ops.reshape(f_refined, (h * w, c)), ops.transpose(q))
    logits = ops.resize_bilinear(ops.reshape(logits, (h, w, nq)), tuple(out_size))
    return ops.transpose(logits, (2, 0, 1))


# ------------------------------------------------------------------ head + model


@dataclass
class MaskOutput:
    q: Tensor  # (1, C3) mask query from the decoder
    f_m: Tensor  # (H/16, W/16, C3)
    f_refined: Tensor  # (H/4, W/4, C_mask)
    logits: Tensor  # (1, H, W)


class SamHead(Module):
    def __init__(self, rng, channels: tuple[int, int, int], c_mask: int = 32, heads: int = 4):
        c3 = channels[2]
        self.prompt_encoder = PromptEncoder(rng, c3)
        self.decoder = MaskDecoder(rng, c3, heads)
        self.refine = RefineFuse(rng, channels, c_mask)
        self.query_proj = MLP(rng, c3, c3, zero_out=False)
        self.query_out = Linear(rng, c3, c_mask, std=1.0 / math.sqrt(c3))

    def context(self, pyr: FeaturePyramid) -> list[Tensor]:
        return self.refine.context(pyr.x, pyr.x_mr, pyr.x_hr)

    def forward(self, pyr: FeaturePyramid, prompt: Prompt, out_size, context=None) -> MaskOutput:
        if context is None:
            context = self.context(pyr)
        f_m, q = mask_decode(prompt_encode(prompt, self.prompt_encoder), pyr.x, self.decoder)
        f_refined = self.refine.fuse(f_m, context)
        q_mask = self.query_out(ops.gelu(self.query_proj(q)))
        return MaskOutput(q, f_m, f_refined, predict_masks(q_mask, f_refined, out_size))


class SegmentationModel(Module):
    """Backbone plus promptable head."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, c_mask: int = 32, heads: int = 4):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = seed
        self.c_mask = c_mask
        self.heads = heads
        self.backbone = Backbone(cfg, rng)
        self.head = SamHead(rng, cfg.channels, c_mask, heads)

    def encode(self, image) -> FeaturePyramid:
        return backbone_forward(self.backbone, image)

    def predict(self, image, prompts: list[Prompt]) -> list[MaskOutput]:
        image = ops.lift(image)
        pyr = self.encode(image)
        ctx = self.head.context(pyr)
        size = image.shape[:2]
        return [self.head(pyr, p, size, ctx) for p in prompts]

    def meta(self) -> dict:
        return {"backbone": self.cfg.to_dict(), "seed": self.seed,
                "c_mask": self.c_mask, "heads": self.heads}

    @classmethod
    def from_meta(cls, meta: dict) -> "SegmentationModel":
        b = meta["backbone"]
        cfg = BackboneConfig(tuple(b["blocks"]), tuple(b["channels"]), variant=b["variant"],
                             qshift_variant=b.get("qshift_variant", "additive"))
        return cls(cfg, meta.get("seed", 0), meta.get("c_mask", 32), meta.get("heads", 4))


# ------------------------------------------------------------------ serialisation


def mask_to_rle(mask: np.ndarray) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(np.shape(mask)), "counts": counts}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for n in rle["counts"]:
        flat[pos:pos + n] = val
        pos += n
        val = not val
    return flat.reshape(h, w)


def stability_score(logits: np.ndarray, offset: float = 1.0) -> float:
    """IoU between the masks thresholded at +offset and -offset."""
    hi = logits > offset
    lo = logits > -offset
    union = lo.sum()
    return 1.0 if union == 0 else float(hi.sum() / union)


def mask_record(image_id, prompt: Prompt, logits: np.ndarray) -> dict:
    logits = np.asarray(logits)
    return {"image_id": image_id, "prompt": prompt.to_dict(),
            "rle": mask_to_rle(logits > 0), "iou_estimate": stability_score(logits)}


__all__ = [
    "Attention", "Branch", "MaskDecoder", "MaskOutput", "Prompt", "PromptEncoder",
    "RefineFuse", "SamHead", "SegmentationModel", "TwoWayLayer", "grid_encoding",
    "mask_decode", "mask_record", "mask_to_rle", "predict_masks", "prompt_encode",
    "refine_fuse", "rle_to_mask", "sincos_encoding", "stability_score",
]
