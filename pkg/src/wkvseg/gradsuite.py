"""Named finite-difference checks of every differentiable component.

Each case runs at 64-bit on small shapes. Modules get randomised
parameters first, so zero-initialised projections do not hide gradients
flowing to earlier layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Module, Tape, Tensor, check_parameter_grads, finite_diff_grad, ops, rel_error
from .core.gradcheck import GradReport

DTYPE = np.float64
DEFAULT_STEP = 3e-4
TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    suite: str
    run: Callable[[float], list[GradReport]]


def randomize(module: Module, rng, scale: float = 0.3) -> Module:
    """Replace every parameter with fresh noise (Q-Shift mu kept inside (0, 1))."""
    module.astype(DTYPE)
    for name, p in module.named_parameters():
        if name.endswith("mu"):
            p.assign(rng.uniform(0.15, 0.85, p.shape))
        elif name.endswith("decay"):
            p.assign(rng.uniform(-1.0, 1.0, p.shape))
        else:
            p.assign(scale * rng.standard_normal(p.shape))
    return module


def check_function(name: str, fn: Callable, inputs: list[np.ndarray], h: float,
                   module: Module | None = None, max_elems: int = 16, seed: int = 0) -> list[GradReport]:
    """Compare tape and finite-difference gradients of ``sum(fn(*inputs) * R)``.

    Every input is checked fully; module parameters on a random subset.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=DTYPE) for x in inputs]
    weight = rng.standard_normal(np.shape(fn(*[Tensor(x) for x in inputs]).data))

    def loss_of(*xs):
        return ops.sum(ops.mul(fn(*xs), weight))

    reports = []
    if module is not None:
        module.zero_grad()
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        loss = loss_of(*leaves)
    tape.backward(loss)
    for i, (x, leaf) in enumerate(zip(inputs, leaves)):
        def f(xi, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = Tensor(xi)
            return loss_of(*args)
        numeric = finite_diff_grad(f, x, h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        reports.append(GradReport(f"{name}/input{i}", rel_error(analytic, numeric), x.size))
    if module is not None:
        const = [Tensor(x) for x in inputs]
        for r in check_parameter_grads(lambda: loss_of(*const), list(module.named_parameters()),
                                       h, max_elems, seed):
            reports.append(GradReport(f"{name}/{r.name}", r.max_rel_error, r.checked))
    return reports


# ------------------------------------------------------------------ cases


def _core_cases() -> list[GradCase]:
    rng = np.random.default_rng(1)

    def conv(h):
        x = rng.standard_normal((5, 5, 3))
        w = rng.standard_normal((3, 3, 3, 4)) * 0.3
        b = rng.standard_normal(4)
        return check_function("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1), [x, w, b], h)

    def dwconv(h):
        x = rng.standard_normal((5, 4, 3))
        w = rng.standard_normal((3, 3, 3)) * 0.3
        return check_function("depthwise_conv2d", lambda x, w: ops.depthwise_conv2d(x, w, stride=1, padding=1),
                              [x, w], h)

    def norm(h):
        x = rng.standard_normal((4, 6))
        g, b = rng.standard_normal(6), rng.standard_normal(6)
        return check_function("layer_norm", ops.layer_norm, [x, g, b], h)

    def resize(h):
        x = rng.standard_normal((3, 4, 2))
        return check_function("resize_bilinear", lambda x: ops.resize_bilinear(x, (7, 5)), [x], h)

    def softmax(h):
        x = rng.standard_normal((3, 5))
        return check_function("softmax+gelu", lambda x: ops.gelu(ops.softmax(x, axis=-1)), [x], h)

    return [GradCase("conv2d", "core", conv), GradCase("depthwise_conv2d", "core", dwconv),
            GradCase("layer_norm", "core", norm), GradCase("resize_bilinear", "core", resize),
            GradCase("softmax+gelu", "core", softmax)]


def _wkv_cases() -> list[GradCase]:
    from .wkv import QShift, bi_wkv

    def wkv(h):
        rng = np.random.default_rng(2)
        L, C = 9, 4
        k, v = rng.standard_normal((L, C)), rng.standard_normal((L, C))
        w_raw, u = rng.standard_normal(C), rng.standard_normal(C)
        return check_function("bi_wkv", lambda k, v, w, u: bi_wkv(k, v, ops.softplus(w), u),
                              [k, v, w_raw, u], h)

    def shift(variant):
        def run(h):
            rng = np.random.default_rng(3)
            layer = randomize(QShift(8, variant=variant), rng)
            x = rng.standard_normal((3, 4, 8))
            return check_function(f"q_shift[{variant}]", layer, [x], h, layer)
        return run

    return [GradCase("bi_wkv", "wkv", wkv),
            GradCase("q_shift[additive]", "wkv", shift("additive")),
            GradCase("q_shift[interpolation]", "wkv", shift("interpolation"))]


def _block_cases() -> list[GradCase]:
    from .blocks import MBConv, ChannelMix, SpatialMix, VRWKVBlock

    def make(name, ctor, shape):
        def run(h):
            rng = np.random.default_rng(4)
            layer = randomize(ctor(rng), rng)
            x = rng.standard_normal(shape)
            return check_function(name, layer, [x], h, layer)
        return GradCase(name, "blocks", run)

    return [
        make("spatial_mix", lambda r: SpatialMix(r, 8), (3, 3, 8)),
        make("channel_mix", lambda r: ChannelMix(r, 8), (3, 3, 8)),
        make("vrwkv_block", lambda r: VRWKVBlock(r, 8), (2, 3, 8)),
        make("mbconv", lambda r: MBConv(r, 4), (4, 4, 4)),
        make("mbconv_stride2", lambda r: MBConv(r, 4, 6, stride=2), (4, 4, 4)),
    ]


def _head_cases() -> list[GradCase]:
    from .head import MaskDecoder, Prompt, PromptEncoder, RefineFuse, mask_decode, predict_masks, prompt_encode
    from .training import TrainConfig, seg_loss

    def decoder(h):
        rng = np.random.default_rng(5)
        dec = randomize(MaskDecoder(rng, 8, heads=2), rng)
        prompt = rng.standard_normal((2, 8))
        x = rng.standard_normal((2, 2, 8))

        def fn(prompt, x):
            f_m, q = mask_decode(prompt, x, dec)
            return ops.concat([ops.reshape(f_m, (4, 8)), q], axis=0)
        return check_function("mask_decoder", fn, [prompt, x], h, dec)

    def prompt_enc(h):
        rng = np.random.default_rng(6)
        enc = randomize(PromptEncoder(rng, 8), rng)
        p = Prompt.from_points([(0.2, 0.3, "fg"), (0.7, 0.1, "bg")])
        return check_function("prompt_encoder", lambda: prompt_encode(p, enc), [], h, enc)

    def refine(h):
        rng = np.random.default_rng(7)
        ref = randomize(RefineFuse(rng, (4, 8, 8), c_mask=4), rng)
        f_m, x = rng.standard_normal((2, 2, 8)), rng.standard_normal((2, 2, 8))
        x_mr, x_hr = rng.standard_normal((4, 4, 8)), rng.standard_normal((8, 8, 4))
        return check_function("refine_fuse", ref, [f_m, x, x_mr, x_hr], h, ref)

    def masks(h):
        rng = np.random.default_rng(8)
        q, f = rng.standard_normal((2, 3)), rng.standard_normal((3, 4, 3))
        return check_function("predict_masks", lambda q, f: predict_masks(q, f, (6, 8)), [q, f], h)

    def loss(h):
        rng = np.random.default_rng(9)
        logits = 2.0 * rng.standard_normal((5, 6))
        gt = rng.uniform(size=(5, 6)) > 0.5
        return check_function("seg_loss", lambda x: seg_loss(x, gt, TrainConfig()), [logits], h)

    return [GradCase("mask_decoder", "head", decoder), GradCase("prompt_encoder", "head", prompt_enc),
            GradCase("refine_fuse", "head", refine), GradCase("predict_masks", "head", masks),
            GradCase("seg_loss", "head", loss)]


SUITES = ("core", "wkv", "blocks", "head")


def cases(suite: str = "all") -> list[GradCase]:
    every = _core_cases() + _wkv_cases() + _block_cases() + _head_cases()
    if suite == "all":
        return every
    return [c for c in every if c.suite == suite]


def run_suite(suite: str = "all", h: float = DEFAULT_STEP) -> list[GradReport]:
    reports = []
    for case in cases(suite):
        reports.extend(case.run(h))
    return reports
