"""Small end-to-end segmentation network with an optional frequency branch.

Pipeline: three-stage conv backbone (output stride 8) -> mini pyramid pooling
context -> projection -> [frequency branch: DCT channel pooling, encoder
variant, spatial-frequency fusion] -> 1x1 head -> bilinear x8 upsampling.

Parameters are drawn from a generator keyed by (seed, parameter name), so two
variants built with the same seed share every parameter they have in common.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dct import ConfigurationError, MultiSpectralVector, make_basis, multispectral_extract, zigzag_order
from .modules import LfeParams, SffParams, lfe_forward, lfe_variants, parse_mode, sff_forward
from .tensor import (
    DTYPE,
    Param,
    Tensor,
    adaptive_avg_pool,
    concat,
    conv1x1,
    record,
    relu,
    reshape,
    resize_bilinear,
    transpose,
)

VARIANTS = ("baseline", "fdl", "static_all", "top_k:K")


def parse_variant(variant: str) -> str:
    """Validate a variant string and return it normalized."""
    if variant in ("baseline", "fdl", "static_all"):
        return variant
    if variant.startswith("top_k:"):
        parse_mode(variant)
        return variant
    raise ConfigurationError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class ToyNetConfig:
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    context_width: int = 64
    fusion_width: int = 64
    dct_size: int = 8
    classes: int = 4
    variant: str = "fdl"

    def __post_init__(self):
        parse_variant(self.variant)
        if len(self.widths) != 3:
            raise ConfigurationError("backbone needs exactly three stages for output stride 8")
        if self.input_size % 8:
            raise ConfigurationError(f"input size {self.input_size} is not a multiple of 8")
        if self.variant != "baseline" and self.widths[-1] % self.n:
            raise ConfigurationError(
                f"backbone width {self.widths[-1]} is not divisible by n={self.n} frequency components"
            )

    @property
    def n(self) -> int:
        return self.dct_size ** 2

    @property
    def feature_size(self) -> int:
        return self.input_size // 8

    @property
    def encoder_mode(self) -> Optional[str]:
        if self.variant == "baseline":
            return None
        return "learnable" if self.variant == "fdl" else self.variant

    def with_variant(self, variant: str) -> "ToyNetConfig":
        return ToyNetConfig(**{**asdict(self), "variant": variant})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToyNetConfig":
        raw = json.loads(text)
        for key in ("widths", "ppm_bins"):
            raw[key] = tuple(raw[key])
        return cls(**raw)


def conv3x3_nhwc(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on a channels-last (B, H, W, Cin) map.

    ``weight`` keeps the usual (Cout, Cin, 3, 3) layout. Patches are gathered
    in one copy from a sliding-window view; the input gradient is
    scattered one tap at a time from a contiguous per-tap product.
    """
    B, H, W, Cin = x.shape
    Cout = weight.shape[0]
    if weight.shape != (Cout, Cin, 3, 3):
        raise ConfigurationError(f"conv3x3 weight {weight.shape} does not match input channels {Cin}")
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    dtype = np.result_type(x.data, weight.data)
    xp = np.zeros((B, H + 2, W + 2, Cin), dtype=dtype)
    xp[:, 1:-1, 1:-1, :] = x.data
    # (B, Ho, Wo, Cin, 3, 3) window view -> one contiguous copy in (kh, kw, Cin) order
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, 9 * Cin)
    wm = weight.data.transpose(2, 3, 1, 0).reshape(9 * Cin, Cout)
    out = (cols @ wm + bias.data).reshape(B, Ho, Wo, Cout)

    def backward(g):
        gm = g.reshape(-1, Cout)
        gw = (cols.T @ gm).reshape(3, 3, Cin, Cout).transpose(3, 2, 0, 1)
        gb = gm.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        taps = wm.reshape(3, 3, Cin, Cout)
        gxp = np.zeros((B, H + 2, W + 2, Cin), dtype=gm.dtype)
        for kh in range(3):
            for kw in range(3):
                tap = (gm @ taps[kh, kw].T).reshape(B, Ho, Wo, Cin)
                gxp[:, kh:kh + stride * Ho:stride, kw:kw + stride * Wo:stride, :] += tap
        return gxp[:, 1:-1, 1:-1, :], gw, gb

    return record(out, (x, weight, bias), backward, "conv3x3")


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on a (B, Cin, H, W) map."""
    y = conv3x3_nhwc(transpose(x, (0, 2, 3, 1)), weight, bias, stride)
    return transpose(y, (0, 3, 1, 2))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class ToyNet:
    cfg: ToyNetConfig
    params: dict[str, Param] = field(default_factory=dict)
    lfe: Optional[LfeParams] = None
    sff: Optional[SffParams] = None

    @classmethod
    def create(cls, cfg: ToyNetConfig, seed: int = 0) -> "ToyNet":
        net = cls(cfg)
        p = net.params

        def he(name, shape, fan_in):
            p[name] = Param(_param_rng(seed, name).normal(0.0, math.sqrt(2.0 / fan_in), shape), name)

        def zeros(name, shape):
            p[name] = Param(np.zeros(shape), name)

        cin = 3
        for s, w in enumerate(cfg.widths):
            he(f"backbone.{s}.conv_a.weight", (w, cin, 3, 3), cin * 9)
            zeros(f"backbone.{s}.conv_a.bias", (w,))
            he(f"backbone.{s}.conv_b.weight", (w, w, 3, 3), w * 9)
            zeros(f"backbone.{s}.conv_b.bias", (w,))
            cin = w
        c = cfg.widths[-1]
        branch = max(1, c // len(cfg.ppm_bins))
        for b in cfg.ppm_bins:
            he(f"ppm.{b}.weight", (branch, c), c)
            zeros(f"ppm.{b}.bias", (branch,))
        fused_in = c + branch * len(cfg.ppm_bins)
        he("ppm.fuse.weight", (cfg.context_width, fused_in), fused_in)
        zeros("ppm.fuse.bias", (cfg.context_width,))
        he("sff.proj_s", (cfg.fusion_width, cfg.context_width), cfg.context_width)
        he("head.weight", (cfg.classes, cfg.fusion_width), cfg.fusion_width)
        zeros("head.bias", (cfg.classes,))
        if cfg.variant != "baseline":
            p["sff.proj_f"] = Param(
                _param_rng(seed, "sff.proj_f").normal(0.0, math.sqrt(1.0 / c), (cfg.fusion_width, c)),
                "sff.proj_f",
            )
            zeros("sff.alpha", (1,))
            net.sff = SffParams(p["sff.proj_s"], p["sff.proj_f"], p["sff.alpha"])
            if cfg.encoder_mode == "learnable":
                lfe = LfeParams.create(cfg.n, c // cfg.n, _param_rng(seed, "lfe.lfcc_weight"))
                for q in lfe.params():
                    p[q.name] = q
                net.lfe = lfe
        return net

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for q in self.params.values():
            q.zero_grad()

    def backbone(self, x: Tensor) -> Tensor:
        p = self.params
        # channels-last inside the backbone saves a layout change per conv
        x = transpose(x, (0, 2, 3, 1))
        for s in range(len(self.cfg.widths)):
            x = relu(conv3x3_nhwc(x, p[f"backbone.{s}.conv_a.weight"], p[f"backbone.{s}.conv_a.bias"], 1))
            x = relu(conv3x3_nhwc(x, p[f"backbone.{s}.conv_b.weight"], p[f"backbone.{s}.conv_b.bias"], 2))
        return transpose(x, (0, 3, 1, 2))

    def context(self, f: Tensor) -> Tensor:
        p = self.params
        h, w = f.shape[-2:]
        branches = [f]
        for b in self.cfg.ppm_bins:
            pooled = adaptive_avg_pool(f, b)
            proj = relu(conv1x1(pooled, p[f"ppm.{b}.weight"], p[f"ppm.{b}.bias"]))
            branches.append(resize_bilinear(proj, h, w))
        return relu(conv1x1(concat(branches, axis=1), p["ppm.fuse.weight"], p["ppm.fuse.bias"]))

    def forward(self, images, return_weights: bool = False):
        """(B, 3, S, S) images -> (B, K, S, S) logits; (3, S, S) -> (K, S, S).

        With ``return_weights`` the per-image encoder weights (B, n) are also
        returned (None unless the variant is ``fdl``).
        """
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=DTYPE))
        single = x.ndim == 3
        if single:
            x = reshape(x, (1, *x.shape))
        S = self.cfg.input_size
        if x.shape[1:] != (3, S, S):
            raise ConfigurationError(f"expected images of shape (3, {S}, {S}), got {x.shape[1:]}")
        p = self.params
        f = self.backbone(x)
        ctx = self.context(f)
        weights = None
        if self.cfg.variant == "baseline":
            fused = conv1x1(ctx, p["sff.proj_s"])
        else:
            basis = make_basis(self.cfg.dct_size)
            v = multispectral_extract(f, zigzag_order(self.cfg.dct_size), basis)
            if self.lfe is not None:
                v_prime, weights = lfe_forward(v, self.lfe)
            else:
                v_prime = lfe_variants(v, self.cfg.encoder_mode)
            fused = sff_forward(ctx, v_prime, self.sff)
        logits = conv1x1(fused, p["head.weight"], p["head.bias"])
        logits = resize_bilinear(logits, S, S)
        if single:
            logits = reshape(logits, logits.shape[1:])
        return (logits, weights) if return_weights else logits

    __call__ = forward


def predict(net: ToyNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax label maps (B, S, S) for a stack of images."""
    out = []
    for i in range(0, len(images), batch_size):
        logits = net.forward(Tensor(np.asarray(images[i:i + batch_size], dtype=DTYPE)))
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out, axis=0)
