"""Learnable frequency encoder, spatial-frequency fusion, and segmentation losses."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dct import ConfigurationError, FrequencyAssignment, MultiSpectralVector
from .tensor import (
    DTYPE,
    Param,
    Tensor,
    conv1x1,
    expand,
    matmul,
    mul,
    normalize_groups,
    record,
    reshape,
    softmax,
    transpose,
    weighted_sum,
)


class DegenerateBatchError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Learnable Frequency Encoder


@dataclass
class LfeParams:
    n: int
    group_size: int
    lfcc_weight: Param
    gamma: Param
    beta: Param
    eps: float = 1e-5

    @classmethod
    def create(cls, n: int, group_size: int, rng: np.random.Generator) -> "LfeParams":
        w = rng.normal(0.0, 1.0 / math.sqrt(group_size), size=(1, group_size))
        return cls(
            n,
            group_size,
            Param(w, "lfe.lfcc_weight"),
            Param(np.ones(1), "lfe.gamma"),
            Param(np.zeros(1), "lfe.beta"),
        )

    def params(self) -> list[Param]:
        return [self.lfcc_weight, self.gamma, self.beta]


def _batched(values: Tensor) -> tuple[Tensor, bool]:
    if values.ndim == 1:
        return reshape(values, (1, values.shape[0])), True
    return values, False


def frequency_scores(v_freq: MultiSpectralVector, params: LfeParams) -> Tensor:
    """Pre-softmax per-component scores, shape (B, n): 1x1 conv per group, then group normalization."""
    C = v_freq.channels
    if C % params.n or C // params.n != params.group_size:
        raise ConfigurationError(
            f"vector of length C={C} does not split into n={params.n} groups of {params.group_size}"
        )
    vals, _ = _batched(v_freq.values)
    B = vals.shape[0]
    grouped = reshape(vals, (B * params.n, params.group_size, 1, 1))
    s = conv1x1(grouped, params.lfcc_weight)
    s = transpose(reshape(s, (B, params.n)), (1, 0))
    z = normalize_groups(s, params.gamma, params.beta, params.eps)
    return transpose(z, (1, 0))


def reweight(v_freq: MultiSpectralVector, weights: Tensor) -> MultiSpectralVector:
    """Scale every channel of group i by ``weights[..., i]``."""
    vals, single = _batched(v_freq.values)
    B, C = vals.shape
    n, g = v_freq.groups, v_freq.group_size
    w = expand(reshape(weights, (B, n, 1)), (B, n, g))
    out = mul(reshape(vals, (B, n, g)), w)
    out = reshape(out, (C,) if single else (B, C))
    return MultiSpectralVector(out, n)


def lfe_forward(v_freq: MultiSpectralVector, params: LfeParams) -> tuple[MultiSpectralVector, Tensor]:
    """Returns the reweighted vector and the per-component weights (n,) or (B, n)."""
    if v_freq.channels % params.n:
        raise ConfigurationError(f"C={v_freq.channels} is not divisible by n={params.n}")
    weights = softmax(frequency_scores(v_freq, params), axis=-1)
    out = reweight(MultiSpectralVector(v_freq.values, params.n), weights)
    if v_freq.values.ndim == 1:
        weights = reshape(weights, (params.n,))
    return out, weights


def parse_mode(mode: str) -> tuple[str, Optional[int]]:
    """``'learnable'``, ``'static_all'`` or ``'top_k:K'`` -> (kind, k)."""
    if mode in ("learnable", "static_all"):
        return mode, None
    if mode.startswith("top_k:"):
        try:
            k = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad top_k mode {mode!r}") from None
        return "top_k", k
    raise ConfigurationError(f"unknown frequency encoder mode {mode!r}")


def lfe_variants(
    v_freq: MultiSpectralVector, mode: str, params: Optional[LfeParams] = None
) -> MultiSpectralVector:
    """Apply one encoder variant: ``learnable``, ``static_all`` (identity) or ``top_k:K``.

    ``top_k:K`` keeps the first K groups (lowest zigzag index) at unit weight
    and zeroes the rest.
    """
    kind, k = parse_mode(mode)
    if kind == "learnable":
        if params is None:
            raise ConfigurationError("learnable mode needs LfeParams")
        return lfe_forward(v_freq, params)[0]
    if kind == "static_all":
        return v_freq
    n = v_freq.groups
    if not 1 <= k <= n:
        raise ConfigurationError(f"top_k needs 1 <= k <= {n}, got {k}")
    mask = np.repeat((np.arange(n) < k).astype(DTYPE), v_freq.group_size)
    return MultiSpectralVector(mul(v_freq.values, mask), n)


def write_lfe_weights_csv(path, weights: np.ndarray, assignment: FrequencyAssignment) -> None:
    weights = np.asarray(weights, dtype=DTYPE).reshape(-1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["component_index", "u", "v", "weight"])
        for i, ((u, v), wt) in enumerate(zip(assignment.order, weights)):
            w.writerow([i, u, v, repr(float(wt))])


# ----------------------------------------------------------------------------
# Spatial Frequency Fusion


@dataclass
class SffParams:
    proj_s: Param  # (C', C_ctx)
    proj_f: Param  # (C', C)
    alpha: Param  # (1,)

    @classmethod
    def create(cls, ctx_channels: int, freq_channels: int, width: int, rng: np.random.Generator) -> "SffParams":
        return cls(
            Param(rng.normal(0.0, math.sqrt(2.0 / ctx_channels), (width, ctx_channels)), "sff.proj_s"),
            Param(rng.normal(0.0, math.sqrt(1.0 / freq_channels), (width, freq_channels)), "sff.proj_f"),
            Param(np.zeros(1), "sff.alpha"),
        )

    def params(self) -> list[Param]:
        return [self.proj_s, self.proj_f, self.alpha]


def affinity(r_s: Tensor, r_f: Tensor) -> Tensor:
    """A[i, j] = softmax over i of <R_s[i], R_f[j]>; inputs (B, C', D), output (B, C', C')."""
    scores = matmul(r_s, transpose(r_f, (0, 2, 1)))
    return softmax(scores, axis=1)


def sff_forward(context_feat: Tensor, v_freq_prime: MultiSpectralVector, params: SffParams) -> Tensor:
    """Fuse (B, C_ctx, h, w) context with the reweighted frequency vector into (B, C', h, w).

    Unbatched (C_ctx, h, w) input returns (C', h, w).
    """
    if params.proj_s.shape[0] != params.proj_f.shape[0]:
        raise ConfigurationError(
            f"projection widths differ: proj_s {params.proj_s.shape}, proj_f {params.proj_f.shape}"
        )
    single = context_feat.ndim == 3
    if single:
        context_feat = reshape(context_feat, (1, *context_feat.shape))
    vals, _ = _batched(v_freq_prime.values)
    B, _, h, w = context_feat.shape
    width, D = params.proj_s.shape[0], h * w

    r_s_map = conv1x1(context_feat, params.proj_s)
    r_f = conv1x1(reshape(vals, (B, vals.shape[1], 1, 1)), params.proj_f)
    r_f = expand(r_f, (B, width, h, w))

    r_s = reshape(r_s_map, (B, width, D))
    a = affinity(r_s, reshape(r_f, (B, width, D)))
    fused = reshape(matmul(a, r_s), (B, width, h, w))
    out = mul(fused, expand(reshape(params.alpha, (1, 1, 1, 1)), fused.shape)) + r_s_map
    return reshape(out, out.shape[1:]) if single else out


# ----------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.01
    edge_radius: int = 1
    ignore_index: int = 255
    ohem_enabled: bool = False
    ohem_keep_fraction: float = 0.25

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if not 0 < self.ohem_keep_fraction <= 1:
            raise ConfigurationError(f"ohem_keep_fraction must be in (0, 1], got {self.ohem_keep_fraction}")
        if self.edge_radius < 1:
            raise ConfigurationError("edge_radius must be >= 1")


def edge_mask(labels: np.ndarray, radius: int = 1, ignore_index: int = 255) -> np.ndarray:
    """1 where a valid pixel has a differently-labelled valid pixel within Chebyshev ``radius``.

    Works on (H, W) or batched (B, H, W) integer maps.
    """
    if radius < 1:
        raise ConfigurationError("radius must be >= 1")
    lab = np.asarray(labels)
    valid = lab != ignore_index
    H, W = lab.shape[-2:]
    pad = [(0, 0)] * (lab.ndim - 2) + [(radius, radius), (radius, radius)]
    plab = np.pad(lab, pad, constant_values=ignore_index)
    edge = np.zeros(lab.shape, dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            nb = plab[..., radius + dy:radius + dy + H, radius + dx:radius + dx + W]
            edge |= (nb != ignore_index) & (nb != lab)
    return (edge & valid).astype(np.uint8)


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-pixel -log softmax(logits)[label] over axis 1 of (B, K, H, W); 0 where invalid."""
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    loss = np.where(valid, lse - picked, 0.0)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * (g * valid)[:, None],)

    return record(loss, (logits,), backward, "pixel_cross_entropy")


def ohem_mask(pixel_loss: np.ndarray, valid: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Keep the ceil(keep_fraction * P) largest-loss valid pixels of one image."""
    flat = pixel_loss.reshape(-1)
    vidx = np.flatnonzero(valid.reshape(-1))
    keep = math.ceil(keep_fraction * vidx.size)
    order = np.argsort(-flat[vidx], kind="stable")[:keep]
    mask = np.zeros(flat.size, dtype=DTYPE)
    mask[vidx[order]] = 1.0
    return mask.reshape(pixel_loss.shape)


def seg_losses(pred_logits: Tensor, labels, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """(total, seg, edge) for (K, H, W) logits, or the per-image mean over a (B, K, H, W) batch.

    Segmentation loss averages over valid (or OHEM-kept) pixels, edge loss over
    semantic-edge pixels (0 when an image has none).
    """
    lab = np.asarray(labels)
    if pred_logits.ndim == 3:
        pred_logits = reshape(pred_logits, (1, *pred_logits.shape))
        lab = lab[None]
    B, K = pred_logits.shape[:2]
    if K < 2:
        raise ConfigurationError(f"need at least 2 classes, got {K}")
    if lab.shape != (B, *pred_logits.shape[2:]):
        raise ConfigurationError(f"labels {lab.shape} do not match logits {pred_logits.shape}")
    valid = lab != cfg.ignore_index
    counts = valid.reshape(B, -1).sum(axis=1)
    if (counts == 0).any():
        raise DegenerateBatchError("an image in the batch has no valid pixels")

    ce = pixel_cross_entropy(pred_logits, lab, valid)
    seg_w = np.empty(lab.shape, dtype=DTYPE)
    for b in range(B):
        if cfg.ohem_enabled:
            m = ohem_mask(ce.data[b], valid[b], cfg.ohem_keep_fraction)
        else:
            m = valid[b].astype(DTYPE)
        seg_w[b] = m / m.sum()
    edges = edge_mask(lab, cfg.edge_radius, cfg.ignore_index).astype(DTYPE)
    n_edge = edges.reshape(B, -1).sum(axis=1)
    edge_w = edges / np.maximum(n_edge, 1.0)[:, None, None]

    loss_seg = weighted_sum(ce, seg_w / B)
    loss_edge = weighted_sum(ce, edge_w / B)
    loss_total = mul(loss_seg, cfg.lambda1) + mul(loss_edge, cfg.lambda2)
    return loss_total, loss_seg, loss_edge
