"""High-resolution perception branch.

Pipeline on one high-resolution frame: a small residual CNN produces a
spatial feature grid; the enumeration module turns a gradient-based saliency
readout (feature-space class-activation mapping against a fixed localization
prompt) into a [0,1] highlight map; the highlighted image re-enters the CNN;
the incorporation module injects the resulting features into the video
encoder's cls tokens through zero-gated cross-attention; and a detection
head regresses the risk-object box.

Heatmap construction runs on its own throwaway tape with detached weights:
no gradient from the main training objective ever flows through it.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .autograd import Tensor, broadcast_to, clip, concat, maximum, power, swapaxes, tsum
from .modules import Linear, Module, ModuleList, Parameter


# -- box construction ----------------------------------------------------------

MIN_EXTENT = 1e-3


def corners_from_cwh(cwh: Tensor) -> Tensor:
    """(cx, cy, w, h) in (0,1) -> valid corner box [..., 4].

    Guarantees 0 <= x1 < x2 <= 1 (same for y) with extent >= MIN_EXTENT.
    """
    cx, cy = cwh[..., 0:1], cwh[..., 1:2]
    hw, hh = cwh[..., 2:3] * 0.5, cwh[..., 3:4] * 0.5
    x1 = clip(cx - hw, 0.0, 1.0 - MIN_EXTENT)
    y1 = clip(cy - hh, 0.0, 1.0 - MIN_EXTENT)
    x2 = maximum(clip(cx + hw, 0.0, 1.0), x1 + MIN_EXTENT)
    y2 = maximum(clip(cy + hh, 0.0, 1.0), y1 + MIN_EXTENT)
    return concat([x1, y1, x2, y2], axis=-1)


# -- spatial extractor ---------------------------------------------------------


class ResidualStage(Module):
    """Two 3x3 convs with a strided 1x1 skip; halves the spatial grid."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        super().__init__()
        self.w1 = Parameter(rng.normal(0.0, math.sqrt(2.0 / (9 * c_in)), (3, 3, c_in, c_out)), dtype=dtype)
        self.b1 = Parameter(np.zeros(c_out), dtype=dtype)
        self.w2 = Parameter(rng.normal(0.0, math.sqrt(2.0 / (9 * c_out)), (3, 3, c_out, c_out)), dtype=dtype)
        self.b2 = Parameter(np.zeros(c_out), dtype=dtype)
        self.ws = Parameter(rng.normal(0.0, math.sqrt(2.0 / c_in), (1, 1, c_in, c_out)), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(ops.conv2d(x, self.w1, self.b1, stride=2, padding=1))
        y = ops.conv2d(y, self.w2, self.b2, stride=1, padding=1)
        skip = ops.conv2d(x, self.ws, stride=2, padding=0)
        return ops.relu(y + skip)


class SpatialExtractor(Module):
    """Conv stem + three residual stages; total stride 16.

    128x128 input -> 8x8 grid with 8*width channels.
    """

    def __init__(self, width: int, rng, dtype):
        super().__init__()
        self.stem_w = Parameter(rng.normal(0.0, math.sqrt(2.0 / 27), (3, 3, 3, width)), dtype=dtype)
        self.stem_b = Parameter(np.zeros(width), dtype=dtype)
        self.stages = ModuleList(
            [
                ResidualStage(width, 2 * width, rng, dtype),
                ResidualStage(2 * width, 4 * width, rng, dtype),
                ResidualStage(4 * width, 8 * width, rng, dtype),
            ]
        )
        self.out_channels = 8 * width

    def forward(self, img: Tensor) -> Tensor:
        if img.shape[1] % 16 or img.shape[2] % 16:
            raise ValueError("spatial extractor needs resolution divisible by 16")
        x = ops.relu(ops.conv2d(img, self.stem_w, self.stem_b, stride=2, padding=1))
        for stage in self.stages:
            x = stage(x)
        return x


# -- enumeration ---------------------------------------------------------------


class ObjectHighlighter(Module):
    """Similarity model and class-activation highlight over a feature grid."""

    def __init__(self, d_i: int, d_l: int, rng, dtype):
        super().__init__()
        self.proj = Linear(d_i, d_l, rng, bias=False, dtype=dtype)
        self.scale = Parameter(np.asarray(10.0), dtype=dtype)

    def similarity(self, feats: Tensor, prompt_vec: np.ndarray) -> Tensor:
        """Cosine similarity between pooled projected features and the prompt."""
        gap = feats.mean(axis=(1, 2))
        p = self.proj(gap)
        t = np.asarray(prompt_vec, dtype=p.data.dtype)
        t = t / max(float(np.linalg.norm(t)), 1e-8)
        dot = tsum(p * Tensor(t), axis=-1)
        inv_norm = power(tsum(p * p, axis=-1) + 1e-8, -0.5)
        return dot * inv_norm

    def presence_logits(self, feats: Tensor, prompt_vec: np.ndarray) -> Tensor:
        return self.scale * self.similarity(feats, prompt_vec)

    def heatmap(self, feats: np.ndarray, prompt_vec: np.ndarray) -> np.ndarray:
        """[B, H, W, C] features -> [B, H, W] map in [0, 1], fully detached.

        Channel weights are the spatial mean of d(similarity)/d(features),
        taken on a private tape with the projection weights treated as
        constants. A map whose positive part is empty stays identically zero.
        """
        a = Tensor(np.asarray(feats, dtype=np.float64), requires_grad=True)
        gap = a.mean(axis=(1, 2))
        p = gap @ Tensor(self.proj.weight.data.astype(np.float64))
        t = np.asarray(prompt_vec, dtype=np.float64)
        t = t / max(float(np.linalg.norm(t)), 1e-8)
        dot = tsum(p * Tensor(t), axis=-1)
        inv_norm = power(tsum(p * p, axis=-1) + 1e-8, -0.5)
        (dot * inv_norm).sum().backward()
        w = a.grad.mean(axis=(1, 2))  # [B, C]
        raw = np.einsum("bhwc,bc->bhw", np.asarray(feats, dtype=np.float64), w)
        raw = np.maximum(raw, 0.0)
        mx = raw.max(axis=(1, 2), keepdims=True)
        return np.divide(raw, mx, out=np.zeros_like(raw), where=mx > 0)


def apply_highlight(mask: np.ndarray, feats: Tensor) -> Tensor:
    """Elementwise per-cell scaling: mask [B, H, W] on features [B, H, W, C]."""
    return feats * Tensor(mask[..., None].astype(feats.data.dtype))


# -- incorporation -------------------------------------------------------------


class IncorporationSite(Module):
    """Single-head cross-attention from cls tokens into HR features.

    Output = alpha * attended + cls with alpha starting at exactly zero, so
    a fresh site is invisible to the rest of the network.
    """

    def __init__(self, d_v: int, d_i: int, d_s: int, rng, dtype):
        super().__init__()
        self.wq = Linear(d_v, d_s, rng, bias=False, dtype=dtype)
        self.wk = Linear(d_i, d_s, rng, bias=False, dtype=dtype)
        self.wv = Linear(d_i, d_v, rng, bias=False, dtype=dtype)
        self.alpha = Parameter(np.zeros(()), dtype=dtype)
        self.d_s = d_s

    def forward(self, cls: Tensor, feats: Tensor) -> Tensor:
        q = self.wq(cls)
        k = self.wk(feats)
        v = self.wv(feats)
        scores = (q @ swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.d_s))
        attended = ops.softmax_rows(scores) @ v
        return self.alpha * attended + cls


# -- detection heads -----------------------------------------------------------


class _CrossAttnPool(Module):
    """Shared core: queries attend a feature sequence, outputs per-query rows.

    Multi-head; with a single head the attention is slow to sharpen and box
    regression stalls near the dataset-mean box.
    """

    def __init__(self, d_q: int, d_i: int, d_a: int, rng, dtype, heads: int = 4):
        super().__init__()
        if d_a % heads:
            raise ValueError("d_a must divide by heads")
        self.heads = heads
        self.dh = d_a // heads
        self.wq = Linear(d_q, d_a, rng, bias=False, dtype=dtype)
        self.wk = Linear(d_i, d_a, rng, bias=False, dtype=dtype)
        self.wv = Linear(d_i, d_a, rng, bias=False, dtype=dtype)

    def forward(self, queries: Tensor, feats: Tensor) -> Tensor:
        b, nq, _ = queries.shape
        n = feats.shape[1]
        h, dh = self.heads, self.dh
        q = swapaxes(self.wq(queries).reshape(b, nq, h, dh), 1, 2)
        k = swapaxes(self.wk(feats).reshape(b, n, h, dh), 1, 2)
        v = swapaxes(self.wv(feats).reshape(b, n, h, dh), 1, 2)
        scores = (q @ swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        out = ops.softmax_rows(scores) @ v
        return swapaxes(out, 1, 2).reshape(b, nq, h * dh)


class SpanQueryDetector(Module):
    """Answer-span hidden states query the highlighted HR features."""

    def __init__(self, d_l: int, d_i: int, d_a: int, rng, dtype, heads: int = 4):
        super().__init__()
        self.ca = _CrossAttnPool(d_l, d_i, d_a, rng, dtype, heads=heads)
        self.fc1 = Linear(d_a, d_a, rng, dtype=dtype)
        self.fc2 = Linear(d_a, 4, rng, dtype=dtype)

    def forward(self, h_a: Tensor, feats: Tensor, span_mask: np.ndarray | None = None) -> Tensor:
        if h_a.shape[1] == 0:
            raise ValueError("answer span is empty")
        att = self.ca(h_a, feats)
        if span_mask is None:
            pooled = att.mean(axis=1)
        else:
            pooled = ops.masked_mean_rows(att, span_mask)
        cwh = ops.sigmoid(self.fc2(ops.gelu(self.fc1(pooled))))
        return corners_from_cwh(cwh)


class BoxMlp(Module):
    """Detector without cross-attention: box from mean-pooled hidden states."""

    def __init__(self, d_l: int, d_a: int, rng, dtype):
        super().__init__()
        self.fc1 = Linear(d_l, d_a, rng, dtype=dtype)
        self.fc2 = Linear(d_a, 4, rng, dtype=dtype)

    def forward(self, h_a: Tensor, span_mask: np.ndarray | None = None) -> Tensor:
        if span_mask is None:
            pooled = h_a.mean(axis=1)
        else:
            pooled = ops.masked_mean_rows(h_a, span_mask)
        cwh = ops.sigmoid(self.fc2(ops.gelu(self.fc1(pooled))))
        return corners_from_cwh(cwh)


class LearnedQueryDetector(Module):
    """Detection from learned query embeddings with per-query objectness."""

    def __init__(self, n_queries: int, d_l: int, d_i: int, d_a: int, rng, dtype, heads: int = 4):
        super().__init__()
        self.queries = Parameter(rng.normal(0.0, 0.02, size=(n_queries, d_l)), dtype=dtype)
        self.ca = _CrossAttnPool(d_l, d_i, d_a, rng, dtype, heads=heads)
        self.fc1 = Linear(d_a, d_a, rng, dtype=dtype)
        self.fc2 = Linear(d_a, 4, rng, dtype=dtype)
        self.obj = Linear(d_a, 1, rng, dtype=dtype)

    def forward(self, feats: Tensor):
        """Returns (boxes [B, N, 4], objectness logits [B, N])."""
        b = feats.shape[0]
        n, d = self.queries.shape
        q = broadcast_to(self.queries.reshape(1, n, d), (b, n, d))
        att = self.ca(q, feats)
        cwh = ops.sigmoid(self.fc2(ops.gelu(self.fc1(att))))
        boxes = corners_from_cwh(cwh)
        obj = self.obj(att)[..., 0]
        return boxes, obj

    def loss(self, boxes: Tensor, obj: Tensor, gt: np.ndarray) -> Tensor:
        """Min-cost matching against the single ground-truth box."""
        gt = np.asarray(gt, dtype=boxes.data.dtype)
        b, n, _ = boxes.shape
        per_query = np.abs(boxes.data - gt[:, None, :]).mean(axis=-1)
        istar = per_query.argmin(axis=1)
        chosen = boxes[(np.arange(b), istar)]
        box_loss = ops.l1_loss(chosen, gt)
        onehot = np.zeros((b, n), dtype=boxes.data.dtype)
        onehot[np.arange(b), istar] = 1.0
        obj_loss = ops.binary_cross_entropy_logits(obj, onehot)
        return box_loss + obj_loss

    def predict(self, boxes: Tensor, obj: Tensor) -> np.ndarray:
        istar = obj.data.argmax(axis=1)
        return boxes.data[np.arange(boxes.shape[0]), istar]
