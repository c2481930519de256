"""Gated self-attention fusion between the image and text branches.

Mid-network, each branch's intermediate features are summarized into channel
descriptors (average+max pooling for the image grid, max pooling for the text
sequence), refined by small Q/K/V self-attention blocks, concatenated into a
single fusion map, squashed with a sigmoid, and multiplied back onto the two
branches' features channel-wise.  Descriptor widths are projected back to
each branch's channel count so the gate is always shape-compatible.

Functional pieces (pooling, projection, scaled-dot attention, gating) are
exposed for direct testing; the ``nn.Module`` wrappers compose them.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .errors import InvalidConfigError, InvalidInputError

__all__ = [
    "SelfAttentionBlock",
    "TextAttentionBlock",
    "VisualAttentionBlock",
    "AttentionFusion",
    "fuse_and_gate",
    "global_avg_pool_2d",
    "global_max_pool_2d",
    "global_max_pool_1d",
    "qkv_project",
    "scaled_dot_attention",
]

GATE_MODES = ("sigmoid", "self_gating", "bypass")


def _check_map_2d(x: Tensor) -> Tensor:
    x = torch.as_tensor(x)
    if x.ndim < 3:
        raise InvalidInputError(f"feature map must be (..., C, H, W), got shape {tuple(x.shape)}")
    if x.shape[-1] == 0 or x.shape[-2] == 0 or x.shape[-3] == 0:
        raise InvalidInputError("feature map has an empty axis")
    return x


def _check_seq(x: Tensor) -> Tensor:
    x = torch.as_tensor(x)
    if x.ndim < 2:
        raise InvalidInputError(f"feature sequence must be (..., L, C), got shape {tuple(x.shape)}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise InvalidInputError("feature sequence has an empty axis")
    return x


def global_avg_pool_2d(x: Tensor) -> Tensor:
    """(..., C, H, W) -> (..., C): mean over all spatial positions."""
    return _check_map_2d(x).mean(dim=(-2, -1))


def global_max_pool_2d(x: Tensor) -> Tensor:
    """(..., C, H, W) -> (..., C): max over all spatial positions."""
    x = _check_map_2d(x)
    return x.flatten(start_dim=-2).max(dim=-1).values


def global_max_pool_1d(x: Tensor) -> Tensor:
    """(..., L, C) -> (..., C): max over sequence positions."""
    return _check_seq(x).max(dim=-2).values


def qkv_project(x: Tensor, projections) -> tuple[Tensor, Tensor, Tensor]:
    """Three independent affine maps of the same input.

    ``projections`` is a sequence of three ``(weight, bias)`` pairs in
    ``nn.Linear`` convention (``y = x @ W.T + b``), giving (q, k, v).
    """
    if len(projections) != 3:
        raise InvalidConfigError("qkv_project expects exactly three (weight, bias) pairs")
    x = torch.as_tensor(x)
    outs = []
    for weight, bias in projections:
        weight = torch.as_tensor(weight)
        if weight.shape[-1] != x.shape[-1]:
            raise InvalidConfigError(
                f"projection input width {weight.shape[-1]} != descriptor width {x.shape[-1]}"
            )
        outs.append(torch.nn.functional.linear(x, weight, torch.as_tensor(bias)))
    return outs[0], outs[1], outs[2]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Row-softmax attention: ``A = softmax(q k^T / sqrt(d_f))``, ``F = A v``.

    Shapes ``(..., m, d_f)``; returns ``(F, A)`` with each A row summing to 1.
    """
    q, k, v = (torch.as_tensor(t) for t in (q, k, v))
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise InvalidInputError("q, k, v must be (..., m, d_f)")
    d_f = q.shape[-1]
    if d_f == 0:
        raise InvalidConfigError("d_f must be >= 1")
    if k.shape[-1] != d_f or v.shape[-2] != k.shape[-2]:
        raise InvalidInputError("q, k, v shapes are incompatible")
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_f)
    attn = torch.softmax(scores, dim=-1)
    return attn @ v, attn


class SelfAttentionBlock(nn.Module):
    """Single-head self-attention over a small token set.

    Q, K, V come from three independent fully-connected layers applied to the
    same tokens; the output is the attention-weighted sum of values.
    """

    def __init__(self, d_in: int, d_f: int | None = None):
        super().__init__()
        if d_in < 1:
            raise InvalidConfigError("d_in must be >= 1")
        d_f = d_in if d_f is None else d_f
        if d_f < 1:
            raise InvalidConfigError("d_f must be >= 1")
        self.d_in = d_in
        self.d_f = d_f
        self.query = nn.Linear(d_in, d_f)
        self.key = nn.Linear(d_in, d_f)
        self.value = nn.Linear(d_in, d_f)

    def forward(self, tokens: Tensor, return_weights: bool = False):
        if tokens.shape[-1] != self.d_in:
            raise InvalidInputError(
                f"token width {tokens.shape[-1]} != configured d_in {self.d_in}"
            )
        q, k, v = qkv_project(
            tokens,
            (
                (self.query.weight, self.query.bias),
                (self.key.weight, self.key.bias),
                (self.value.weight, self.value.bias),
            ),
        )
        out, attn = scaled_dot_attention(q, k, v)
        if return_weights:
            return out, attn
        return out


class VisualAttentionBlock(nn.Module):
    """Channel descriptor for an image feature map.

    The average-pooled and max-pooled descriptors form a two-token set; two
    self-attention blocks each attend over the pair and contribute the output
    row of their own token.  The two rows are concatenated and projected back
    to the map's channel count.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels < 1:
            raise InvalidConfigError("channels must be >= 1")
        self.channels = channels
        self.avg_attention = SelfAttentionBlock(channels)
        self.max_attention = SelfAttentionBlock(channels)
        self.project = nn.Linear(2 * channels, channels)

    def forward(self, feature_map: Tensor) -> Tensor:
        x = _check_map_2d(feature_map)
        if x.shape[-3] != self.channels:
            raise InvalidInputError(
                f"feature map has {x.shape[-3]} channels, block expects {self.channels}"
            )
        tokens = torch.stack(
            [global_avg_pool_2d(x), global_max_pool_2d(x)], dim=-2
        )  # (..., 2, C)
        avg_row = self.avg_attention(tokens)[..., 0, :]
        max_row = self.max_attention(tokens)[..., 1, :]
        return self.project(torch.cat([avg_row, max_row], dim=-1))


class TextAttentionBlock(nn.Module):
    """Channel descriptor for a text feature sequence (single max-pool path)."""

    def __init__(self, channels: int):
        super().__init__()
        if channels < 1:
            raise InvalidConfigError("channels must be >= 1")
        self.channels = channels
        self.max_attention = SelfAttentionBlock(channels)
        self.project = nn.Linear(channels, channels)

    def forward(self, feature_seq: Tensor) -> Tensor:
        x = _check_seq(feature_seq)
        if x.shape[-1] != self.channels:
            raise InvalidInputError(
                f"feature sequence has width {x.shape[-1]}, block expects {self.channels}"
            )
        token = global_max_pool_1d(x).unsqueeze(-2)  # (..., 1, C)
        out = self.max_attention(token)[..., 0, :]
        return self.project(out)


def fuse_and_gate(
    img_desc: Tensor,
    txt_desc: Tensor,
    x_img: Tensor,
    x_txt: Tensor,
    self_gating: bool = False,
) -> tuple[Tensor, Tensor]:
    """Concatenate descriptors, sigmoid, and re-weight both branches.

    The concatenated map's image slice multiplies ``x_img`` channel-wise
    (broadcast over H, W) and its text slice multiplies ``x_txt`` (broadcast
    over L).  With ``self_gating`` the multiplier is ``sigmoid(g) * g``
    instead of ``sigmoid(g)``.  Output shapes equal input shapes.
    """
    img_desc = torch.as_tensor(img_desc)
    txt_desc = torch.as_tensor(txt_desc)
    x_img = _check_map_2d(x_img)
    x_txt = _check_seq(x_txt)
    if img_desc.shape[-1] != x_img.shape[-3]:
        raise InvalidConfigError(
            f"image descriptor length {img_desc.shape[-1]} != channel count {x_img.shape[-3]}"
        )
    if txt_desc.shape[-1] != x_txt.shape[-1]:
        raise InvalidConfigError(
            f"text descriptor length {txt_desc.shape[-1]} != hidden width {x_txt.shape[-1]}"
        )
    gate_input = torch.cat([img_desc, txt_desc], dim=-1)
    gate = torch.sigmoid(gate_input)
    if self_gating:
        gate = gate * gate_input
    c_img = x_img.shape[-3]
    img_gate = gate[..., :c_img].unsqueeze(-1).unsqueeze(-1)  # (..., C, 1, 1)
    txt_gate = gate[..., c_img:].unsqueeze(-2)  # (..., 1, C)
    return x_img * img_gate, x_txt * txt_gate


class AttentionFusion(nn.Module):
    """One fusion site: attention blocks for both branches plus the gate."""

    def __init__(self, img_channels: int, txt_channels: int):
        super().__init__()
        self.visual = VisualAttentionBlock(img_channels)
        self.text = TextAttentionBlock(txt_channels)

    def forward(
        self, x_img: Tensor, x_txt: Tensor, gate_mode: str = "sigmoid"
    ) -> tuple[Tensor, Tensor]:
        if gate_mode not in GATE_MODES:
            raise InvalidConfigError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
        if gate_mode == "bypass":
            # Ablation switch: identical to running the branches unfused.
            return x_img, x_txt
        img_desc = self.visual(x_img)
        txt_desc = self.text(x_txt)
        return fuse_and_gate(
            img_desc, txt_desc, x_img, x_txt, self_gating=(gate_mode == "self_gating")
        )
