"""Toy image and text branches plus the joint fusion-aware forward.

The image branch is a small residual stack (GroupNorm, no BatchNorm so the
forward is a pure function of the parameters) and the text branch embeds
tokens and applies position-wise transform blocks. Both end in a
``feature_dim``-length vector and a K-way linear classifier. A JointModel
wires the two together and owns one attention-fusion module per fusion site;
the fusion parameters exist in every training regime so checkpoints and
same-seed parameter trajectories stay comparable across regimes.
"""

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .attention import AttentionFusion, global_avg_pool_2d, global_max_pool_1d
from .errors import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class BranchSpec:
    """Topology of one branch.

    widths holds channels (image) or hidden sizes (text) per block. A fusion
    site s means "after block s, before block s+1", so sites must leave at
    least one downstream block.
    """

    n_blocks: int = 3
    widths: tuple = (16, 32, 64)
    feature_dim: int = 64
    n_classes: int = 4
    fusion_sites: tuple = (0,)
    vocab_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "fusion_sites", tuple(int(s) for s in self.fusion_sites))
        if self.n_blocks < 2:
            raise InvalidConfigError("n_blocks must be >= 2, got %d" % self.n_blocks)
        if len(self.widths) != self.n_blocks:
            raise InvalidConfigError(
                "widths has %d entries for %d blocks" % (len(self.widths), self.n_blocks)
            )
        if any(w < 1 for w in self.widths):
            raise InvalidConfigError("block widths must be positive: %r" % (self.widths,))
        if self.feature_dim < 1 or self.n_classes < 2 or self.vocab_size < 2:
            raise InvalidConfigError("feature_dim, n_classes, vocab_size out of range")
        seen = set()
        for s in self.fusion_sites:
            if s < 0 or s > self.n_blocks - 2:
                raise InvalidConfigError(
                    "fusion site %d needs a downstream block (n_blocks=%d)" % (s, self.n_blocks)
                )
            if s in seen:
                raise InvalidConfigError("duplicate fusion site %d" % s)
            seen.add(s)


def _num_groups(channels):
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(_num_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_num_groups(out_ch), out_ch)
        if in_ch != out_ch or stride != 1:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.GroupNorm(_num_groups(out_ch), out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


class TransformBlock(nn.Module):
    """Position-wise residual MLP with a LayerNorm front."""

    def __init__(self, in_width, out_width):
        super().__init__()
        self.norm = nn.LayerNorm(in_width)
        self.expand = nn.Linear(in_width, out_width)
        self.contract = nn.Linear(out_width, out_width)
        if in_width != out_width:
            self.shortcut = nn.Linear(in_width, out_width, bias=False)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.contract(torch.relu(self.expand(self.norm(x))))
        return h + self.shortcut(x)


class ImageBranch(nn.Module):
    """Stem + residual blocks over single-channel grids -> (maps, X1, logits)."""

    def __init__(self, spec: BranchSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.stem = nn.Sequential(
            nn.Conv2d(1, w[0], 3, padding=1, bias=False),
            nn.GroupNorm(_num_groups(w[0]), w[0]),
            nn.ReLU(),
        )
        blocks = [ResidualBlock(w[0], w[0], stride=1)]
        for i in range(1, spec.n_blocks):
            blocks.append(ResidualBlock(w[i - 1], w[i], stride=2))
        self.blocks = nn.ModuleList(blocks)
        if w[-1] != spec.feature_dim:
            self.project = nn.Linear(w[-1], spec.feature_dim)
        else:
            self.project = nn.Identity()
        self.classifier = nn.Linear(spec.feature_dim, spec.n_classes)

    def stem_forward(self, images):
        if images.dim() != 3:
            raise InvalidInputError(
                "expected images shaped (batch, H, W), got %r" % (tuple(images.shape),)
            )
        return self.stem(images.unsqueeze(1))

    def feature_vector(self, maps):
        return self.project(global_avg_pool_2d(maps))

    def forward(self, images):
        x = self.stem_forward(images)
        maps = []
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        x1 = self.feature_vector(x)
        return maps, x1, self.classifier(x1)


class TextBranch(nn.Module):
    """Embedding + transform blocks over token sequences -> (seqs, X2, logits)."""

    def __init__(self, spec: BranchSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.embed = nn.Embedding(spec.vocab_size, w[0])
        blocks = [TransformBlock(w[0], w[0])]
        for i in range(1, spec.n_blocks):
            blocks.append(TransformBlock(w[i - 1], w[i]))
        self.blocks = nn.ModuleList(blocks)
        if w[-1] != spec.feature_dim:
            self.project = nn.Linear(w[-1], spec.feature_dim)
        else:
            self.project = nn.Identity()
        self.classifier = nn.Linear(spec.feature_dim, spec.n_classes)

    def embed_forward(self, tokens):
        if tokens.dim() != 2:
            raise InvalidInputError(
                "expected tokens shaped (batch, L), got %r" % (tuple(tokens.shape),)
            )
        if not (tokens.dtype == torch.int64 or tokens.dtype == torch.int32):
            raise InvalidInputError("token ids must be integers, got %s" % tokens.dtype)
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.spec.vocab_size):
            raise InvalidInputError(
                "token ids outside [0, %d)" % self.spec.vocab_size
            )
        return self.embed(tokens.long())

    def feature_vector(self, seq):
        return self.project(global_max_pool_1d(seq))

    def forward(self, tokens):
        t = self.embed_forward(tokens)
        seqs = []
        for block in self.blocks:
            t = block(t)
            seqs.append(t)
        x2 = self.feature_vector(t)
        return seqs, x2, self.classifier(x2)


def deterministic_init(module, seed):
    """Re-initialize every parameter from a local generator.

    Uses the same distributions as the torch defaults (uniform with bound
    1/sqrt(fan_in) for affine maps, standard normal for embeddings, ones and
    zeros for norms) but drawn from a private generator so two models built
    with the same seed are bit-identical regardless of global RNG state.
    Walk order is module registration order.
    """
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.numel() // m.weight.shape[0]
                bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.Embedding):
                m.weight.normal_(0.0, 1.0, generator=gen)
            elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
    return module


def build_image_branch(spec: BranchSpec, seed) -> ImageBranch:
    return deterministic_init(ImageBranch(spec), seed)


def build_text_branch(spec: BranchSpec, seed) -> TextBranch:
    return deterministic_init(TextBranch(spec), seed)


class JointModel(nn.Module):
    """Both branches, the per-site fusion modules, and the fusion head.

    Registration order (image branch, text branch, fusion modules, fusion
    head) is the documented checkpoint parameter order.
    """

    def __init__(self, image_spec: BranchSpec, text_spec: BranchSpec, seed, gate_mode="sigmoid"):
        super().__init__()
        if image_spec.feature_dim != text_spec.feature_dim:
            raise InvalidConfigError(
                "branch feature dims differ: %d vs %d"
                % (image_spec.feature_dim, text_spec.feature_dim)
            )
        if image_spec.n_classes != text_spec.n_classes:
            raise InvalidConfigError("branch class counts differ")
        if image_spec.fusion_sites != text_spec.fusion_sites:
            raise InvalidConfigError(
                "fusion sites differ between branches: %r vs %r"
                % (image_spec.fusion_sites, text_spec.fusion_sites)
            )
        self.image_spec = image_spec
        self.text_spec = text_spec
        self.gate_mode = gate_mode
        self.seed = int(seed)
        self.image_branch = ImageBranch(image_spec)
        self.text_branch = TextBranch(text_spec)
        self.fusions = nn.ModuleList(
            AttentionFusion(image_spec.widths[s], text_spec.widths[s])
            for s in image_spec.fusion_sites
        )
        from .fusion_head import FusionHead

        self.fusion_head = FusionHead(image_spec.feature_dim, image_spec.n_classes)
        deterministic_init(self, seed)

    @property
    def n_classes(self):
        return self.image_spec.n_classes

    def forward(self, images, tokens, attention_enabled=False, gate_mode=None):
        mode = self.gate_mode if gate_mode is None else gate_mode
        sites = {s: i for i, s in enumerate(self.image_spec.fusion_sites)}
        x = self.image_branch.stem_forward(images)
        t = self.text_branch.embed_forward(tokens)
        for b in range(max(len(self.image_branch.blocks), len(self.text_branch.blocks))):
            if b < len(self.image_branch.blocks):
                x = self.image_branch.blocks[b](x)
            if b < len(self.text_branch.blocks):
                t = self.text_branch.blocks[b](t)
            if attention_enabled and b in sites:
                x, t = self.fusions[sites[b]](x, t, gate_mode=mode)
        x1 = self.image_branch.feature_vector(x)
        x2 = self.text_branch.feature_vector(t)
        return self.image_branch.classifier(x1), self.text_branch.classifier(x2), x1, x2


def forward_joint(model: JointModel, images, tokens, attention_enabled=False):
    """Run both branches, fusing at each site when attention is enabled."""
    return model(images, tokens, attention_enabled=attention_enabled)
