"""Adaptive scanning Mamba block.

Each branch scores every voxel token, sorts the tokens by that score, runs a
Mamba stack over the sorted sequence (with the score appended as an extra
channel), projects back to the input width and restores canonical order.
Branch outputs are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .scan_order import (ScanSequence, apply_perm, fixed_orders, flatten, inverse_perm,
                         order_by_score, undo_reorder, unflatten)
from .ssm import mamba_stack

SCORE_MODES = ("both", "group_only", "individual_only", "none")


@dataclass
class AsmConfig:
    n_branches: int = 1
    mamba_depth: int = 2
    n_g: int = 64
    residual: bool = True
    score_mode: str = "both"
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    generator_depth: int = 1
    group_init_std: float = 0.02

    def __post_init__(self):
        if self.n_branches < 0:
            raise ValueError("n_branches must be >= 0")
        if self.n_g < 2:
            raise ValueError("n_g must be >= 2")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")

    def mamba_kwargs(self):
        return dict(d_state=self.d_state, expand=self.expand, d_conv=self.d_conv)


def interpolate_embedding(values, s):
    """Linearly resample ``values`` (n_g,) onto ``s`` points with aligned endpoints."""
    n_g = values.shape[0]
    pos = torch.linspace(0.0, n_g - 1, s, dtype=values.dtype, device=values.device)
    lo = pos.floor().long().clamp(max=n_g - 2)
    frac = pos - lo.to(values.dtype)
    return values[lo] * (1 - frac) + values[lo + 1] * frac


class GroupScanEmbedding(nn.Module):
    def __init__(self, n_g=64, init_std=0.02):
        super().__init__()
        if n_g < 2:
            raise ValueError("n_g must be >= 2")
        self.values = nn.Parameter(torch.randn(n_g) * init_std)

    def forward(self, s):
        return torch.sigmoid(interpolate_embedding(self.values, s))


def group_score(emb, s):
    return emb(s)


class IndividualScoreGenerator(nn.Module):
    """Scores tokens from three fixed-order Mamba passes over the same input."""

    def __init__(self, width, depth=1, **mamba_kwargs):
        super().__init__()
        self.stacks = nn.ModuleList([mamba_stack(width, depth, **mamba_kwargs) for _ in range(3)])
        self.head = nn.Linear(3 * width, 1)

    def pathways(self, tokens, dims):
        outs = []
        for stack, perm in zip(self.stacks, fixed_orders(dims, tokens.device)):
            y = stack(apply_perm(tokens, perm))
            outs.append(apply_perm(y, inverse_perm(perm)))
        return outs

    def forward(self, tokens, dims):
        feats = torch.cat(self.pathways(tokens, dims), dim=-1)
        return torch.sigmoid(self.head(feats).squeeze(-1))


def individual_score(tokens, gen, dims):
    return gen(tokens, dims)


def adaptive_score(g, i):
    if g.shape[-1] != i.shape[-1]:
        raise ValueError(f"score length mismatch: {g.shape[-1]} vs {i.shape[-1]}")
    return g + i


class AsmBranch(nn.Module):
    def __init__(self, width, cfg):
        super().__init__()
        self.score_mode = cfg.score_mode
        self.group = GroupScanEmbedding(cfg.n_g, cfg.group_init_std)
        self.generator = IndividualScoreGenerator(width, cfg.generator_depth, **cfg.mamba_kwargs())
        self.stack = mamba_stack(width + 1, cfg.mamba_depth, **cfg.mamba_kwargs())
        self.proj = nn.Linear(width + 1, width, bias=False)
        # test hook: scales the appended score channel
        self.score_channel_scale = 1.0

    def score(self, tokens, dims):
        b, s, _ = tokens.shape
        if self.score_mode == "none":
            return tokens.new_zeros(b, s)
        if self.score_mode == "group_only":
            return self.group(s).expand(b, s)
        ind = self.generator(tokens, dims)
        if self.score_mode == "individual_only":
            return ind
        return adaptive_score(self.group(s).expand(b, s), ind)

    def run(self, tokens, dims):
        """Branch pathway; returns a dict with the canonical-order output and
        the intermediate score and sorted sequence."""
        score = self.score(tokens, dims)
        scored = torch.cat([tokens, self.score_channel_scale * score.unsqueeze(-1)], dim=-1)
        seq = order_by_score(ScanSequence(scored, torch.arange(tokens.shape[1],
                                                               device=tokens.device)), score)
        y = self.proj(self.stack(seq.tokens))
        out = undo_reorder(ScanSequence(y, seq.perm)).tokens
        return {"out": out, "score": score, "sorted": seq}

    def forward(self, tokens, dims):
        return self.run(tokens, dims)["out"]


class AsmBlock(nn.Module):
    def __init__(self, width, cfg):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleList([AsmBranch(width, cfg) for _ in range(cfg.n_branches)])

    def forward(self, fm):
        if len(self.branches) == 0:
            return fm
        dims = tuple(fm.shape[2:])
        tokens = flatten(fm).tokens
        outs = [branch(tokens, dims) for branch in self.branches]
        y = outs[0] if len(outs) == 1 else torch.stack(outs).mean(dim=0)
        if self.cfg.residual:
            y = tokens + y
        return unflatten(ScanSequence(y, torch.arange(y.shape[1], device=y.device)), dims)


def asm_forward(fm, block):
    return block(fm)
