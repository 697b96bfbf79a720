"""Flattening feature maps into token sequences and reordering them.

Feature maps use the conv layout ``(B, L, W, H, D)``. Flattening yields tokens
``(B, s, L)`` with ``s = W*H*D`` in canonical order (w fastest, then h, then d).
A permutation ``perm`` is stored as "output position i reads source index
perm[i]", either shared ``(s,)`` or per sample ``(B, s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class ScanSequence:
    tokens: torch.Tensor  # (B, s, L)
    perm: torch.Tensor  # (s,) or (B, s), long

    def __post_init__(self):
        if self.perm.shape[-1] != self.tokens.shape[1]:
            raise ValueError(
                f"permutation length {self.perm.shape[-1]} != sequence length {self.tokens.shape[1]}")


def identity_perm(s, device=None):
    return torch.arange(s, device=device)


def inverse_perm(perm):
    inv = torch.empty_like(perm)
    src = torch.arange(perm.shape[-1], device=perm.device).expand_as(perm)
    inv.scatter_(-1, perm, src.contiguous())
    return inv


def is_bijection(perm):
    s = perm.shape[-1]
    ref = torch.arange(s, device=perm.device)
    return bool((torch.sort(perm, dim=-1).values == ref).all())


def _gather_tokens(tokens, perm):
    if perm.dim() == 1:
        return tokens.index_select(1, perm)
    return torch.gather(tokens, 1, perm.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


class _Reorder(torch.autograd.Function):
    """Token gather whose backward applies the inverse permutation."""

    @staticmethod
    def forward(ctx, tokens, perm):
        ctx.save_for_backward(perm)
        return _gather_tokens(tokens, perm)

    @staticmethod
    def backward(ctx, grad_out):
        (perm,) = ctx.saved_tensors
        return gather_backward(grad_out, perm), None


def apply_perm(tokens, perm):
    return _Reorder.apply(tokens, perm)


def gather_backward(grad_out, perm):
    """Gradient of ``apply_perm`` w.r.t. its tokens.

    Reordering is a bijection, so the adjoint is the inverse gather; the
    ordering itself is piecewise constant and carries no gradient.
    """
    return _gather_tokens(grad_out, inverse_perm(perm))


def flatten(fm):
    b, l, w, h, d = fm.shape
    tokens = fm.permute(0, 4, 3, 2, 1).reshape(b, w * h * d, l)
    return ScanSequence(tokens, identity_perm(w * h * d, fm.device))


def unflatten(seq, dims):
    w, h, d = dims
    if not bool((seq.perm == identity_perm(seq.perm.shape[-1], seq.perm.device)).all()):
        seq = undo_reorder(seq)
    b, s, l = seq.tokens.shape
    return seq.tokens.reshape(b, d, h, w, l).permute(0, 4, 3, 2, 1)


def fixed_orders(dims, device=None):
    """The three fixed scan orders over a ``(w, h, d)`` grid.

    A: canonical raster (w fastest). B: A reversed. C: axis-swapped raster
    with d fastest, then h, then w.
    """
    w, h, d = dims
    a = identity_perm(w * h * d, device)
    grid = a.reshape(d, h, w)  # grid[k, j, i] = canonical index of (i, j, k)
    c = grid.permute(2, 1, 0).reshape(-1)
    return [a, a.flip(0), c]


def order_by_score(seq, score):
    """Sort tokens by ascending score, ties kept in current order.

    ``score`` is indexed in the sequence's *current* token order; the returned
    permutation is composed so it still maps to canonical indices.
    """
    n = seq.tokens.shape[1]
    if score.shape[-1] != n:
        raise ValueError(f"score length {score.shape[-1]} != sequence length {n}")
    score = score.detach()
    if torch.isnan(score).any():
        raise ValueError("score contains NaN")
    order = torch.argsort(score, dim=-1, stable=True)
    tokens = apply_perm(seq.tokens, order)
    perm = seq.perm
    if order.dim() == 1 and perm.dim() == 1:
        composed = perm[order]
    else:
        b = seq.tokens.shape[0]
        composed = torch.gather(perm.expand(b, -1), -1, order.expand(b, -1))
    return ScanSequence(tokens, composed)


def undo_reorder(seq):
    tokens = apply_perm(seq.tokens, inverse_perm(seq.perm))
    return ScanSequence(tokens, identity_perm(seq.tokens.shape[1], seq.tokens.device))
