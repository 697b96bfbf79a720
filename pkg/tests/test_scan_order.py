import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from asmunet.scan_order import (ScanSequence, apply_perm, fixed_orders, flatten, gather_backward,
                                identity_perm, inverse_perm, is_bijection, order_by_score,
                                undo_reorder, unflatten)

dims_st = st.tuples(*[st.integers(1, 5)] * 3)


def _seq(tokens):
    return ScanSequence(tokens, identity_perm(tokens.shape[1]))


def test_flatten_single_voxel():
    fm = torch.randn(1, 4, 1, 1, 1)
    seq = flatten(fm)
    assert seq.tokens.shape == (1, 1, 4)
    assert torch.equal(seq.perm, torch.tensor([0]))


def test_flatten_canonical_order_w_fastest():
    a, b = torch.tensor([1.0, 2.0]), torch.tensor([3.0, 4.0])
    fm = torch.stack([a, b], dim=-1).reshape(1, 2, 2, 1, 1)  # voxel features along w
    assert torch.equal(flatten(fm).tokens[0], torch.stack([a, b]))
    fm = torch.arange(2 * 3 * 4, dtype=torch.float32).reshape(1, 1, 2, 3, 4)
    tok = flatten(fm).tokens[0, :, 0]
    # token index = w + W*(h + H*d)
    assert tok[1] == fm[0, 0, 1, 0, 0] and tok[2] == fm[0, 0, 0, 1, 0] and tok[6] == fm[0, 0, 0, 0, 1]


@settings(max_examples=30, deadline=None)
@given(dims=dims_st, l=st.integers(1, 4), seed=st.integers(0, 10 ** 6))
def test_unflatten_flatten_roundtrip(dims, l, seed):
    fm = torch.randn(2, l, *dims, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(unflatten(flatten(fm), dims), fm)


def test_fixed_orders_small():
    a, b, c = fixed_orders((2, 1, 1))
    assert a.tolist() == [0, 1] and b.tolist() == [1, 0] and c.tolist() == [0, 1]
    assert fixed_orders((2, 1, 2))[2].tolist() == [0, 2, 1, 3]


def test_fixed_order_c_is_d_fastest_enumeration():
    w, h, d = 3, 2, 4
    expected = [i + w * (j + h * k) for i in range(w) for j in range(h) for k in range(d)]
    assert fixed_orders((w, h, d))[2].tolist() == expected


@settings(max_examples=30, deadline=None)
@given(dims=dims_st)
def test_fixed_orders_are_bijections(dims):
    for p in fixed_orders(dims):
        assert is_bijection(p)


def test_order_by_score_sort_definition():
    seq = _seq(torch.randn(1, 3, 2))
    out = order_by_score(seq, torch.tensor([0.3, 0.1, 0.2]))
    assert out.perm.tolist() == [1, 2, 0]
    assert torch.equal(out.tokens[0], seq.tokens[0, [1, 2, 0]])


def test_order_by_score_all_equal_is_identity():
    seq = _seq(torch.randn(1, 7, 2))
    out = order_by_score(seq, torch.full((7,), 0.5))
    assert torch.equal(out.perm, torch.arange(7))


def test_order_by_score_errors():
    seq = _seq(torch.randn(1, 4, 2))
    with pytest.raises(ValueError):
        order_by_score(seq, torch.zeros(5))
    with pytest.raises(ValueError):
        order_by_score(seq, torch.tensor([0.0, float("nan"), 1.0, 2.0]))


@settings(max_examples=50, deadline=None)
@given(s=st.integers(1, 64), seed=st.integers(0, 10 ** 6), batched=st.booleans())
def test_sorted_scores_non_decreasing_and_stable(s, seed, batched):
    g = torch.Generator().manual_seed(seed)
    # few distinct values to force ties
    score = torch.randint(0, 4, (2, s) if batched else (s,), generator=g).float()
    out = order_by_score(_seq(torch.randn(2, s, 1, generator=g)), score)
    perm = out.perm if out.perm.dim() == 2 else out.perm.expand(2, -1)
    sc = score if score.dim() == 2 else score.expand(2, -1)
    read = torch.gather(sc, -1, perm)
    assert (read[:, 1:] >= read[:, :-1]).all()
    for b in range(2):
        for v in torch.unique(sc[b]):
            idx = perm[b][read[b] == v]
            assert (idx[1:] > idx[:-1]).all()  # ties keep canonical order


@pytest.mark.parametrize("kind", ["identity", "reverse", "random"])
def test_undo_reorder_roundtrip(kind):
    s = 13
    perm = {"identity": torch.arange(s), "reverse": torch.arange(s).flip(0),
            "random": torch.randperm(s, generator=torch.Generator().manual_seed(0))}[kind]
    tokens = torch.randn(2, s, 3)
    seq = ScanSequence(apply_perm(tokens, perm), perm)
    back = undo_reorder(seq)
    assert torch.equal(back.tokens, tokens)
    assert torch.equal(back.perm, torch.arange(s))


@settings(max_examples=40, deadline=None)
@given(s=st.integers(1, 200), seed=st.integers(0, 10 ** 6))
def test_undo_apply_identity_property(s, seed):
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(s, generator=g)
    tokens = torch.randn(1, s, 2, generator=g)
    assert torch.equal(apply_perm(apply_perm(tokens, perm), inverse_perm(perm)), tokens)
    assert torch.equal(undo_reorder(order_by_score(_seq(tokens), torch.randn(s, generator=g))).tokens,
                       tokens)


def test_gather_backward_identity_and_reverse():
    g = torch.randn(1, 5, 2)
    assert torch.equal(gather_backward(g, torch.arange(5)), g)
    g2 = torch.tensor([[[10.0], [20.0]]])
    assert gather_backward(g2, torch.tensor([1, 0]))[0, :, 0].tolist() == [20.0, 10.0]


def test_reorder_undo_gradient_is_identity():
    tokens = torch.randn(2, 9, 3, requires_grad=True)
    score = torch.randn(2, 9)
    out = undo_reorder(order_by_score(_seq(tokens), score)).tokens
    gy = torch.randn_like(out)
    (gx,) = torch.autograd.grad(out, tokens, gy)
    assert torch.equal(gx, gy)


def test_reorder_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(3)
    tokens = torch.randn(1, 16, 2, generator=g, dtype=torch.float64, requires_grad=True)
    score = torch.randn(16, generator=g, dtype=torch.float64)
    w = torch.randn(1, 16, 2, generator=g, dtype=torch.float64)
    pos = torch.linspace(0.5, 2.0, 16, dtype=torch.float64).view(1, 16, 1)

    def loss(t):
        # position-dependent weights, so the sort order matters to the loss
        return (order_by_score(_seq(t), score).tokens * w * pos).sum()

    (ga,) = torch.autograd.grad(loss(tokens), tokens)
    num = torch.zeros_like(tokens)
    h = 1e-6
    with torch.no_grad():
        for i in range(tokens.numel()):
            tp, tm = tokens.detach().clone(), tokens.detach().clone()
            tp.view(-1)[i] += h
            tm.view(-1)[i] -= h
            num.view(-1)[i] = (loss(tp) - loss(tm)) / (2 * h)
    assert torch.allclose(ga, num, rtol=1e-5, atol=1e-8)


def test_permutation_roundtrip_1000_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = int(rng.integers(1, 4097))
        tokens = torch.from_numpy(rng.normal(size=(1, s, 2)).astype(np.float32))
        score = torch.from_numpy(rng.normal(size=s).astype(np.float32))
        back = undo_reorder(order_by_score(_seq(tokens), score)).tokens
        assert torch.equal(back, tokens)


def test_scan_sequence_length_mismatch():
    with pytest.raises(ValueError):
        ScanSequence(torch.zeros(1, 3, 2), torch.arange(4))
