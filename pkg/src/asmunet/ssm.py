"""Selective state-space scan and the Mamba layer built on it.

The recurrence, per batch element b and channel m, with state size N:

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t,   h_0 = 0
    y_t = <C_t, h_t> + D * x_t

is evaluated sequentially in one left-to-right pass (O(s * M * N)). The
backward pass recomputes the states and runs the adjoint recurrence right to
left.
"""

from __future__ import annotations

import math
import os

import numba
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from numba import njit, prange


def set_scan_threads(n=None):
    """Cap numba worker threads; defaults to ``$ASM_SCAN_THREADS`` if set."""
    if n is None:
        env = os.environ.get("ASM_SCAN_THREADS")
        if not env:
            return
        n = int(env)
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


set_scan_threads()


@njit(parallel=True, cache=True)
def _scan_fwd(x, delta, dA, Bm, Cm, D, y):
    # dA[b, t, m, n] = exp(delta[b, t, m] * A[m, n]), precomputed vectorised
    nb, s, nm = x.shape
    nn_ = Bm.shape[2]
    for b in prange(nb):
        h = np.zeros((nm, nn_), dtype=x.dtype)
        for t in range(s):
            for m in range(nm):
                u = delta[b, t, m] * x[b, t, m]
                acc = 0.0
                for n in range(nn_):
                    h[m, n] = dA[b, t, m, n] * h[m, n] + u * Bm[b, t, n]
                    acc += Cm[b, t, n] * h[m, n]
                y[b, t, m] = acc + D[m] * x[b, t, m]


@njit(parallel=True, cache=True)
def _scan_bwd(x, delta, dA, Bm, Cm, D, gy, gx, gdelta, gz, gB, gC, gD):
    # gz[b, t, m, n] = dL/d(delta*A) at (b, t, m, n); gD holds per-sample partials
    nb, s, nm = x.shape
    nn_ = Bm.shape[2]
    for b in prange(nb):
        hs = np.empty((s + 1, nm, nn_), dtype=x.dtype)
        gh = np.zeros((nm, nn_), dtype=x.dtype)
        hs[0] = 0.0
        for t in range(s):
            for m in range(nm):
                u = delta[b, t, m] * x[b, t, m]
                for n in range(nn_):
                    hs[t + 1, m, n] = dA[b, t, m, n] * hs[t, m, n] + u * Bm[b, t, n]
        for t in range(s - 1, -1, -1):
            for m in range(nm):
                g = gy[b, t, m]
                dt = delta[b, t, m]
                xt = x[b, t, m]
                gxt = g * D[m]
                gD[b, m] += g * xt
                gdt = 0.0
                for n in range(nn_):
                    ght = gh[m, n] + g * Cm[b, t, n]
                    gC[b, t, n] += g * hs[t + 1, m, n]
                    a = dA[b, t, m, n]
                    gz[b, t, m, n] = ght * hs[t, m, n] * a
                    gdt += ght * Bm[b, t, n] * xt
                    gB[b, t, n] += ght * dt * xt
                    gxt += ght * dt * Bm[b, t, n]
                    gh[m, n] = a * ght
                gx[b, t, m] = gxt
                gdelta[b, t, m] = gdt


def _np(t):
    return np.ascontiguousarray(t.detach().cpu().numpy())


def _check_finite(*arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise FloatingPointError("selective_scan received a non-finite value")


def _decay(delta, A):
    # torch's vectorised exp is several times faster than numpy's here
    return torch.exp(torch.from_numpy(delta).unsqueeze(-1) * torch.from_numpy(A)).numpy()


def scan_forward_np(x, delta, A, B, C, D, dA=None):
    """Numpy entry point: x, delta (nb, s, M); A (M, N); B, C (nb, s, N); D (M,)."""
    _check_finite(x, delta, A, B, C, D)
    if dA is None:
        dA = _decay(delta, A)
    y = np.empty_like(x)
    _scan_fwd(x, delta, dA, B, C, D, y)
    return y


def scan_backward_np(x, delta, A, B, C, D, gy, dA=None):
    nb, s, nm = x.shape
    if dA is None:
        dA = _decay(delta, A)
    gx = np.empty_like(x)
    gdelta = np.empty_like(delta)
    gz = np.empty_like(dA)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros((nb,) + D.shape, dtype=x.dtype)
    _scan_bwd(x, delta, dA, B, C, D, np.ascontiguousarray(gy), gx, gdelta, gz, gB, gC, gD)
    gdelta += np.einsum("btmn,mn->btm", gz, A)
    gA = np.einsum("btmn,btm->mn", gz, delta)
    # fixed-order reduction over the batch keeps results thread-count independent
    return gx, gdelta, gA, gB, gC, gD.sum(axis=0)


class SelectiveScanFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, delta, A, B, C, D):
        arrays = [_np(t) for t in (x, delta, A, B, C, D)]
        dA = _decay(arrays[1], arrays[2])
        y = scan_forward_np(*arrays, dA=dA)
        ctx.save_for_backward(x, delta, A, B, C, D)
        ctx.decay = dA
        return torch.from_numpy(y).to(x.device)

    @staticmethod
    def backward(ctx, grad_y):
        arrays = [_np(t) for t in ctx.saved_tensors]
        grads = scan_backward_np(*arrays, _np(grad_y), dA=ctx.decay)
        ctx.decay = None
        dev = grad_y.device
        return tuple(torch.from_numpy(np.ascontiguousarray(g)).to(dev) for g in grads)


def selective_scan(x, delta, A, B, C, D):
    """Run the selective scan.

    Shapes: ``x``/``delta`` (batch, s, M), ``A`` (M, N), ``B``/``C``
    (batch, s, N), ``D`` (M,). Unbatched 2D ``x`` (s, M) is accepted too.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x, delta, B, C = (t.unsqueeze(0) for t in (x, delta, B, C))
    if x.shape[1] < 1:
        raise ValueError("sequence length must be >= 1")
    y = SelectiveScanFn.apply(x, delta, A, B, C, D)
    return y.squeeze(0) if squeeze else y


def selective_scan_backward(x, delta, A, B, C, D, grad_y):
    """Explicit reverse pass; returns ``(gx, gdelta, gA, gB, gC, gD)`` tensors."""
    squeeze = x.dim() == 2
    if squeeze:
        x, delta, B, C, grad_y = (t.unsqueeze(0) for t in (x, delta, B, C, grad_y))
    grads = scan_backward_np(*[_np(t) for t in (x, delta, A, B, C, D, grad_y)])
    grads = [torch.from_numpy(g) for g in grads]
    if squeeze:
        for i in (0, 1, 3, 4):
            grads[i] = grads[i].squeeze(0)
    return tuple(grads)


class MambaLayer(nn.Module):
    """Pre-norm Mamba block with a residual connection.

    norm -> in_proj (two streams of width expand*d_model) -> causal depthwise
    conv + SiLU on stream one -> selective scan -> gate by SiLU(stream two)
    -> out_proj -> add input.
    """

    def __init__(self, d_model, d_state=8, expand=2, d_conv=4, dt_rank=None,
                 dt_min=1e-3, dt_max=1e-1, residual=True):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.d_inner = expand * d_model
        self.d_conv = d_conv
        self.dt_rank = dt_rank or math.ceil(d_model / 16)
        self.residual = residual

        self.norm = nn.LayerNorm(d_model)
        self.in_proj = nn.Linear(d_model, 2 * self.d_inner, bias=False)
        self.conv1d = nn.Conv1d(self.d_inner, self.d_inner, d_conv, groups=self.d_inner,
                                padding=d_conv - 1)
        self.x_proj = nn.Linear(self.d_inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, self.d_inner, bias=True)
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)

        dt_std = self.dt_rank ** -0.5
        nn.init.uniform_(self.dt_proj.weight, -dt_std, dt_std)
        dt = torch.exp(torch.rand(self.d_inner) * (math.log(dt_max) - math.log(dt_min))
                       + math.log(dt_min))
        with torch.no_grad():
            # inverse softplus
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        A = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(self.d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(self.d_inner))

    def ssm_inputs(self, x):
        """Everything upstream of the scan, for tokens ``x`` (B, s, d_model)."""
        s = x.shape[1]
        xz = self.in_proj(self.norm(x))
        u, z = xz.chunk(2, dim=-1)
        u = self.conv1d(u.transpose(1, 2))[..., :s].transpose(1, 2)
        u = F.silu(u)
        dt, B, C = torch.split(self.x_proj(u), [self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        return u, delta, A, B.contiguous(), C.contiguous(), z

    def forward(self, x):
        u, delta, A, B, C, z = self.ssm_inputs(x)
        y = selective_scan(u.contiguous(), delta.contiguous(), A, B, C, self.D)
        out = self.out_proj(y * F.silu(z))
        return x + out if self.residual else out


def mamba_stack(d_model, depth, **kwargs):
    return nn.Sequential(*[MambaLayer(d_model, **kwargs) for _ in range(depth)])
