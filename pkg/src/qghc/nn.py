"""Neural building blocks: grouped 2-D convolution (shared or per-sample
kernels), channel shuffle, batch normalization, weight normalization,
pooling, linear, embedding, and a GRU question encoder.

All ops take and return graph nodes and register their own backward rules.
Convolution runs on im2col patches so the inner loops are BLAS matmuls; the
per-sample kernel path (rank-5 kernel stacks) exists because predicted
kernels differ across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Node, Parameter, add, apply_op, leaf, matmul, mul,
                       reshape, scale_add, sigmoid, slice_axis, tanh)
from .tensor import Rng, ShapeError, Tensor, init_kaiming_uniform

WN_EPS = 1e-8


@dataclass(frozen=True)
class ConvSpec:
    """Structural contract of one convolution stage: stride 1, zero padding
    that preserves spatial size, no bias."""

    in_channels: int
    out_channels: int
    groups: int
    kernel: tuple[int, int]

    stride = 1

    def __post_init__(self):
        if self.kernel not in ((1, 1), (3, 3)):
            raise ShapeError(f"kernel {self.kernel} not in {{(1,1),(3,3)}}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible "
                f"by groups {self.groups}")

    @property
    def padding(self) -> int:
        return (self.kernel[0] - 1) // 2

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(B,C,H,W) -> patches (B, Ho*Wo, C*kh*kw) plus the output spatial size."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    """Scatter-add patch gradients back onto the (padded) input."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g6 = gcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    gx = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[..., i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx


def conv2d_grouped(x: Node, kernels: Node, groups: int, stride: int = 1,
                   padding: int | None = None) -> Node:
    """Grouped 2-D convolution with zero padding.

    ``kernels`` is (C_out, C_in/G, kH, kW) for kernels shared across the
    batch, or (B, C_out, C_in/G, kH, kW) for per-sample (predicted) kernels.
    Group g consumes input channels [g*C_in/G, (g+1)*C_in/G) and produces
    output channels [g*C_out/G, (g+1)*C_out/G).
    """
    if x.value.rank != 4:
        raise ShapeError(f"conv input must be (B,C,H,W), got {x.shape}")
    b, c_in, _, _ = x.shape
    per_sample = kernels.value.rank == 5
    kshape = kernels.shape[1:] if per_sample else kernels.shape
    if len(kshape) != 4:
        raise ShapeError(f"kernel shape {kernels.shape} not rank 4 or 5")
    c_out, cinpg, kh, kw = kshape
    if per_sample and kernels.shape[0] != b:
        raise ShapeError(f"per-sample kernels batch {kernels.shape[0]} != input batch {b}")
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in}->{c_out}) not divisible by groups {groups}")
    if cinpg != c_in // groups:
        raise ShapeError(f"kernel expects {cinpg} channels/group, input has {c_in // groups}")
    if padding is None:
        padding = (kh - 1) // 2
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, kernels, groups, per_sample)

    cols, ho, wo = _im2col(x.array, kh, kw, stride, padding)
    k = cinpg * kh * kw
    coutpg = c_out // groups
    karr = kernels.array
    outs = []
    for g in range(groups):
        cg = cols[:, :, g * k:(g + 1) * k]
        if per_sample:
            wg = karr[:, g * coutpg:(g + 1) * coutpg].reshape(b, coutpg, k)
            outs.append(np.matmul(cg, wg.transpose(0, 2, 1)))
        else:
            wg = karr[g * coutpg:(g + 1) * coutpg].reshape(coutpg, k)
            outs.append(cg @ wg.T)
    out = np.concatenate(outs, axis=2).transpose(0, 2, 1).reshape(b, c_out, ho, wo)

    x_shape = x.shape

    def rule(gout):
        gp = gout.reshape(b, c_out, ho * wo).transpose(0, 2, 1)
        need_x = x.requires_grad
        need_k = kernels.requires_grad
        gcols = np.zeros(cols.shape, dtype=gout.dtype) if need_x else None
        gk = np.zeros(kernels.shape, dtype=gout.dtype) if need_k else None
        for g in range(groups):
            go = gp[:, :, g * coutpg:(g + 1) * coutpg]
            cg = cols[:, :, g * k:(g + 1) * k]
            if per_sample:
                wg = karr[:, g * coutpg:(g + 1) * coutpg].reshape(b, coutpg, k)
                if need_x:
                    gcols[:, :, g * k:(g + 1) * k] = np.matmul(go, wg)
                if need_k:
                    gk[:, g * coutpg:(g + 1) * coutpg] = np.matmul(
                        go.transpose(0, 2, 1), cg).reshape(b, coutpg, cinpg, kh, kw)
            else:
                wg = karr[g * coutpg:(g + 1) * coutpg].reshape(coutpg, k)
                if need_x:
                    gcols[:, :, g * k:(g + 1) * k] = go @ wg
                if need_k:
                    gk[g * coutpg:(g + 1) * coutpg] = np.tensordot(
                        go, cg, axes=([0, 1], [0, 1])).reshape(coutpg, cinpg, kh, kw)
        gx = _col2im(gcols, x_shape, kh, kw, stride, padding) if need_x else None
        return gx, gk

    return apply_op(Tensor(out), (x, kernels), rule)


def _conv1x1(x: Node, kernels: Node, groups: int, per_sample: bool) -> Node:
    """1x1 stride-1 convolution as one batched matmul over channel blocks;
    no patch extraction, so nothing gets transposed or copied."""
    b, c_in, h, w = x.shape
    p = h * w
    cpg = c_in // groups
    xr = x.array.reshape(b, groups, cpg, p)
    if per_sample:
        c_out = kernels.shape[1]
        kb = kernels.array.reshape(b, groups, c_out // groups, cpg)
    else:
        c_out = kernels.shape[0]
        kb = kernels.array.reshape(groups, c_out // groups, cpg)[None]
    out = np.matmul(kb, xr).reshape(b, c_out, h, w)

    def rule(g):
        g4 = g.reshape(b, groups, c_out // groups, p)
        gx = None
        gk = None
        if x.requires_grad:
            gx = np.matmul(kb.transpose(0, 1, 3, 2), g4).reshape(b, c_in, h, w)
        if kernels.requires_grad:
            gk_blocks = np.matmul(g4, xr.transpose(0, 1, 3, 2))
            if per_sample:
                gk = gk_blocks.reshape(kernels.shape)
            else:
                gk = gk_blocks.sum(axis=0).reshape(kernels.shape)
        return gx, gk

    return apply_op(Tensor(out), (x, kernels), rule)


# ---------------------------------------------------------------------------
# channel shuffle
# ---------------------------------------------------------------------------

def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Output channel j*g+i reads input channel i*(C/g)+j (reshape-transpose)."""
    if channels % groups:
        raise ShapeError(f"channels {channels} not divisible by shuffle groups {groups}")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: Node, groups: int) -> Node:
    if x.value.rank != 4:
        raise ShapeError(f"channel_shuffle input must be (B,C,H,W), got {x.shape}")
    perm = shuffle_permutation(x.shape[1], groups)
    inv = np.argsort(perm)
    out = Tensor(x.array[:, perm])
    return apply_op(out, (x,), lambda g: (g[:, inv],))


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNorm2d:
    """Per-channel batch normalization with affine parameters and running
    statistics (momentum 0.1, eps 1e-5). Train mode normalizes by batch
    statistics over (B,H,W) and updates the running averages; eval mode is a
    fixed per-channel affine map."""

    def __init__(self, name: str, channels: int, dtype=np.float32,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", Tensor(np.ones(channels, dtype=dtype)), "qi")
        self.beta = Parameter(f"{name}.beta", Tensor(np.zeros(channels, dtype=dtype)), "qi")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def named_state(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def forward(self, x: Node, train: bool) -> Node:
        return batch_norm(x, self, train)


def batch_norm(x: Node, state: BatchNorm2d, train: bool) -> Node:
    if x.value.rank != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm input {x.shape} incompatible with {state.channels} channels")
    b, c, h, w = x.shape
    xv = x.array
    gamma = state.gamma.node
    beta = state.beta.node
    ga = gamma.array.reshape(1, c, 1, 1)
    be = beta.array.reshape(1, c, 1, 1)
    axes = (0, 2, 3)

    if train:
        m = b * h * w
        if m < 2:
            raise ShapeError(f"batch_norm train mode needs B*H*W >= 2, got {m}")
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        sinv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xv - mu.reshape(1, c, 1, 1)) * sinv.reshape(1, c, 1, 1)
        out = ga * xhat + be
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * var

        def rule(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * ga
            mean_dxhat = dxhat.mean(axis=axes, keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = sinv.reshape(1, c, 1, 1) * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
            return dx, dgamma, dbeta

        return apply_op(Tensor(out.astype(xv.dtype, copy=False)), (x, gamma, beta), rule)

    sinv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (xv - state.running_mean.reshape(1, c, 1, 1)) * sinv.reshape(1, c, 1, 1)
    out = ga * xhat + be

    def rule(g):
        dx = g * ga * sinv.reshape(1, c, 1, 1)
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return apply_op(Tensor(out.astype(xv.dtype, copy=False)), (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# weight normalization
# ---------------------------------------------------------------------------

def weight_normalize(v: Node, gain: Node | None = None, batched: bool = False) -> Node:
    """w[c] = gain[c] * v[c] / max(||v[c]||_2, 1e-8) per output-channel slice.

    ``batched`` treats the two leading axes as (sample, channel), the layout
    of per-sample predicted kernel stacks; gain None fixes the gain at 1.
    """
    lead = 2 if batched else 1
    if v.value.rank <= lead:
        raise ShapeError(f"weight_normalize needs rank > {lead}, got {v.shape}")
    red = tuple(range(lead, v.value.rank))
    varr = v.array
    norms = np.sqrt((varr * varr).sum(axis=red))
    r = np.maximum(norms, WN_EPS)
    active = (norms > WN_EPS).astype(varr.dtype)
    bshape = r.shape + (1,) * len(red)
    r_b = r.reshape(bshape)
    if gain is None:
        garr = np.ones_like(r)
        parents: tuple[Node, ...] = (v,)
    else:
        if gain.shape != r.shape:
            raise ShapeError(f"gain shape {gain.shape} != channel shape {r.shape}")
        garr = gain.array
        parents = (v, gain)
    out = varr * (garr / r).reshape(bshape)

    def rule(g):
        dot = (g * varr).sum(axis=red)
        gv = g * (garr / r).reshape(bshape) \
            - varr * (active * garr * dot / (r ** 3)).reshape(bshape)
        if gain is None:
            return (gv,)
        return gv, dot / r

    return apply_op(Tensor(out), parents, rule)


# ---------------------------------------------------------------------------
# pooling / linear / embedding
# ---------------------------------------------------------------------------

def global_avg_pool(x: Node) -> Node:
    if x.value.rank != 4:
        raise ShapeError(f"global_avg_pool input must be (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    out = Tensor(x.array.mean(axis=(2, 3)))

    def rule(g):
        return (np.broadcast_to(g.reshape(b, c, 1, 1) / (h * w), (b, c, h, w)).copy(),)

    return apply_op(out, (x,), rule)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    if x.value.rank != 2 or weight.value.rank != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear shapes: {x.shape} x {weight.shape}")
    out = x.array @ weight.array
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.array

    def rule(g):
        gx = g @ weight.array.T if x.requires_grad else None
        gw = x.array.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return apply_op(Tensor(out), parents, rule)


def embedding_lookup(tokens: np.ndarray, table: Node) -> Node:
    """Row gather: tokens (T,) or (B,T) onto table (V,E)."""
    tokens = np.asarray(tokens)
    v, e = table.shape
    if tokens.size == 0:
        raise ShapeError("embedding_lookup on empty token sequence")
    if tokens.min() < 0 or tokens.max() >= v:
        raise IndexError(f"token index out of range [0, {v}): "
                         f"min={tokens.min()}, max={tokens.max()}")
    out = Tensor(table.array[tokens])

    def rule(g):
        gt = np.zeros((v, e), dtype=g.dtype)
        np.add.at(gt, tokens.reshape(-1), g.reshape(-1, e))
        return (gt,)

    return apply_op(out, (table,), rule)


# ---------------------------------------------------------------------------
# layers (parameter holders)
# ---------------------------------------------------------------------------

class Conv2d:
    """Convolution layer owning a shared kernel parameter; no bias (batch
    norm follows every convolution in this codebase)."""

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int, groups: int = 1, stride: int = 1, *,
                 rng: Rng, dtype=np.float32, role: str = "qi"):
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"channels ({in_channels}->{out_channels}) not divisible "
                             f"by groups {groups}")
        self.groups = groups
        self.stride = stride
        shape = (out_channels, in_channels // groups, kernel, kernel)
        fan_in = (in_channels // groups) * kernel * kernel
        value = init_kaiming_uniform(shape, fan_in, rng, dtype)
        self.kernel = Parameter(f"{name}.kernel", value, role)

    @classmethod
    def from_spec(cls, name: str, spec: ConvSpec, rng: Rng, dtype=np.float32) -> "Conv2d":
        return cls(name, spec.in_channels, spec.out_channels, spec.kernel[0],
                   groups=spec.groups, rng=rng, dtype=dtype)

    def parameters(self):
        return [self.kernel]

    def forward(self, x: Node) -> Node:
        return conv2d_grouped(x, self.kernel.node, self.groups, stride=self.stride)


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: Rng,
                 dtype=np.float32, bias: bool = True, role: str = "qi",
                 zero_init: bool = False):
        # zero_init is for final classifier layers: logits start uniform.
        weight = (Tensor(np.zeros((in_dim, out_dim), dtype=dtype)) if zero_init
                  else init_kaiming_uniform((in_dim, out_dim), in_dim, rng, dtype))
        self.weight = Parameter(f"{name}.weight", weight, role)
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(out_dim, dtype=dtype)),
                              role, bias=True) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias else [])

    def forward(self, x: Node) -> Node:
        return linear(x, self.weight.node, self.bias.node if self.bias else None)


class Embedding:
    def __init__(self, name: str, vocab: int, dim: int, rng: Rng, dtype=np.float32):
        self.table = Parameter(f"{name}.table",
                               init_kaiming_uniform((vocab, dim), dim, rng, dtype), "qi")

    def parameters(self):
        return [self.table]

    def forward(self, tokens: np.ndarray) -> Node:
        return embedding_lookup(tokens, self.table.node)


class GRU:
    """Single-layer GRU; ``encode`` runs the recurrence over a full sequence
    and returns the final hidden state."""

    def __init__(self, name: str, in_dim: int, hidden: int, rng: Rng, dtype=np.float32):
        self.hidden = hidden
        self.dtype = dtype

        def fc(suffix, rows, fan):
            return Parameter(f"{name}.{suffix}",
                             init_kaiming_uniform((rows, hidden), fan, rng, dtype), "qi")

        self.w_z = fc("w_z", in_dim, in_dim)
        self.u_z = fc("u_z", hidden, hidden)
        self.w_r = fc("w_r", in_dim, in_dim)
        self.u_r = fc("u_r", hidden, hidden)
        self.w_h = fc("w_h", in_dim, in_dim)
        self.u_h = fc("u_h", hidden, hidden)
        self.b_z = Parameter(f"{name}.b_z", Tensor(np.zeros(hidden, dtype=dtype)), "qi", bias=True)
        self.b_r = Parameter(f"{name}.b_r", Tensor(np.zeros(hidden, dtype=dtype)), "qi", bias=True)
        self.b_h = Parameter(f"{name}.b_h", Tensor(np.zeros(hidden, dtype=dtype)), "qi", bias=True)

    def parameters(self):
        return [self.w_z, self.u_z, self.w_r, self.u_r, self.w_h, self.u_h,
                self.b_z, self.b_r, self.b_h]

    def encode(self, embedded: Node, step_hook=None) -> Node:
        return gru_encode(embedded, self, step_hook=step_hook)


def gru_encode(embedded: Node, params: GRU, step_hook=None) -> Node:
    """GRU recurrence over (T,E) or (B,T,E); returns the final hidden state.

    z_t = sigmoid(W_z x_t + U_z h + b_z)        (update gate)
    r_t = sigmoid(W_r x_t + U_r h + b_r)        (reset gate)
    c_t = tanh(W_h x_t + U_h (r_t*h) + b_h)     (candidate)
    h_t = (1 - z_t)*h + z_t*c_t

    ``step_hook`` (if given) is called once per timestep with the index.
    """
    squeeze = embedded.value.rank == 2
    x = reshape(embedded, (1,) + embedded.shape) if squeeze else embedded
    if x.value.rank != 3:
        raise ShapeError(f"gru_encode input must be (T,E) or (B,T,E), got {embedded.shape}")
    b, t, _ = x.shape
    if t < 1:
        raise ShapeError("gru_encode needs at least one timestep")
    h = leaf(Tensor(np.zeros((b, params.hidden), dtype=params.dtype)), requires_grad=False)
    for step in range(t):
        xt = reshape(slice_axis(x, 1, step, step + 1), (b, x.shape[2]))
        z = sigmoid(add(linear(xt, params.w_z.node, params.b_z.node),
                        matmul(h, params.u_z.node)))
        r = sigmoid(add(linear(xt, params.w_r.node, params.b_r.node),
                        matmul(h, params.u_r.node)))
        cand = tanh(add(linear(xt, params.w_h.node, params.b_h.node),
                        matmul(mul(r, h), params.u_h.node)))
        h = add(mul(scale_add(z, -1.0, 1.0), h), mul(z, cand))
        if step_hook is not None:
            step_hook(step)
    return reshape(h, (params.hidden,)) if squeeze else h


# ---------------------------------------------------------------------------
# attention helpers
# ---------------------------------------------------------------------------

def softmax_lastaxis(x: Node) -> Node:
    shifted = x.array - x.array.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    s = s.astype(x.value.dtype, copy=False)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return apply_op(Tensor(s), (x,), rule)


def weighted_spatial_sum(features: Node, weights: Node) -> Node:
    """out[b,c] = sum_l features[b,c,l] * weights[b,l]."""
    f = features.array
    w = weights.array
    if f.shape[0] != w.shape[0] or f.shape[2] != w.shape[1]:
        raise ShapeError(f"weighted sum shapes: {features.shape} vs {weights.shape}")
    out = np.einsum("bcl,bl->bc", f, w)

    def rule(g):
        gf = g[:, :, None] * w[:, None, :] if features.requires_grad else None
        gw = np.einsum("bc,bcl->bl", g, f) if weights.requires_grad else None
        return gf, gw

    return apply_op(Tensor(out), (features, weights), rule)


def add_channel_bias_map(f: Node, v: Node) -> Node:
    """f (B,C,H,W) plus v (B,C) broadcast over the spatial axes."""
    if f.shape[:2] != v.shape:
        raise ShapeError(f"channel bias shapes: {f.shape} vs {v.shape}")
    b, c, _, _ = f.shape
    out = Tensor(f.array + v.array.reshape(b, c, 1, 1))
    return apply_op(out, (f, v), lambda g: (g, g.sum(axis=(2, 3))))
