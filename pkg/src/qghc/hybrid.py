"""Question-guided hybrid convolution: a two-FC kernel predictor maps the
question feature to the 3x3 kernels of selected convolution groups, while the
remaining groups train freely. Includes the stacked residual module and the
ablation variants (naive / full / group).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Parameter, add, concat, relu, reshape, slice_axis, tile_batch
from .nn import (BatchNorm2d, Conv2d, ConvSpec, Linear, batch_norm, channel_shuffle,
                 conv2d_grouped, weight_normalize)
from .tensor import Rng, ShapeError, Tensor, init_kaiming_uniform

VARIANT_KINDS = ("hybrid", "naive", "full", "group")


@dataclass(frozen=True)
class QGHCConfig:
    """Structure of one hybrid-convolution stack.

    Defaults mirror the full-scale layout this module family is audited
    against: 8 groups, 512 channels (so 32 mid channels per group and a
    9216-element 3x3 kernel block per predicted group), three stacked
    modules, a 198-wide predictor hidden layer fed by a 2400-d question
    feature. ``mid_channels`` overrides the per-group width (the
    "halved channels" ablation); None derives it as c_in / (2 * groups).
    """

    c_in: int = 512
    c_out: int = 512
    groups: int = 8
    dynamic_groups: int = 1
    question_dim: int = 2400
    predictor_hidden: int = 198
    modules: int = 3
    mid_channels: int | None = None
    dynamic_indices: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        n, big_n = self.dynamic_groups, self.groups
        if not 0 <= n <= big_n:
            raise ShapeError(f"dynamic groups {n} outside [0, {big_n}]")
        if self.c_in % (2 * big_n):
            raise ShapeError(f"c_in {self.c_in} not divisible by 2*groups {2 * big_n}")
        if self.c_out % big_n:
            raise ShapeError(f"c_out {self.c_out} not divisible by groups {big_n}")
        if self.modules > 1 and self.c_out % (2 * big_n):
            raise ShapeError(f"stacking needs c_out divisible by 2*groups, got {self.c_out}")
        if self.dynamic_indices is not None:
            if len(self.dynamic_indices) != self.modules:
                raise ShapeError("dynamic_indices must list one tuple per module")
            for idx in self.dynamic_indices:
                if len(idx) != n or len(set(idx)) != n or any(not 0 <= g < big_n for g in idx):
                    raise ShapeError(f"invalid dynamic group slots {idx}")

    @property
    def mid(self) -> int:
        """Per-group mid channels m of the first module."""
        return self.mid_channels if self.mid_channels is not None else self.c_in // (2 * self.groups)

    def module_in(self, k: int) -> int:
        return self.c_in if k == 0 else self.c_out

    def module_mid(self, k: int) -> int:
        if self.mid_channels is not None:
            return self.mid_channels
        return self.module_in(k) // (2 * self.groups)

    def indices_for(self, k: int) -> tuple[int, ...]:
        """Dynamic group slots of module k; defaults to the first n slots."""
        if self.dynamic_indices is not None:
            return self.dynamic_indices[k]
        return tuple(range(self.dynamic_groups))

    def with_random_indices(self, seed: int) -> "QGHCConfig":
        """Freeze a seeded random choice of dynamic group slots per module."""
        rng = Rng(seed).derive(3)
        chosen = tuple(
            tuple(sorted(int(g) for g in rng.choice(self.groups, self.dynamic_groups,
                                                    replace=False)))
            for _ in range(self.modules))
        return QGHCConfig(self.c_in, self.c_out, self.groups, self.dynamic_groups,
                          self.question_dim, self.predictor_hidden, self.modules,
                          self.mid_channels, chosen)

    def predicted_elements_per_module(self, kind: str, k: int = 0) -> int:
        """Number of kernel values the predictor emits for module k."""
        c_in = self.module_in(k)
        if kind == "naive":
            return 9 * c_in * self.c_out
        if kind == "full":
            return 9 * (c_in // 2) ** 2
        n = self.groups if kind == "group" else self.dynamic_groups
        m = self.module_mid(k)
        return n * 9 * m * m


class KernelPredictor:
    """Two FC layers with a ReLU in between mapping the question feature to a
    flat kernel vector, reshaped into per-group 3x3 kernels and weight
    normalized with fixed gain 1 (the predicted magnitude lives in the
    direction, so question dependence survives normalization)."""

    def __init__(self, name: str, question_dim: int, hidden: int,
                 out_shape: tuple[int, ...], rng: Rng, dtype=np.float32):
        self.out_shape = out_shape
        out_elems = int(np.prod(out_shape))
        self.fc1 = Linear(f"{name}.fc1", question_dim, hidden, rng, dtype, role="qd")
        self.fc2 = Linear(f"{name}.fc2", hidden, out_elems, rng, dtype, role="qd")

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def predict(self, f_q: Node) -> Node:
        """f_q (d_q,) -> kernels out_shape; f_q (B, d_q) -> (B,) + out_shape."""
        single = f_q.value.rank == 1
        x = reshape(f_q, (1,) + f_q.shape) if single else f_q
        flat = self.fc2.forward(relu(self.fc1.forward(x)))
        expect = int(np.prod(self.out_shape))
        if flat.shape[1] != expect:
            raise ShapeError(f"predictor emits {flat.shape[1]} values, kernels need {expect}")
        if single:
            kernels = reshape(flat, self.out_shape)
            return weight_normalize(kernels, gain=None, batched=False)
        kernels = reshape(flat, (x.shape[0],) + self.out_shape)
        return weight_normalize(kernels, gain=None, batched=True)


def predict_kernels(f_q: Node, predictor: KernelPredictor) -> Node:
    return predictor.predict(f_q)


class QGHCModule:
    """Residual module: grouped 1x1 -> BN -> ReLU -> hybrid grouped 3x3 ->
    BN -> ReLU -> channel shuffle -> grouped 1x1 -> BN -> add 1x1 shortcut ->
    ReLU. Of the N stage-2 group kernels, the slots in ``dynamic_indices``
    come from the predictor each forward pass; the rest are free parameters
    under weight normalization with a learned per-channel gain."""

    def __init__(self, name: str, c_in: int, c_out: int, groups: int,
                 dynamic_indices: tuple[int, ...], question_dim: int,
                 predictor_hidden: int, rng: Rng, dtype=np.float32,
                 mid: int | None = None):
        if c_in % (2 * groups):
            raise ShapeError(f"c_in {c_in} not divisible by 2*groups {2 * groups}")
        self.name = name
        self.groups = groups
        self.mid = mid if mid is not None else c_in // (2 * groups)
        m = self.mid
        self.dynamic_indices = tuple(sorted(dynamic_indices))
        if len(set(self.dynamic_indices)) != len(self.dynamic_indices):
            raise ShapeError(f"repeated dynamic slot in {dynamic_indices}")
        if any(not 0 <= g < groups for g in self.dynamic_indices):
            raise ShapeError(f"dynamic slots {dynamic_indices} outside [0, {groups})")

        self.spec1 = ConvSpec(c_in, groups * m, groups, (1, 1))
        self.spec2 = ConvSpec(groups * m, groups * m, groups, (3, 3))
        self.spec3 = ConvSpec(groups * m, c_out, groups, (1, 1))

        self.stage1 = Conv2d.from_spec(f"{name}.stage1", self.spec1, rng, dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", groups * m, dtype)
        self.free_kernels: dict[int, tuple[Parameter, Parameter]] = {}
        for g in range(groups):
            if g in self.dynamic_indices:
                continue
            v = Parameter(f"{name}.stage2.free{g}.v",
                          init_kaiming_uniform((m, m, 3, 3), m * 9, rng, dtype), "qi")
            gain = Parameter(f"{name}.stage2.free{g}.gain",
                             Tensor(np.ones(m, dtype=dtype)), "qi")
            self.free_kernels[g] = (v, gain)
        self.bn2 = BatchNorm2d(f"{name}.bn2", groups * m, dtype)
        self.stage3 = Conv2d.from_spec(f"{name}.stage3", self.spec3, rng, dtype)
        self.bn3 = BatchNorm2d(f"{name}.bn3", c_out, dtype)
        self.shortcut = Conv2d(f"{name}.shortcut", c_in, c_out, 1, groups=1,
                               rng=rng, dtype=dtype)
        n = len(self.dynamic_indices)
        self.predictor = KernelPredictor(
            f"{name}.predictor", question_dim, predictor_hidden,
            (n * m, m, 3, 3), rng, dtype) if n else None

    def parameters(self):
        params = self.stage1.parameters() + self.bn1.parameters()
        for g in sorted(self.free_kernels):
            v, gain = self.free_kernels[g]
            params += [v, gain]
        params += self.bn2.parameters() + self.stage3.parameters() + self.bn3.parameters()
        params += self.shortcut.parameters()
        if self.predictor is not None:
            params += self.predictor.parameters()
        return params

    def named_state(self):
        return (self.bn1.named_state() + self.bn2.named_state() + self.bn3.named_state())

    def stage2_kernels(self, f_q: Node | None, batch: int) -> Node:
        """Assemble the hybrid kernel stack in group order.

        All-free modules produce a shared (C,mid,3,3) stack; any predicted
        group promotes the stack to per-sample (B,C,mid,3,3), with free
        kernels broadcast across the batch.
        """
        m = self.mid
        if not self.dynamic_indices:
            blocks = [weight_normalize(self.free_kernels[g][0].node,
                                       self.free_kernels[g][1].node)
                      for g in range(self.groups)]
            return concat(blocks, axis=0)
        if f_q is None:
            raise ShapeError("module has predicted kernels but no question feature")
        predicted = self.predictor.predict(f_q if f_q.value.rank == 2 else
                                           reshape(f_q, (1,) + f_q.shape))
        if predicted.shape[0] != batch:
            raise ShapeError(f"question batch {predicted.shape[0]} != image batch {batch}")
        blocks = []
        pos = 0
        for g in range(self.groups):
            if g in self.dynamic_indices:
                blocks.append(slice_axis(predicted, 1, pos * m, (pos + 1) * m))
                pos += 1
            else:
                v, gain = self.free_kernels[g]
                blocks.append(tile_batch(weight_normalize(v.node, gain.node), batch))
        return concat(blocks, axis=1)

    def forward(self, x: Node, f_q: Node | None, train: bool) -> Node:
        out = relu(batch_norm(self.stage1.forward(x), self.bn1, train))
        kernels = self.stage2_kernels(f_q, x.shape[0])
        out = conv2d_grouped(out, kernels, self.groups)
        out = relu(batch_norm(out, self.bn2, train))
        out = channel_shuffle(out, self.groups)
        out = self.stage3.forward(out)
        out = batch_norm(out, self.bn3, train)
        return relu(add(out, self.shortcut.forward(x)))


class NaiveFragment:
    """A single ungrouped 3x3 convolution whose kernel values are all
    predicted from the question: no residual, no batch norm."""

    def __init__(self, name: str, c_in: int, c_out: int, question_dim: int,
                 predictor_hidden: int, rng: Rng, dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        self.predictor = KernelPredictor(f"{name}.predictor", question_dim,
                                         predictor_hidden, (c_out, c_in, 3, 3),
                                         rng, dtype)

    def parameters(self):
        return self.predictor.parameters()

    def named_state(self):
        return []

    def forward(self, x: Node, f_q: Node | None, train: bool) -> Node:
        if f_q is None:
            raise ShapeError("naive fragment needs a question feature")
        kernels = self.predictor.predict(f_q if f_q.value.rank == 2 else
                                         reshape(f_q, (1,) + f_q.shape))
        return conv2d_grouped(x, kernels, 1)


class FullFragment:
    """Ungrouped 1x1 / 3x3 / 1x1 residual block whose 3x3 kernel is fully
    predicted; BN/ReLU placement matches the hybrid module."""

    def __init__(self, name: str, c_in: int, c_out: int, question_dim: int,
                 predictor_hidden: int, rng: Rng, dtype=np.float32):
        mid = c_in // 2
        self.mid = mid
        self.conv1 = Conv2d(f"{name}.conv1", c_in, mid, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", mid, dtype)
        self.predictor = KernelPredictor(f"{name}.predictor", question_dim,
                                         predictor_hidden, (mid, mid, 3, 3),
                                         rng, dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", mid, dtype)
        self.conv3 = Conv2d(f"{name}.conv3", mid, c_out, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(f"{name}.bn3", c_out, dtype)
        self.shortcut = Conv2d(f"{name}.shortcut", c_in, c_out, 1, rng=rng, dtype=dtype)

    def parameters(self):
        return (self.conv1.parameters() + self.bn1.parameters()
                + self.predictor.parameters() + self.bn2.parameters()
                + self.conv3.parameters() + self.bn3.parameters()
                + self.shortcut.parameters())

    def named_state(self):
        return self.bn1.named_state() + self.bn2.named_state() + self.bn3.named_state()

    def forward(self, x: Node, f_q: Node | None, train: bool) -> Node:
        if f_q is None:
            raise ShapeError("full fragment needs a question feature")
        out = relu(batch_norm(self.conv1.forward(x), self.bn1, train))
        kernels = self.predictor.predict(f_q if f_q.value.rank == 2 else
                                         reshape(f_q, (1,) + f_q.shape))
        out = conv2d_grouped(out, kernels, 1)
        out = relu(batch_norm(out, self.bn2, train))
        out = batch_norm(self.conv3.forward(out), self.bn3, train)
        return relu(add(out, self.shortcut.forward(x)))


class QGHCStack:
    """K fragments applied sequentially; every module receives the same
    question feature and owns its own predictor."""

    def __init__(self, name: str, config: QGHCConfig, kind: str, rng: Rng,
                 dtype=np.float32):
        if kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant kind {kind!r}; expected one of {VARIANT_KINDS}")
        self.config = config
        self.kind = kind
        self.modules = []
        for k in range(config.modules):
            c_in = config.module_in(k)
            mod_name = f"{name}.{k}"
            if kind == "naive":
                frag = NaiveFragment(mod_name, c_in, config.c_out, config.question_dim,
                                     config.predictor_hidden, rng, dtype)
            elif kind == "full":
                frag = FullFragment(mod_name, c_in, config.c_out, config.question_dim,
                                    config.predictor_hidden, rng, dtype)
            else:
                indices = (tuple(range(config.groups)) if kind == "group"
                           else config.indices_for(k))
                frag = QGHCModule(mod_name, c_in, config.c_out, config.groups,
                                  indices, config.question_dim,
                                  config.predictor_hidden, rng, dtype,
                                  mid=config.module_mid(k))
            self.modules.append(frag)

    def parameters(self):
        params = []
        for mod in self.modules:
            params += mod.parameters()
        return params

    def named_state(self):
        out = []
        for mod in self.modules:
            out += mod.named_state()
        return out

    def forward(self, f_v: Node, f_q: Node | None, train: bool) -> Node:
        out = f_v
        for mod in self.modules:
            out = mod.forward(out, f_q, train)
        return out


def make_variant(kind: str, config: QGHCConfig, name: str = "stack",
                 rng: Rng | None = None, dtype=np.float32) -> QGHCStack:
    """Build a stack of the requested kind: hybrid (n predicted of N groups),
    group (all groups predicted), full (ungrouped, 3x3 predicted, residual),
    or naive (bare ungrouped predicted conv)."""
    if rng is None:
        rng = Rng(0)
    return QGHCStack(name, config, kind, rng, dtype)
