"""Stacked 3D hourglass network for joint/bone probability volumes.

Layer sequence mirrors the architecture table: a pre-block (5x5x5 conv +
residual block) shared by all modules, then per module an encoder of three
residual blocks with stride-2 downsampling, injection of the granularity
control parameter at the bottleneck, a decoder with transpose convolutions
and residual skip connections, and two sigmoid prediction branches.
Module 1 consumes the pre-block features; later modules additionally see
the previous module's two probability maps (8 -> 10 input channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

DEFAULT_GRANULARITY = 0.02
GRANULARITY_CHANNELS = 4


@dataclass
class GranularityParam:
    value: float = DEFAULT_GRANULARITY

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("granularity must be in [0, 1]")


@dataclass
class NetworkConfig:
    resolution: int = 88
    num_modules: int = 4
    widths: tuple = (8, 16, 24, 36)
    dropout: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.resolution % 8:
            raise ValueError("resolution must be divisible by 8")
        if self.num_modules < 1:
            raise ValueError("need at least one hourglass module")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return {"resolution": self.resolution, "num_modules": self.num_modules,
                "widths": list(self.widths), "dropout": self.dropout, "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d):
        return cls(resolution=d["resolution"], num_modules=d["num_modules"],
                   widths=tuple(d["widths"]), dropout=d["dropout"], dtype=d["dtype"])


@dataclass
class StackOutputs:
    """Per-module probability map pairs plus the shared pre-block features."""
    joint_maps: list          # of Tensor, each R^3 x 1
    bone_maps: list           # of Tensor, each R^3 x 1
    pre_features: Tensor      # R^3 x 8


class _Builder:
    """Tracks parameter names and the init RNG during network construction."""

    def __init__(self, seed, dtype):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = dtype
        self.params = []

    def param(self, name, array):
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        p = Parameter(name, t)
        self.params.append(p)
        return p

    def he_conv(self, name, k, cin, cout):
        std = np.sqrt(2.0 / (k * k * k * cin))
        w = self.param(f"{name}.weight", self.rng.normal(0.0, std, (k, k, k, cin, cout)))
        b = self.param(f"{name}.bias", np.zeros(cout))
        return w, b


class Conv3d:
    def __init__(self, bld, name, k, cin, cout, stride=1):
        self.stride = stride
        self.w, self.b = bld.he_conv(name, k, cin, cout)

    def __call__(self, x, ctx):
        return T.conv3d(x, self.w.tensor, self.b.tensor, stride=self.stride)


class ConvTranspose3d:
    def __init__(self, bld, name, cin, cout):
        std = np.sqrt(2.0 / cin)
        self.w = bld.param(f"{name}.weight", bld.rng.normal(0.0, std, (2, 2, 2, cin, cout)))
        self.b = bld.param(f"{name}.bias", np.zeros(cout))

    def __call__(self, x, ctx):
        return T.conv_transpose3d(x, self.w.tensor, self.b.tensor)


class BatchNorm3d:
    def __init__(self, bld, name, c):
        self.gamma = bld.param(f"{name}.gamma", np.ones(c))
        self.beta = bld.param(f"{name}.beta", np.zeros(c))
        self.running_mean = np.zeros(c, dtype=bld.dtype)
        self.running_var = np.ones(c, dtype=bld.dtype)
        self.name = name

    def __call__(self, x, ctx):
        return T.batchnorm3d(x, self.gamma.tensor, self.beta.tensor, ctx.train,
                             self.running_mean, self.running_var)


class ConvBNRelu:
    def __init__(self, bld, name, k, cin, cout, stride=1):
        self.conv = Conv3d(bld, f"{name}.conv", k, cin, cout, stride)
        self.bn = BatchNorm3d(bld, f"{name}.bn", cout)

    def __call__(self, x, ctx):
        return T.relu(self.bn(self.conv(x, ctx), ctx))


class ConvTBNRelu:
    def __init__(self, bld, name, cin, cout):
        self.conv = ConvTranspose3d(bld, f"{name}.conv", cin, cout)
        self.bn = BatchNorm3d(bld, f"{name}.bn", cout)

    def __call__(self, x, ctx):
        return T.relu(self.bn(self.conv(x, ctx), ctx))


class ResBlock:
    """Two 3x3x3 conv layers (BN+ReLU each); when channel counts differ the
    skip path carries an extra 3x3x3 convolution."""

    def __init__(self, bld, name, cin, cout):
        self.c1 = Conv3d(bld, f"{name}.conv1", 3, cin, cout)
        self.b1 = BatchNorm3d(bld, f"{name}.bn1", cout)
        self.c2 = Conv3d(bld, f"{name}.conv2", 3, cout, cout)
        self.b2 = BatchNorm3d(bld, f"{name}.bn2", cout)
        self.proj = Conv3d(bld, f"{name}.proj", 3, cin, cout) if cin != cout else None

    def __call__(self, x, ctx):
        h = T.relu(self.b1(self.c1(x, ctx), ctx))
        h = self.b2(self.c2(h, ctx), ctx)
        s = self.proj(x, ctx) if self.proj is not None else x
        return T.relu(T.add(h, s))


class PredictionBranch:
    def __init__(self, bld, name, cin, dropout_p):
        self.res = ResBlock(bld, f"{name}.res", cin, cin // 2)
        self.mid = ConvBNRelu(bld, f"{name}.mid", 1, cin // 2, cin // 2)
        self.final = Conv3d(bld, f"{name}.final", 1, cin // 2, 1)
        self.p = dropout_p

    def __call__(self, x, ctx):
        h = self.res(x, ctx)
        h = T.dropout(self.mid(h, ctx), self.p, ctx.train, ctx.rng)
        return T.sigmoid(self.final(h, ctx))


class HourglassModule:
    def __init__(self, bld, name, cfg: NetworkConfig, in_channels: int):
        w0, w1, w2, w3 = cfg.widths
        g = GRANULARITY_CHANNELS
        self.down1 = ConvBNRelu(bld, f"{name}.down1", 2, in_channels, in_channels, stride=2)
        self.enc1 = ResBlock(bld, f"{name}.enc1", in_channels, w1)
        self.down2 = ConvBNRelu(bld, f"{name}.down2", 2, w1, w1, stride=2)
        self.enc2 = ResBlock(bld, f"{name}.enc2", w1, w2)
        self.down3 = ConvBNRelu(bld, f"{name}.down3", 2, w2, w2, stride=2)
        self.enc3 = ResBlock(bld, f"{name}.enc3", w2, w3)
        self.gran_w = bld.param(f"{name}.granularity.weight", bld.rng.normal(0.0, 0.5, g))
        self.gran_b = bld.param(f"{name}.granularity.bias", np.zeros(g))
        self.mid = ResBlock(bld, f"{name}.mid", w3 + g, w3 + g)
        self.dec3 = ResBlock(bld, f"{name}.dec3", w3 + g, w3)
        self.skip3 = ResBlock(bld, f"{name}.skip3", w3, w3)
        self.up2 = ConvTBNRelu(bld, f"{name}.up2", w3, w2)
        self.skip2 = ResBlock(bld, f"{name}.skip2", w2, w2)
        self.dec2 = ResBlock(bld, f"{name}.dec2", w2, w2)
        self.up1 = ConvTBNRelu(bld, f"{name}.up1", w2, w1)
        self.skip1 = ResBlock(bld, f"{name}.skip1", w1, w1)
        self.dec1 = ResBlock(bld, f"{name}.dec1", w1, w1)
        self.up0 = ConvTBNRelu(bld, f"{name}.up0", w1, w0)
        self.joint_branch = PredictionBranch(bld, f"{name}.joint", w0, cfg.dropout)
        self.bone_branch = PredictionBranch(bld, f"{name}.bone", w0, cfg.dropout)

    def __call__(self, x, gamma: float, ctx):
        d1 = self.down1(x, ctx)
        e1 = self.enc1(d1, ctx)
        d2 = self.down2(e1, ctx)
        e2 = self.enc2(d2, ctx)
        d3 = self.down3(e2, ctx)
        e3 = self.enc3(d3, ctx)
        gmap = T.affine_tile(self.gran_w.tensor, self.gran_b.tensor, gamma, e3.shape[:3])
        cat = T.concat(e3, gmap)
        m = self.mid(cat, ctx)
        u3 = T.add(self.dec3(m, ctx), self.skip3(e3, ctx))
        t2 = T.add(self.up2(u3, ctx), self.skip2(e2, ctx))
        u2 = self.dec2(t2, ctx)
        t1 = T.add(self.up1(u2, ctx), self.skip1(e1, ctx))
        u1 = self.dec1(t1, ctx)
        f = self.up0(u1, ctx)
        pj = self.joint_branch(f, ctx)
        pb = self.bone_branch(f, ctx)
        if ctx.trace is not None:
            for label, t in [("input", x), ("down1", d1), ("enc1", e1),
                             ("down2", d2), ("enc2", e2), ("down3", d3),
                             ("enc3", e3), ("concat_control", cat), ("mid", m),
                             ("dec3", u3), ("up2", t2), ("dec2", u2),
                             ("up1", t1), ("dec1", u1), ("up0", f),
                             ("joint_map", pj), ("bone_map", pb)]:
                ctx.trace.append((label, t.shape))
        return pj, pb


class _Ctx:
    def __init__(self, train, rng, trace=None):
        self.train = train
        self.rng = rng
        self.trace = trace


class StackedHourglass:
    """Pre-block plus `num_modules` hourglass modules."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        bld = _Builder(seed, config.np_dtype)
        w0 = config.widths[0]
        self.pre_conv = ConvBNRelu(bld, "pre.conv", 5, 5, w0)
        self.pre_res = ResBlock(bld, "pre.res", w0, w0)
        self.modules = []
        for k in range(config.num_modules):
            cin = w0 if k == 0 else w0 + 2
            self.modules.append(HourglassModule(bld, f"stack.{k}", config, cin))
        self._params = bld.params
        names = [p.name for p in self._params]
        assert len(names) == len(set(names)), "duplicate parameter names"
        self._rng = np.random.Generator(np.random.PCG64(seed + 1))

    # -- parameter access -------------------------------------------------

    def parameters(self):
        return list(self._params)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self._params))

    def _bn_layers(self):
        out = []
        stack = [self]
        seen = set()
        while stack:
            obj = stack.pop()
            if id(obj) in seen:
                continue
            seen.add(id(obj))
            if isinstance(obj, BatchNorm3d):
                out.append(obj)
            elif isinstance(obj, list):
                stack.extend(obj)
            elif hasattr(obj, "__dict__"):
                stack.extend(v for v in vars(obj).values()
                             if isinstance(v, (list, BatchNorm3d)) or hasattr(v, "__dict__"))
        return sorted(out, key=lambda b: b.name)

    def state_dict(self):
        out = {p.name: p.data for p in self._params}
        for bn in self._bn_layers():
            out[f"{bn.name}.running_mean"] = bn.running_mean
            out[f"{bn.name}.running_var"] = bn.running_var
        return out

    def load_state_dict(self, entries: dict):
        own = self.state_dict()
        if set(entries) != set(own):
            missing = set(own) - set(entries)
            extra = set(entries) - set(own)
            raise ValueError(f"state dict mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        dtype = self.config.np_dtype
        by_name = {p.name: p for p in self._params}
        for name, arr in entries.items():
            if tuple(arr.shape) != tuple(own[name].shape):
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {own[name].shape}")
            if name in by_name:
                by_name[name].tensor.data = np.asarray(arr, dtype=dtype)
        bn_by_name = {bn.name: bn for bn in self._bn_layers()}
        for name, bn in bn_by_name.items():
            bn.running_mean = np.asarray(entries[f"{name}.running_mean"], dtype=dtype)
            bn.running_var = np.asarray(entries[f"{name}.running_var"], dtype=dtype)

    # -- forward -----------------------------------------------------------

    def reset_rng(self, seed: int):
        self._rng = np.random.Generator(np.random.PCG64(seed))

    def forward(self, shape_channels: np.ndarray, gamma: GranularityParam | float,
                train: bool = False, trace: list | None = None) -> StackOutputs:
        if isinstance(gamma, GranularityParam):
            gamma = gamma.value
        else:
            gamma = GranularityParam(float(gamma)).value
        r = self.config.resolution
        if shape_channels.shape != (r, r, r, 5):
            raise ValueError(f"expected input {(r, r, r, 5)}, got {shape_channels.shape}")
        ctx = _Ctx(train, self._rng, trace)
        x = Tensor(np.asarray(shape_channels, dtype=self.config.np_dtype))
        s1 = self.pre_res(self.pre_conv(x, ctx), ctx)
        if trace is not None:
            trace.append(("pre_features", s1.shape))
        joint_maps = []
        bone_maps = []
        inp = s1
        for k, module in enumerate(self.modules):
            if k > 0:
                inp = T.concat(T.concat(joint_maps[-1], bone_maps[-1]), s1)
            pj, pb = module(inp, gamma, ctx)
            joint_maps.append(pj)
            bone_maps.append(pb)
        return StackOutputs(joint_maps, bone_maps, s1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: StackedHourglass, stem, extra_meta: dict | None = None):
    meta = {"config": net.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    T.save_arrays(net.state_dict(), stem, meta)


def load_checkpoint(stem) -> StackedHourglass:
    entries, meta = T.load_arrays(stem)
    config = NetworkConfig.from_dict(meta["config"])
    net = StackedHourglass(config, seed=0)
    net.load_state_dict(entries)
    return net
