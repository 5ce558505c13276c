"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly the layer set the hourglass stack needs: 3D convolution
(stride 1 and 2), transpose convolution, batch norm, relu/sigmoid,
dropout, concat/add and the masked cross-entropy loss.  Data layout is
spatial-major with channels last: (D, H, W, C).  Convolutions are
evaluated as one BLAS matmul per kernel offset, which beats naive loops
by a wide margin on CPU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 check_finite=True):
        self.data = np.asarray(data)
        if check_finite and not np.all(np.isfinite(self.data)):
            raise AutodiffError("non-finite values in tensor")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward_fn
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data, requires_grad=False, check_finite=False)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        if self.data.shape != ():
            raise AutodiffError("backward requires a scalar loss")
        if self._consumed:
            raise AutodiffError("backward through the same graph twice")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.array(1.0, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._consumed = True
        # free the graph
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None

    def item(self):
        return float(self.data)


@dataclass
class Parameter:
    name: str
    tensor: Tensor

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def _wrap(data, parents, backward_fn):
    return Tensor(data, parents=parents, backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"add shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _wrap(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _wrap(a.data * b.data, (a, b), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.full(x.shape, g, dtype=x.dtype))

    return _wrap(x.data.sum(), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _wrap(np.where(mask, x.data, 0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # stable in both tails: never exponentiates a positive argument
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    y = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * y * (1.0 - y))

    return _wrap(y, (x,), bwd)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise AutodiffError("dropout probability must be in [0, 1)")
    if not train or p == 0.0:
        def bwd_id(g):
            if x.requires_grad:
                x._accumulate(g)
        return _wrap(x.data, (x,), bwd_id)
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    factor = keep * scale

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * factor)

    return _wrap(x.data * factor, (x,), bwd)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.data.ndim
    if a.shape[:ax] + a.shape[ax + 1:] != b.shape[:ax] + b.shape[ax + 1:]:
        raise AutodiffError(f"concat shape mismatch {a.shape} vs {b.shape}")
    na = a.shape[ax]

    def bwd(g):
        ga, gb = np.split(g, [na], axis=ax)
        if a.requires_grad:
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(gb)

    return _wrap(np.concatenate([a.data, b.data], axis=ax), (a, b), bwd)


# ---------------------------------------------------------------------------
# convolutions


def _offsets(k):
    return [(d1, d2, d3) for d1 in range(k) for d2 in range(k) for d3 in range(k)]


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation.  Stride 1 with odd k keeps the spatial dims
    (symmetric zero padding (k-1)/2); all other stride/kernel combinations
    run unpadded ("valid") with output (n-k)//stride + 1 per axis."""
    kd, kh, kw, cin, cout = w.shape
    if not (kd == kh == kw):
        raise AutodiffError("kernel must be cubic")
    k = kd
    d, h, wd, cx = x.shape
    if cx != cin:
        raise AutodiffError(f"conv3d channel mismatch: input {cx}, weight {cin}")
    if stride == 1 and k % 2:
        p = (k - 1) // 2
        xp = np.pad(x.data, ((p, p), (p, p), (p, p), (0, 0)))
        out = np.empty((d, h, wd, cout), dtype=x.dtype)
        o2 = out.reshape(-1, cout)
        o2[:] = b.data
        for d1, d2, d3 in _offsets(k):
            o2 += xp[d1:d1 + d, d2:d2 + h, d3:d3 + wd].reshape(-1, cin) @ w.data[d1, d2, d3]

        def bwd(g):
            g2 = g.reshape(-1, cout)
            if b.requires_grad:
                b._accumulate(g2.sum(axis=0))
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for d1, d2, d3 in _offsets(k):
                    gw[d1, d2, d3] = xp[d1:d1 + d, d2:d2 + h, d3:d3 + wd].reshape(-1, cin).T @ g2
                w._accumulate(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for d1, d2, d3 in _offsets(k):
                    gxp[d1:d1 + d, d2:d2 + h, d3:d3 + wd] += (g2 @ w.data[d1, d2, d3].T).reshape(d, h, wd, cin)
                x._accumulate(gxp[p:p + d, p:p + h, p:p + wd] if p else gxp)

        return _wrap(out, (x, w, b), bwd)

    if stride in (1, 2):
        # valid (unpadded) strided cross-correlation; the network's
        # downsampling convs use k=2, stride 2 on even dims, which tiles
        # the volume exactly
        s = stride
        if d < k or h < k or wd < k:
            raise AutodiffError("conv3d input smaller than kernel")
        if s == 2 and k == 2 and (d % 2 or h % 2 or wd % 2):
            raise AutodiffError("stride-2 conv3d requires even spatial dims")
        do, ho, wo = (d - k) // s + 1, (h - k) // s + 1, (wd - k) // s + 1
        out = np.empty((do, ho, wo, cout), dtype=x.dtype)
        o2 = out.reshape(-1, cout)
        o2[:] = b.data

        def tap(arr, d1, d2, d3):
            return arr[d1:d1 + s * (do - 1) + 1:s,
                       d2:d2 + s * (ho - 1) + 1:s,
                       d3:d3 + s * (wo - 1) + 1:s]

        for d1, d2, d3 in _offsets(k):
            o2 += tap(x.data, d1, d2, d3).reshape(-1, cin) @ w.data[d1, d2, d3]

        def bwd2(g):
            g2 = g.reshape(-1, cout)
            if b.requires_grad:
                b._accumulate(g2.sum(axis=0))
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for d1, d2, d3 in _offsets(k):
                    gw[d1, d2, d3] = tap(x.data, d1, d2, d3).reshape(-1, cin).T @ g2
                w._accumulate(gw)
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                for d1, d2, d3 in _offsets(k):
                    tap(gx, d1, d2, d3)[...] += \
                        (g2 @ w.data[d1, d2, d3].T).reshape(do, ho, wo, cin)
                x._accumulate(gx)

        return _wrap(out, (x, w, b), bwd2)

    raise AutodiffError("stride must be 1 or 2")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Transpose convolution with a 2x2x2 kernel and stride 2: spatial dims
    double exactly, every output cell written by a single input cell."""
    kd, kh, kw, cin, cout = w.shape
    if (kd, kh, kw) != (2, 2, 2):
        raise AutodiffError("conv_transpose3d requires a 2x2x2 kernel")
    d, h, wd, cx = x.shape
    if cx != cin:
        raise AutodiffError(f"conv_transpose3d channel mismatch: input {cx}, weight {cin}")
    x2 = x.data.reshape(-1, cin)
    out = np.empty((2 * d, 2 * h, 2 * wd, cout), dtype=x.dtype)
    for d1, d2, d3 in _offsets(2):
        out[d1::2, d2::2, d3::2] = (x2 @ w.data[d1, d2, d3] + b.data).reshape(d, h, wd, cout)

    def bwd(g):
        if b.requires_grad:
            b._accumulate(g.reshape(-1, cout).sum(axis=0))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for d1, d2, d3 in _offsets(2):
                gw[d1, d2, d3] = x2.T @ g[d1::2, d2::2, d3::2].reshape(-1, cout)
            w._accumulate(gw)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx2 = gx.reshape(-1, cin)
            for d1, d2, d3 in _offsets(2):
                gx2 += g[d1::2, d2::2, d3::2].reshape(-1, cout) @ w.data[d1, d2, d3].T
            x._accumulate(gx)

    return _wrap(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# batch norm


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, train: bool,
                running_mean: np.ndarray, running_var: np.ndarray,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-wise normalization over all spatial positions.

    Train mode uses batch statistics and updates the running stats in
    place; eval mode uses the running stats.
    """
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    m = flat.shape[0]
    if train:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (flat - mu) * inv_std
        y = (gamma.data * xhat + beta.data).reshape(x.shape)

        def bwd(g):
            g2 = g.reshape(-1, c)
            if beta.requires_grad:
                beta._accumulate(g2.sum(axis=0))
            if gamma.requires_grad:
                gamma._accumulate((g2 * xhat).sum(axis=0))
            if x.requires_grad:
                dxhat = g2 * gamma.data
                dx = (dxhat - dxhat.mean(axis=0)
                      - xhat * (dxhat * xhat).mean(axis=0)) * inv_std
                x._accumulate(dx.reshape(x.shape))

        return _wrap(y, (x, gamma, beta), bwd)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = gamma.data * inv_std
    y = ((flat - running_mean) * scale + beta.data).reshape(x.shape)

    def bwd_eval(g):
        g2 = g.reshape(-1, c)
        if beta.requires_grad:
            beta._accumulate(g2.sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate((g2 * (flat - running_mean) * inv_std).sum(axis=0))
        if x.requires_grad:
            x._accumulate((g2 * scale).reshape(x.shape))

    return _wrap(y, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# granularity embedding and masked loss


def affine_tile(weight: Tensor, bias: Tensor, value: float, dims) -> Tensor:
    """Learned affine map of a scalar to C values, tiled over `dims`."""
    c = weight.shape[0]
    vec = value * weight.data + bias.data
    out = np.broadcast_to(vec, tuple(dims) + (c,)).astype(weight.dtype).copy()
    n_spatial = int(np.prod(dims))

    def bwd(g):
        gsum = g.reshape(-1, c).sum(axis=0)
        if weight.requires_grad:
            weight._accumulate(value * gsum)
        if bias.requires_grad:
            bias._accumulate(gsum)

    del n_spatial
    return _wrap(out, (weight, bias), bwd)


PROB_EPS = 1e-7


def masked_bce(pred: Tensor, target: np.ndarray, mask: np.ndarray, n_s: int) -> Tensor:
    """(1/n_s) * sum over masked voxels of the soft binary cross-entropy
    -[t log p + (1-t) log(1-p)], probabilities clamped away from {0, 1}."""
    if n_s <= 0:
        raise AutodiffError("empty occupancy mask")
    p = np.clip(pred.data, PROB_EPS, 1.0 - PROB_EPS)
    t = target
    m = mask.astype(pred.dtype)
    per_voxel = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    val = (m * per_voxel).sum() / n_s

    def bwd(g):
        if pred.requires_grad:
            grad = g * m * (-(t / p) + (1.0 - t) / (1.0 - p)) / n_s
            pred._accumulate(grad.astype(pred.dtype))

    return _wrap(np.asarray(val, dtype=pred.dtype), (pred,), bwd)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)   # name -> (m, v)


def zero_grad(params):
    for p in params:
        p.tensor.grad = None


def adam_step(params, state: AdamState):
    """Standard Adam update with bias correction, in place."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise AutodiffError(f"parameter {p.name} has no gradient")
        if p.name not in state.moments:
            state.moments[p.name] = (np.zeros_like(p.data, dtype=np.float64),
                                     np.zeros_like(p.data, dtype=np.float64))
        m, v = state.moments[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.tensor.data = (p.tensor.data - update).astype(p.tensor.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint format: JSON manifest + raw little-endian blob


def save_arrays(entries: dict, stem, meta: dict | None = None):
    """Write `<stem>.json` + `<stem>.bin` (raw little-endian floats)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": meta or {}, "arrays": []}
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as blob:
        for name, arr in entries.items():
            arr = np.asarray(arr)
            dtype = "<f8" if arr.dtype == np.float64 else "<f4"
            raw = arr.astype(dtype).tobytes()
            manifest["arrays"].append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(raw),
            })
            blob.write(raw)
            offset += len(raw)
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_arrays(stem):
    """Returns (entries dict, meta dict); validates manifest layout."""
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as f:
        manifest = json.load(f)
    blob = Path(stem.with_suffix(".bin")).read_bytes()
    entries = {}
    for rec in manifest["arrays"]:
        raw = blob[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
        entries[rec["name"]] = arr
    return entries, manifest.get("meta", {})
