"""Layer set: kernel-3 conv1d, fully-connected, batch-norm, BLSTM.

Layers register their parameters into a ``ParamStore`` under
``<name>.<leaf>`` keys at construction and are plain callables on
``Tensor`` values afterwards. Anything with batch statistics takes the
shared ``LayerCtx`` so training, inference, and gradient checking can
pick statistics handling explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gmvc.errors import InvalidInput, ShapeError
from gmvc.nn import tensor as T
from gmvc.nn.params import ParamStore
from gmvc.nn.tensor import Tensor


@dataclass
class LayerCtx:
    """Per-call execution context.

    train: use batch statistics in batch-norm (else running averages).
    update_stats: fold batch statistics into the running averages;
        gradient checking keeps this off so repeated evaluations of the
        loss are pure.
    """

    train: bool = True
    update_stats: bool = True


INFER_CTX = LayerCtx(train=False, update_stats=False)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.name = name
        self.w = store.add(f"{name}.w", (d_in, d_out), init="xavier")
        self.b = store.add(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, x: Tensor, ctx: LayerCtx | None = None) -> Tensor:
        if x.data.shape[-1] != self.w.data.shape[0]:
            raise ShapeError(
                f"{self.name}: input dim {x.data.shape[-1]} != {self.w.data.shape[0]}"
            )
        return T.add(T.matmul(x, self.w), self.b)


class Conv1d:
    """Kernel-3, stride-1, same-padded convolution over the time axis."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int):
        self.name = name
        self.c_in = c_in
        self.w = store.add(
            f"{name}.w", (3 * c_in, c_out), init="xavier", fan=(3 * c_in, 3 * c_out)
        )
        self.b = store.add(f"{name}.b", (c_out,), init="zeros")

    def __call__(self, x: Tensor, ctx: LayerCtx | None = None) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[2] != self.c_in:
            raise ShapeError(
                f"{self.name}: expected (M, T, {self.c_in}), got {x.data.shape}"
            )
        return T.conv1d(x, self.w, self.b)


class BatchNorm:
    """Per-channel batch normalization over all leading axes.

    Running averages (momentum 0.9) back inference; training always
    normalizes with the current batch statistics.
    """

    def __init__(
        self, store: ParamStore, name: str, channels: int, eps: float = 1e-5,
        momentum: float = 0.9,
    ):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = store.add(f"{name}.gamma", (channels,), init="ones")
        self.beta = store.add(f"{name}.beta", (channels,), init="zeros")
        self.running_mean = store.add_state(f"{name}.running_mean", (channels,), 0.0)
        self.running_var = store.add_state(f"{name}.running_var", (channels,), 1.0)

    def __call__(self, x: Tensor, ctx: LayerCtx) -> Tensor:
        axes = tuple(range(x.data.ndim - 1))
        if ctx.train:
            if not T.grad_enabled() and not ctx.update_stats:
                # same arithmetic as the composed path, minus the tape
                mean_d = x.data.mean(axis=axes, keepdims=True)
                centered_d = x.data - mean_d
                var_d = (centered_d * centered_d).mean(axis=axes, keepdims=True)
                xhat_d = centered_d * (1.0 / np.sqrt(var_d + self.eps))
                return Tensor(xhat_d * self.gamma.data + self.beta.data)
            mean = T.tmean(x, axis=axes, keepdims=True)
            centered = T.sub(x, mean)
            var = T.tmean(T.mul(centered, centered), axis=axes, keepdims=True)
            inv = T.div(
                Tensor(np.ones((), dtype=x.data.dtype)),
                T.sqrt(T.shift(var, self.eps)),
            )
            xhat = T.mul(centered, inv)
            if ctx.update_stats:
                m = self.momentum
                self.running_mean[...] = (
                    m * self.running_mean + (1.0 - m) * mean.data.reshape(-1)
                )
                self.running_var[...] = (
                    m * self.running_var + (1.0 - m) * var.data.reshape(-1)
                )
        else:
            inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.data.dtype)
            xhat = T.mul(
                T.sub(x, Tensor(self.running_mean.astype(x.data.dtype))),
                Tensor(inv),
            )
        return T.add(T.mul(xhat, self.gamma), self.beta)


class BLSTM:
    """Bidirectional LSTM over axis 1 of (B, N, F); output is (B, N, 2H)."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int):
        self.name = name
        self.d_in = d_in
        self.hidden = hidden
        self.p = {}
        for d in ("fw", "bw"):
            self.p[f"{d}.wx"] = store.add(
                f"{name}.{d}.wx", (d_in, 4 * hidden), init="xavier"
            )
            self.p[f"{d}.wh"] = store.add(
                f"{name}.{d}.wh", (hidden, 4 * hidden), init="xavier"
            )
            self.p[f"{d}.b"] = store.add(
                f"{name}.{d}.b", (4 * hidden,), init="lstm_bias"
            )

    def _run(self, in_pre: list[Tensor], direction: str) -> list[Tensor]:
        h_dim = self.hidden
        b = in_pre[0].data.shape[0]
        wh = self.p[f"{direction}.wh"]
        h = Tensor(np.zeros((b, h_dim), dtype=in_pre[0].data.dtype))
        c = Tensor(np.zeros((b, h_dim), dtype=in_pre[0].data.dtype))
        out = []
        for x_pre in in_pre:
            pre = T.add(x_pre, T.matmul(h, wh))
            hc = T.lstm_gates(pre, c)
            h = T.narrow(hc, 1, 0, h_dim)
            c = T.narrow(hc, 1, h_dim, h_dim)
            out.append(h)
        return out

    def _input_preacts(self, xs: Tensor, direction: str) -> list[Tensor]:
        # input-side projection for all steps in one gemm; the recurrent
        # half stays inside the step loop
        b, n, _ = xs.data.shape
        pre = T.add(T.matmul(xs, self.p[f"{direction}.wx"]),
                    self.p[f"{direction}.b"])
        return [
            T.reshape(T.narrow(pre, 1, i, 1), (b, 4 * self.hidden))
            for i in range(n)
        ]

    def __call__(self, xs: Tensor, ctx: LayerCtx | None = None) -> Tensor:
        if xs.data.ndim != 3 or xs.data.shape[2] != self.d_in:
            raise ShapeError(
                f"{self.name}: expected (B, N, {self.d_in}), got {xs.data.shape}"
            )
        b, n, _ = xs.data.shape
        fw = self._run(self._input_preacts(xs, "fw"), "fw")
        bw = self._run(self._input_preacts(xs, "bw")[::-1], "bw")[::-1]
        per_step = [
            T.reshape(T.concat((f, r), axis=1), (b, 1, 2 * self.hidden))
            for f, r in zip(fw, bw)
        ]
        return per_step[0] if n == 1 else T.concat(per_step, axis=1)


class SoftmaxHead:
    """Linear projection to class probabilities (training losses should
    work from the underlying logits layer instead)."""

    def __init__(self, store: ParamStore, name: str, d_in: int, classes: int):
        self.logits = Linear(store, name, d_in, classes)

    def __call__(self, x: Tensor, ctx: LayerCtx | None = None) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)


@dataclass
class LayerSpec:
    """Declarative layer description: kind plus kind-specific dims."""

    kind: str
    dims: dict = field(default_factory=dict)

    def build(self, store: ParamStore, name: str):
        d = self.dims
        if any(v <= 0 for v in d.values()):
            raise InvalidInput(f"{name}: non-positive dim in {d}")
        if self.kind == "conv1d":
            return Conv1d(store, name, d["c_in"], d["c_out"])
        if self.kind == "fully_connected":
            return Linear(store, name, d["d_in"], d["d_out"])
        if self.kind == "batch_norm":
            return BatchNorm(store, name, d["channels"])
        if self.kind == "blstm":
            return BLSTM(store, name, d["d_in"], d["hidden"])
        if self.kind == "softmax_head":
            return SoftmaxHead(store, name, d["d_in"], d["classes"])
        raise InvalidInput(f"unknown layer kind {self.kind!r}")


def forward_backward(graph, x, upstream=None, ctx: LayerCtx | None = None):
    """Run composed layers forward, then backpropagate ``upstream``.

    ``graph`` is a sequence of layer callables applied in order; the
    output gradient seed defaults to ones. Gradients accumulate into
    the layers' parameter store. Returns the forward output array.
    """
    ctx = ctx or LayerCtx()
    out = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    for layer in graph:
        out = layer(out, ctx)
    seed = None if upstream is None else np.asarray(upstream, dtype=out.data.dtype)
    T.backward(out, seed)
    return out.data
