"""Dense float64 tensors and a small reverse-mode tape.

Only the primitives the backbone needs are provided. Every primitive is an
``Op`` with a ``forward`` that caches what ``backward`` needs; a ``Tape``
records ops in execution order, can replay them on fresh input values
(``forward_eval``) and propagates adjoints in reverse (``backward_eval``).

Activations use channels-last layout: dense activations are ``(N, C)``,
convolutional ones ``(N, H, W, C)``. Convolution weights are
``(kh, kw, C_in, C_out)`` so a unit's channel block is a contiguous slice of
the last two axes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class Op:
    name = "op"

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        if self.b.ndim == 1:
            return np.outer(g, self.b), self.a.T @ g
        return g @ self.b.T, self.a.T @ g


class BiasAdd(Op):
    name = "bias_add"

    def forward(self, x, b):
        if b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise ShapeError(f"bias_add {x.shape} + {b.shape}")
        return x + b

    def backward(self, g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


class Add(Op):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add {a.shape} + {b.shape}")
        return a + b

    def backward(self, g):
        return g, g


class Scale(Op):
    name = "scale"

    def __init__(self, c: float):
        self.c = c

    def forward(self, x):
        return x * self.c

    def backward(self, g):
        return (g * self.c,)


class Sum(Op):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, g):
        return (np.full(self.shape, g, dtype=DTYPE),)


class SumSquares(Op):
    name = "sum_squares"

    def forward(self, x):
        self.x = x
        return np.asarray(np.sum(x * x))

    def backward(self, g):
        return (2.0 * g * self.x,)


class ReLU(Op):
    name = "relu"

    def forward(self, x):
        self.x = x
        return np.maximum(x, 0.0)

    def backward(self, g):
        return (g * (self.x > 0),)


class Take(Op):
    """Select index sets along trailing axes; backward scatters into zeros.

    ``index`` holds one selector (slice or int array) per trailing axis. Entries
    outside the selection get an exactly-zero gradient.
    """

    name = "take"

    def __init__(self, index: Sequence[slice | np.ndarray]):
        self.index = tuple(index)

    def _key(self, shape: tuple[int, ...]):
        lead = len(shape) - len(self.index)
        if lead < 0:
            raise ShapeError(f"take over {len(self.index)} axes of a {len(shape)}-d tensor")
        if sum(not isinstance(i, slice) for i in self.index) > 1:
            # several index arrays must select an outer product, not a zip
            dims = shape[lead:]
            arrays = [np.arange(d)[i] if isinstance(i, slice) else i for i, d in zip(self.index, dims)]
            return (slice(None),) * lead + np.ix_(*arrays)
        return (slice(None),) * lead + self.index

    def forward(self, x):
        self.shape = x.shape
        self.key = self._key(x.shape)
        return np.ascontiguousarray(x[self.key])

    def backward(self, g):
        full = np.zeros(self.shape, dtype=DTYPE)
        full[self.key] = g
        return (full,)


class Conv2d(Op):
    """Same-padded 2-d convolution via patch expansion (im2col)."""

    name = "conv2d"

    def __init__(self, stride: int = 1):
        self.stride = stride

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(f"conv2d input {x.shape} with kernel {w.shape}")
        kh, kw, cin, cout = w.shape
        n, h, wd, _ = x.shape
        s = self.stride
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, ::s, ::s]  # (n, oh, ow, cin, kh, kw)
        oh, ow = win.shape[1], win.shape[2]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
        wm = w.reshape(kh * kw * cin, cout)
        self.cols, self.wm = cols, wm
        self.geom = (n, h, wd, cin, kh, kw, cout, oh, ow, ph, pw, xp.shape)
        return (cols @ wm).reshape(n, oh, ow, cout)

    def backward(self, g):
        n, h, wd, cin, kh, kw, cout, oh, ow, ph, pw, pshape = self.geom
        s = self.stride
        g2 = g.reshape(n * oh * ow, cout)
        gw = (self.cols.T @ g2).reshape(kh, kw, cin, cout)
        gcols = (g2 @ self.wm.T).reshape(n, oh, ow, kh, kw, cin)
        gxp = np.zeros(pshape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += gcols[:, :, :, i, j, :]
        return gxp[:, ph : ph + h, pw : pw + wd, :], gw


class MeanPool(Op):
    """Global mean over spatial axes of an (N, H, W, C) activation."""

    name = "mean_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"mean_pool expects (N, H, W, C), got {x.shape}")
        self.shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, g):
        n, h, w, c = self.shape
        return (np.broadcast_to(g[:, None, None, :] / (h * w), self.shape).copy(),)


class ChannelNorm(Op):
    """Per-channel affine normalization over all axes but the last.

    In train mode the batch statistics are used and exposed as ``batch_mean``
    and ``batch_var`` so the caller can update running buffers; in eval mode
    the supplied running statistics are constants.
    """

    name = "channel_norm"

    def __init__(self, train: bool, running_mean=None, running_var=None, eps: float = 1e-5):
        self.train = train
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps

    def forward(self, x, scale, shift):
        c = x.shape[-1]
        if scale.shape != (c,) or shift.shape != (c,):
            raise ShapeError(f"channel_norm over {c} channels with scale {scale.shape}")
        axes = tuple(range(x.ndim - 1))
        if self.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.batch_mean, self.batch_var = mean, var
            self.count = x.size // c
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self.xhat, self.inv, self.scale, self.axes = xhat, inv, scale, axes
        return xhat * scale + shift

    def backward(self, g):
        axes = self.axes
        gscale = (g * self.xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * self.scale
        if not self.train:
            return dxhat * self.inv, gscale, gshift
        m = self.count
        gx = (self.inv / m) * (
            m * dxhat - dxhat.sum(axis=axes) - self.xhat * (dxhat * self.xhat).sum(axis=axes)
        )
        return gx, gscale, gshift


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=DTYPE) / temperature))


class SoftmaxCrossEntropy(Op):
    """Mean over the batch of -log softmax(z)[label]."""

    name = "softmax_xent"

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)

    def forward(self, z):
        z2 = np.atleast_2d(z)
        if z2.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{z2.shape[0]} logit rows for {self.labels.shape[0]} labels")
        logp = _log_softmax(z2)
        self.p = np.exp(logp)
        self.zshape = z.shape
        rows = np.arange(len(self.labels))
        return np.asarray(-logp[rows, self.labels].mean())

    def backward(self, g):
        n = len(self.labels)
        d = self.p.copy()
        d[np.arange(n), self.labels] -= 1.0
        return ((g / n) * d.reshape(self.zshape),)


class SoftTargetCrossEntropy(Op):
    """Mean over the batch of -sum(q * log softmax(z / T)); gradient (p - q) / T."""

    name = "soft_xent"

    def __init__(self, targets, temperature: float):
        self.q = np.atleast_2d(np.asarray(targets, dtype=DTYPE))
        self.T = temperature

    def forward(self, z):
        z2 = np.atleast_2d(z)
        if z2.shape != self.q.shape:
            raise ShapeError(f"logits {z2.shape} vs soft targets {self.q.shape}")
        logp = _log_softmax(z2 / self.T)
        self.p = np.exp(logp)
        self.zshape = z.shape
        return np.asarray(-(self.q * logp).sum(axis=-1).mean())

    def backward(self, g):
        n = self.q.shape[0]
        return ((g / (n * self.T)) * (self.p - self.q).reshape(self.zshape),)


class Node:
    __slots__ = ("op", "inputs", "output", "in_shapes")

    def __init__(self, op: Op, inputs: list[Tensor], output: Tensor):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.in_shapes = [t.shape for t in inputs]


class Tape:
    """Records primitive applications in topological (execution) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: list[Tensor] = []

    def input(self, value) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(value)
        self.inputs.append(t)
        return t

    @property
    def output(self) -> Tensor:
        if not self.nodes:
            raise ValueError("empty tape")
        return self.nodes[-1].output

    def apply(self, op: Op, *inputs: Tensor) -> Tensor:
        idx = len(self.nodes)
        try:
            out = op.forward(*(t.data for t in inputs))
        except ShapeError as e:
            raise ShapeError(f"node {idx} ({op.name}): {e}") from None
        node = Node(op, list(inputs), Tensor(out))
        self.nodes.append(node)
        return node.output

    # primitives
    def matmul(self, a, b):
        return self.apply(MatMul(), a, b)

    def bias_add(self, x, b):
        return self.apply(BiasAdd(), x, b)

    def add(self, a, b):
        return self.apply(Add(), a, b)

    def scale(self, x, c: float):
        return self.apply(Scale(c), x)

    def sum(self, x):
        return self.apply(Sum(), x)

    def sum_squares(self, x):
        return self.apply(SumSquares(), x)

    def relu(self, x):
        return self.apply(ReLU(), x)

    def take(self, x, *index):
        return self.apply(Take(index), x)

    def conv2d(self, x, w, stride: int = 1):
        return self.apply(Conv2d(stride), x, w)

    def mean_pool(self, x):
        return self.apply(MeanPool(), x)

    def channel_norm(self, x, scale, shift, train, running_mean=None, running_var=None):
        return self.apply(ChannelNorm(train, running_mean, running_var), x, scale, shift)

    def softmax_xent(self, logits, labels):
        return self.apply(SoftmaxCrossEntropy(labels), logits)

    def soft_xent(self, logits, targets, temperature: float):
        return self.apply(SoftTargetCrossEntropy(targets, temperature), logits)

    def add_n(self, terms: Sequence[Tensor]) -> Tensor:
        total = terms[0]
        for t in terms[1:]:
            total = self.add(total, t)
        return total

    def forward(self, inputs: Sequence[Tensor | np.ndarray] | None = None) -> Tensor:
        """Replay every node on the current leaf values.

        ``inputs`` rebinds the registered input placeholders, in registration
        order. Shapes are fixed at record time; a change is reported with the
        index of the first node that sees it.
        """
        if inputs is not None:
            if len(inputs) != len(self.inputs):
                raise ValueError(f"expected {len(self.inputs)} inputs, got {len(inputs)}")
            for slot, value in zip(self.inputs, inputs):
                slot.data = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=DTYPE)
        for idx, node in enumerate(self.nodes):
            shapes = [t.shape for t in node.inputs]
            if shapes != node.in_shapes:
                raise ShapeError(
                    f"node {idx} ({node.op.name}): input shapes {shapes}, recorded {node.in_shapes}"
                )
            try:
                node.output.data = node.op.forward(*(t.data for t in node.inputs))
            except ShapeError as e:
                raise ShapeError(f"node {idx} ({node.op.name}): {e}") from None
        return self.output

    def backward(self, output: Tensor | None = None) -> None:
        """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
        out = self.output if output is None else output
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
        adj: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        produced = {id(n.output) for n in self.nodes}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.output), None)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.op.backward(g)):
                if gt is None:
                    continue
                key = id(t)
                if key in produced:
                    adj[key] = adj[key] + gt if key in adj else gt
                elif t.requires_grad:
                    t.grad = gt.copy() if t.grad is None else t.grad + gt

    def relu_margin(self) -> float:
        """Smallest |pre-activation| seen by any relu; inf if none."""
        m = np.inf
        for node in self.nodes:
            if isinstance(node.op, ReLU) and node.op.x.size:
                m = min(m, float(np.abs(node.op.x).min()))
        return m


def forward_eval(tape: Tape, inputs: Sequence[Tensor | np.ndarray] | None = None) -> Tensor:
    return tape.forward(inputs)


def backward_eval(tape: Tape, output: Tensor | None = None) -> None:
    tape.backward(output)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` at ``params``, one coordinate at a time.

    Invalid at nondifferentiable points (e.g. |w| at 0); callers keep away
    from kinks. ``params`` is restored before returning.
    """
    w = params.data if isinstance(params, Tensor) else params
    if not w.flags.c_contiguous:
        raise ValueError("finite_diff_grad perturbs in place and needs a contiguous array")
    grad = np.zeros_like(w, dtype=DTYPE)
    flat, gflat = w.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn(w)
        flat[i] = orig - eps
        down = loss_fn(w)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad
