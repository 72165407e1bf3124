"""Dense tensors with reverse-mode gradients.

The computational substrate for the whole package: a Tensor wraps a numpy
array, remembers the operation and parents that produced it, and carries a
closure mapping an upstream gradient to per-parent gradients. Calling
``backward()`` on a root walks the recorded graph in reverse topological
order, accumulating into every node's persistent ``grad`` buffer. Each pass
propagates only its own upstream gradient, so two backward calls add up
exactly like one call with the summed gradient.

Tensors produced by an op are never mutated in place; every op allocates a
fresh output array so cached forward values stay valid for the backward pass.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, ShapeMismatch


class Tensor:
    """A numpy array plus gradient buffer and graph bookkeeping.

    Attributes:
        data: the forward value (never mutated by ops).
        grad: persistent gradient buffer of identical shape, lazily allocated.
        op: short tag of the operation that produced this tensor ("leaf"
            for parameters and inputs).
        parents: tensors this one was computed from.
    """

    __slots__ = ("data", "grad", "op", "parents", "_backward")

    def __init__(self, data, parents=(), op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = None  # callable: upstream grad -> tuple of parent grads

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Propagate gradients from this tensor into every reachable node.

        ``grad`` defaults to ones and must match this tensor's shape.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatch(
                    f"upstream gradient shape {grad.shape} != output shape {self.data.shape}"
                )
        flowing = {id(self): grad}
        for node in reversed(topo_order(self)):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None:
                    continue
                prev = flowing.get(id(parent))
                flowing[id(parent)] = pg if prev is None else prev + pg

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def topo_order(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of the graph below ``root`` (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    # iterative DFS; recursion would overflow on deep chains
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")
    out._backward = lambda g: (g @ b.data.T, a.data.T @ g)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise broadcast add of a length-n bias to an m-by-n tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: rows {x.shape} incompatible with bias {b.shape}")
    out = Tensor(x.data + b.data, (x, b), "add_bias")
    out._backward = lambda g: (g, g.sum(axis=0))
    return out


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias add on a batch-channel-height-width tensor."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_channel_bias: {x.shape} incompatible with bias {b.shape}")
    out = Tensor(x.data + b.data[None, :, None, None], (x, b), "add_channel_bias")
    out._backward = lambda g: (g, g.sum(axis=(0, 2, 3)))
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is 0 where the input is <= 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, x.data.dtype.type(0)), (x,), "relu")
    out._backward = lambda g: (g * mask,)
    return out


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D cross-correlation with zero padding.

    ``x`` is (batch, cin, h, w), ``kernels`` is (cout, cin, kh, kw). Output
    spatial extent is floor((h + 2*pad - kh) / stride) + 1.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeMismatch(f"conv2d needs 4-D input and kernels, got {x.shape}, {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeMismatch(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if stride < 1:
        raise ContractViolation(f"conv2d stride must be >= 1, got {stride}")
    batch, cin, h, w = x.shape
    cout, _, kh, kw = kernels.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeMismatch(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((batch, cout, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
            y += np.einsum("bchw,oc->bohw", patch, kernels.data[:, :, i, j])
    out = Tensor(y, (x, kernels), "conv2d")

    def _backward(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kernels.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
                dk[:, :, i, j] += np.einsum("bohw,bchw->oc", g, patch)
                dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                    np.einsum("bohw,oc->bchw", g, kernels.data[:, :, i, j])
                )
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return dxp, dk

    out._backward = _backward
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (batch, c, h, w) -> (batch, c)."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool needs a 4-D input, got {x.shape}")
    _, _, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), (x,), "gap")

    def _backward(g):
        spread = np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape)
        return (spread.astype(x.data.dtype, copy=False),)

    out._backward = _backward
    return out


def flatten_rows(x: Tensor) -> Tensor:
    """Reshape (batch, ...) to (batch, prod(...)); identity on 2-D input."""
    if x.data.ndim == 2:
        return x
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1), (x,), "flatten")
    out._backward = lambda g: (g.reshape(x.data.shape),)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b), "add")
    out._backward = lambda g: (g, g)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    const = x.data.dtype.type(c)
    out = Tensor(x.data * const, (x,), "scale")
    out._backward = lambda g: (g * const,)
    return out


def grad_check(f, params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given parameter tensors to a scalar Tensor and must build a
    fresh graph on every call. Per-coordinate error is
    |analytic - difference| / max(|analytic|, |difference|, 1e-12); the max
    over all coordinates of all parameters is returned.
    """
    if h <= 0:
        raise ContractViolation(f"grad_check step size must be positive, got {h}")
    for p in params:
        p.zero_grad()
    out = f(params)
    if out.data.size != 1:
        raise ContractViolation(f"grad_check target must be scalar, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f(params).data.reshape(()))
            flat[i] = orig - h
            lo = float(f(params).data.reshape(()))
            flat[i] = orig
            diff = (hi - lo) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - diff) / max(abs(a), abs(diff), 1e-12)
            worst = max(worst, err)
    return worst
