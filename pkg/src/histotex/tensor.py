"""Dense tensors with reverse-mode automatic differentiation.

The operator set is exactly what the texture network needs: strided 2-D
cross-correlation, max pooling, ReLU, channel concatenation, global
average+max pooling, affine layers, 1-D batch normalization, inverted
dropout and softmax cross-entropy. Convolutions are lowered to matrix
multiplies (im2col) so the heavy lifting stays in BLAS.

Production tensors are float32; ops preserve the dtype of their inputs so
test oracles can re-run forward passes in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class AutodiffError(RuntimeError):
    """Invalid use of the autodiff graph (e.g. backward from a non-scalar)."""


class Tensor:
    """N-dimensional float array plus an autodiff record.

    ``grad`` is lazily materialised and always matches ``data`` in shape.
    A tensor with ``requires_grad=False`` never accumulates gradient; op
    results require grad iff any input does.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, attaching the graph record only when needed."""
    parents = tuple(p for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate over fan-out into every tensor that requires grad.
    The graph is consumed: op records are cleared so a second sweep from the
    same nodes is impossible and intermediate buffers can be freed.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        fn = node._backward
        if fn is not None and node.grad is not None:
            fn(node.grad)
        # consume the graph; leaves keep their accumulated grads
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# shape formulas
# ---------------------------------------------------------------------------

def conv2d_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    return oh, ow


def pool2d_output_hw(h: int, w: int, kernel: int, stride: int, ceil_mode: bool) -> tuple[int, int]:
    def one(n: int) -> int:
        if ceil_mode:
            out = -((n - kernel) // -stride) + 1  # ceil division
            # the last window must start inside the input
            if (out - 1) * stride >= n:
                out -= 1
        else:
            out = (n - kernel) // stride + 1
        return out

    return one(h), one(w)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def _bw(g: np.ndarray) -> None:
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return _result(out_data, (a, b), _bw)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def _bw(g: np.ndarray) -> None:
        x.accumulate_grad(np.full_like(x.data, g.item()))

    return _result(out_data, (x,), _bw)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar dot product with a constant weight array (used to pick logits)."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeMismatchError(f"weighted_sum: shapes {x.shape} and {w.shape} differ")
    out_data = np.asarray((x.data * w).sum(), dtype=x.dtype)

    def _bw(g: np.ndarray) -> None:
        x.accumulate_grad(w * g.item())

    return _result(out_data, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def _bw(g: np.ndarray) -> None:
        x.accumulate_grad(g * (x.data > 0))

    return _result(out_data, (x,), _bw)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, NCHW x OIHW)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kernel, kernel, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kernel * kernel, oh * ow)


def _col2im(dcols: np.ndarray, n: int, c: int, h: int, w: int, kernel: int,
            stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    dcols = dcols.reshape(n, c, kernel, kernel, oh, ow)
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:padding + h, padding:padding + w]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N,C,H,W), weight: (O,C,K,K), bias: (O,)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-D input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if kh != kw:
        raise ShapeMismatchError(f"conv2d: non-square kernel {weight.shape}")
    if ci != c:
        raise ShapeMismatchError(
            f"conv2d: input has {c} channels (shape {x.shape}) but weight expects "
            f"{ci} (shape {weight.shape})")
    if bias.shape != (o,):
        raise ShapeMismatchError(f"conv2d: bias shape {bias.shape}, want ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    oh, ow = conv2d_output_hw(h, w, kh, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(
            f"conv2d: kernel {kh}x{kw}/{stride} does not fit input {x.shape} "
            f"with padding {padding}")

    cols = _im2col(x.data, kh, stride, padding, oh, ow)  # (N, C*K*K, L)
    w2 = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols)                            # (N, O, L)
    out += bias.data[None, :, None]
    out_data = np.ascontiguousarray(out.reshape(n, o, oh, ow))

    def _bw(g: np.ndarray) -> None:
        g2 = g.reshape(n, o, oh * ow)
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x.accumulate_grad(_col2im(dcols, n, c, h, w, kh, stride, padding, oh, ow))

    return _result(out_data, (x, weight, bias), _bw)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2d(x: Tensor, kernel: int, stride: int, ceil_mode: bool = False) -> Tensor:
    """Max pooling with deterministic ties: first element in row-major window
    order wins, both in forward argmax and in gradient routing."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeMismatchError(
            f"maxpool2d: kernel {kernel} larger than input {h}x{w}")
    if stride < 1:
        raise ValueError(f"maxpool2d: invalid stride={stride}")
    oh, ow = pool2d_output_hw(h, w, kernel, stride, ceil_mode)

    need_h = (oh - 1) * stride + kernel
    need_w = (ow - 1) * stride + kernel
    pad_h, pad_w = max(0, need_h - h), max(0, need_w - w)
    xp = x.data
    if pad_h or pad_w:
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)),
                    constant_values=-np.inf)
    hp, wp = xp.shape[2], xp.shape[3]

    best = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
    best_idx = np.zeros((n, c, oh, ow), dtype=np.int64)
    rows = np.arange(oh)[:, None] * stride
    cols_ = np.arange(ow)[None, :] * stride
    for i in range(kernel):
        for j in range(kernel):
            v = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            take = v > best  # strict: earlier row-major offsets win ties
            best = np.where(take, v, best)
            flat = (rows + i) * wp + (cols_ + j)
            best_idx = np.where(take, flat[None, None], best_idx)

    out_data = np.ascontiguousarray(best)

    def _bw(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dxp = np.zeros((n, c, hp * wp), dtype=x.dtype)
        nc_idx = np.repeat(np.arange(n * c), oh * ow)
        np.add.at(dxp.reshape(n * c, hp * wp), (nc_idx, best_idx.ravel()), g.ravel())
        dxp = dxp.reshape(n, c, hp, wp)[:, :, :h, :w]
        x.accumulate_grad(dxp)

    return _result(out_data, (x,), _bw)


def adaptive_pool_pair(x: Tensor) -> Tensor:
    """Global average pool and global max pool, concatenated and flattened.

    (N,C,H,W) -> (N, 2C); averages first, maxima second. Max gradient routes
    to the first row-major argmax per channel.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"adaptive_pool_pair expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    avg = flat.mean(axis=2)
    idx = flat.argmax(axis=2)  # first occurrence on ties
    mx = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    out_data = np.concatenate([avg, mx], axis=1)

    def _bw(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros((n, c, h * w), dtype=x.dtype)
        dx += (g[:, :c] / (h * w))[:, :, None]
        np.put_along_axis(
            dx, idx[:, :, None],
            np.take_along_axis(dx, idx[:, :, None], axis=2) + g[:, c:, None], axis=2)
        x.accumulate_grad(dx.reshape(n, c, h, w))

    return _result(out_data, (x,), _bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two NCHW tensors along the channel axis, a first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeMismatchError(
            f"concat_channels expects 4-D inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(
            f"concat_channels: batch/spatial mismatch between {a.shape} and {b.shape}")
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ShapeMismatchError("concat_channels: zero-channel operand")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def _bw(g: np.ndarray) -> None:
        a.accumulate_grad(g[:, :ca])
        b.accumulate_grad(g[:, ca:])

    return _result(out_data, (a, b), _bw)


# ---------------------------------------------------------------------------
# affine, normalization, regularization
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x: (N,F), weight: (G,F), bias: (G,) -> (N,G) via x @ weight.T + bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeMismatchError(
            f"linear expects 2-D input/weight, got {x.shape} and {weight.shape}")
    n, f = x.shape
    g_out, fw = weight.shape
    if f != fw:
        raise ShapeMismatchError(
            f"linear: input features {x.shape} do not match weight {weight.shape}")
    if bias.shape != (g_out,):
        raise ShapeMismatchError(f"linear: bias shape {bias.shape}, want ({g_out},)")
    out_data = x.data @ weight.data.T + bias.data

    def _bw(g: np.ndarray) -> None:
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)

    return _result(out_data, (x, weight, bias), _bw)


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor,
                  running_mean: np.ndarray, running_var: np.ndarray,
                  mode: str = "train", momentum: float = 0.1,
                  eps: float = 1e-5, update_running: bool = True) -> Tensor:
    """Per-feature batch normalization over (N,F) inputs.

    Train mode normalizes by batch statistics and folds them into the running
    estimates with exponential factor ``momentum`` (unbiased variance, like
    the usual convention); eval mode normalizes by the running estimates.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm_1d: unknown mode {mode!r}")
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"batch_norm_1d expects (N,F) input, got {x.shape}")
    n, f = x.shape
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeMismatchError(
            f"batch_norm_1d: gamma/beta shapes {gamma.shape}/{beta.shape}, want ({f},)")

    if mode == "train":
        if n < 2:
            raise ValueError(f"batch_norm_1d: train mode needs N >= 2, got N={n}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)  # biased, used for normalization
        if update_running:
            unbiased = var * (n / (n - 1))
            running_mean *= (1.0 - momentum)
            running_mean += momentum * mean
            running_var *= (1.0 - momentum)
            running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out_data = gamma.data * xhat + beta.data

    def _bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            gg = g * gamma.data
            if mode == "train":
                dx = inv_std * (gg - gg.mean(axis=0)
                                - xhat * (gg * xhat).mean(axis=0))
            else:
                dx = gg * inv_std
            x.accumulate_grad(dx.astype(x.dtype, copy=False))

    return _result(out_data.astype(x.dtype, copy=False), (x, gamma, beta), _bw)


def dropout(x: Tensor, p: float, mode: str = "train",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in eval mode or at p=0. The forward mask is reused in backward.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0,1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode requires an rng generator")
    keep = (rng.random(x.shape) >= p)
    scale_ = x.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.dtype) * scale_
    out_data = x.data * mask

    def _bw(g: np.ndarray) -> None:
        x.accumulate_grad(g * mask)

    return _result(out_data, (x,), _bw)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise numerically stable softmax of a plain array."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over a batch.

    Returns ``(loss, probs)`` where ``probs`` is a detached (N,K) array.
    Gradient of the loss w.r.t. the logits is ``(probs - onehot) / N``.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy expects (N,K) logits, got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeMismatchError(
            f"softmax_cross_entropy: {n} rows of logits but labels shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = y[(y < 0) | (y >= k)][0]
        raise ValueError(f"softmax_cross_entropy: label {bad} outside [0,{k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    loss_val = np.asarray(-logp[np.arange(n), y].mean(), dtype=logits.dtype)
    probs = np.exp(logp)

    def _bw(g: np.ndarray) -> None:
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        logits.accumulate_grad(d * (g.item() / n))

    loss = _result(loss_val, (logits,), _bw)
    return loss, probs
