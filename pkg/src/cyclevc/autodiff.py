"""Reverse-mode differentiation over numpy arrays.

A deliberately small tape: exactly the operations the converter and
vocoder networks need, each with a hand-written backward rule.  Graphs are
built by calling the op functions on Tensor objects and differentiated
with backward(loss).  Not a general autodiff system.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # first contribution: own a writable copy instead of zeros + add
        t.grad = np.array(g, dtype=t.data.dtype)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable tensor.

    loss must be a scalar.  Raises if the graph contains a cycle.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")

    order = []
    done = set()
    in_progress = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            in_progress.discard(id(node))
            done.add(id(node))
            order.append(node)
            continue
        if id(node) in done:
            continue
        if id(node) in in_progress:
            raise ValueError("cycle in compute graph")
        in_progress.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in done and parent.requires_grad:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), back)


def scale(a, c: float) -> Tensor:
    """Multiply by a constant scalar; c is not differentiated."""
    a = _as_tensor(a)
    c = float(c)

    def back(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def back(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), back)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    """x where x >= 0, slope*x elsewhere; slope must lie in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    a = _as_tensor(a)
    nonneg = a.data >= 0

    def back(g):
        _accumulate(a, g * np.where(nonneg, 1.0, slope))

    return _node(np.where(nonneg, a.data, slope * a.data), (a,), back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), back)


def square(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), back)


def absolute(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), back)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside the range only."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def back(g):
        _accumulate(a, g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), back)


def mean(a) -> Tensor:
    """Arithmetic mean over all elements, as a scalar tensor."""
    a = _as_tensor(a)
    n = a.data.size

    def back(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape))

    return _node(a.data.mean(), (a,), back)


def total(a) -> Tensor:
    """Sum over all elements, as a scalar tensor."""
    a = _as_tensor(a)

    def back(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(a.data.sum(), (a,), back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape

    def back(g):
        _accumulate(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), back)


def narrow(a, key) -> Tensor:
    """Basic slicing (a[key]); the gradient scatters back into place."""
    a = _as_tensor(a)

    def back(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _node(a.data[key], (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes[:-1])

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def back(g):
        for t, piece in zip(tensors, np.moveaxis(g, axis, 0)):
            _accumulate(t, piece)

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


# ---------------------------------------------------------------------------
# network ops


def linear(x, weight, bias) -> Tensor:
    """weight @ x + bias for a single vector, or row-wise for a batch.

    x: (n,) or (batch, n); weight: (m, n); bias: (m,).
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.data.ndim != 2:
        raise ValueError(f"weight must be 2-d, got shape {weight.data.shape}")
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ValueError(
            f"input width {x.data.shape[-1]} does not match weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ValueError(
            f"bias shape {bias.data.shape} does not match weight {weight.data.shape}"
        )
    batched = x.data.ndim == 2
    xd = x.data if batched else x.data[None, :]
    out_data = xd @ weight.data.T + bias.data

    def back(g):
        gb = g if batched else g[None, :]
        _accumulate(x, (gb @ weight.data) if batched else (gb @ weight.data)[0])
        _accumulate(weight, gb.T @ xd)
        _accumulate(bias, gb.sum(axis=0))

    return _node(out_data if batched else out_data[0], (x, weight, bias), back)


def conv1d(x, weight, bias) -> Tensor:
    """Stride-1 temporal convolution with symmetric zero padding.

    x: (channels_in, frames) or (batch, channels_in, frames);
    weight: (channels_out, channels_in, kernel) with odd kernel;
    bias: (channels_out,).  Output frame count equals input frame count.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.data.ndim != 3:
        raise ValueError(f"weight must be 3-d, got shape {weight.data.shape}")
    c_out, c_in, kernel = weight.data.shape
    if kernel % 2 == 0:
        raise ValueError(f"kernel must be odd, got {kernel}")
    batched = x.data.ndim == 3
    xd = x.data if batched else x.data[None]
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise ValueError(
            f"input shape {x.data.shape} does not match weight {weight.data.shape}"
        )
    if bias.data.shape != (c_out,):
        raise ValueError(
            f"bias shape {bias.data.shape} does not match weight {weight.data.shape}"
        )
    pad = (kernel - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xp, kernel, axis=2)  # (B, Cin, T, K)
    out_data = np.tensordot(windows, weight.data, axes=((1, 3), (1, 2)))  # (B, T, Cout)
    out_data = out_data.transpose(0, 2, 1) + bias.data[:, None]

    def back(g):
        gb = g if batched else g[None]  # (B, Cout, T)
        _accumulate(bias, gb.sum(axis=(0, 2)))
        _accumulate(weight, np.tensordot(gb, windows, axes=((0, 2), (0, 2))))
        gp = np.pad(gb, ((0, 0), (0, 0), (pad, pad)))
        gwin = sliding_window_view(gp, kernel, axis=2)  # (B, Cout, T, K)
        flipped = weight.data[:, :, ::-1]
        gx = np.tensordot(gwin, flipped, axes=((1, 3), (0, 2)))  # (B, T, Cin)
        gx = gx.transpose(0, 2, 1)
        _accumulate(x, gx if batched else gx[0])

    return _node(out_data if batched else out_data[0], (x, weight, bias), back)


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over frames: (.., channels, frames) -> (.., channels)."""
    x = _as_tensor(x)
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise ValueError(f"cannot pool over empty frame axis, shape {x.data.shape}")
    n = x.data.shape[-1]

    def back(g):
        _accumulate(x, np.broadcast_to(g[..., None] / n, x.data.shape))

    return _node(x.data.mean(axis=-1), (x,), back)


def _sigmoid(x):
    # clip keeps exp in range; the saturated tails have ~zero gradient anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def gru_gates(xd, hd, w_ih, w_hh, b_ih, b_hh):
    """Plain-numpy GRU step shared by the graph op and the sampling loop.

    Returns (h_new, r, z, n) with sigmoid reset/update gates and a tanh
    candidate whose recurrent term is reset-gated:
        r = sigmoid(Wr x + Ur h + br),  z = sigmoid(Wz x + Uz h + bz)
        n = tanh(Wn x + bn + r * (Un h + un))
        h_new = (1 - z) * n + z * h
    """
    gi = xd @ w_ih.T + b_ih
    gh = hd @ w_hh.T + b_hh
    hidden = hd.shape[-1]
    r = _sigmoid(gi[..., :hidden] + gh[..., :hidden])
    z = _sigmoid(gi[..., hidden : 2 * hidden] + gh[..., hidden : 2 * hidden])
    hn = gh[..., 2 * hidden :]
    n = np.tanh(gi[..., 2 * hidden :] + r * hn)
    h_new = (1.0 - z) * n + z * hd
    return h_new, r, z, n, hn


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One GRU step: x (batch, in) or (in,), h (batch, hidden) or (hidden,).

    w_ih: (3*hidden, in), w_hh: (3*hidden, hidden), biases (3*hidden,),
    gate blocks ordered reset, update, candidate.
    """
    x, h = _as_tensor(x), _as_tensor(h)
    w_ih, w_hh = _as_tensor(w_ih), _as_tensor(w_hh)
    b_ih, b_hh = _as_tensor(b_ih), _as_tensor(b_hh)
    hidden = h.data.shape[-1]
    if w_ih.data.shape != (3 * hidden, x.data.shape[-1]):
        raise ValueError(
            f"w_ih shape {w_ih.data.shape} does not match input width "
            f"{x.data.shape[-1]} and hidden size {hidden}"
        )
    if w_hh.data.shape != (3 * hidden, hidden):
        raise ValueError(f"w_hh shape {w_hh.data.shape} does not match hidden {hidden}")
    batched = x.data.ndim == 2
    xd = x.data if batched else x.data[None, :]
    hd = h.data if batched else h.data[None, :]
    h_new, r, z, n, hn = gru_gates(xd, hd, w_ih.data, w_hh.data, b_ih.data, b_hh.data)

    def back(g):
        gb = g if batched else g[None, :]
        dn = gb * (1.0 - z)
        dz = gb * (hd - n)
        da_n = dn * (1.0 - n * n)
        dr = da_n * hn
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dgi = np.concatenate([da_r, da_z, da_n], axis=-1)
        dgh = np.concatenate([da_r, da_z, da_n * r], axis=-1)
        dx = dgi @ w_ih.data
        dh = dgh @ w_hh.data + gb * z
        _accumulate(x, dx if batched else dx[0])
        _accumulate(h, dh if batched else dh[0])
        _accumulate(w_ih, dgi.T @ xd)
        _accumulate(w_hh, dgh.T @ hd)
        _accumulate(b_ih, dgi.sum(axis=0))
        _accumulate(b_hh, dgh.sum(axis=0))

    return _node(h_new if batched else h_new[0], (x, h, w_ih, w_hh, b_ih, b_hh), back)
