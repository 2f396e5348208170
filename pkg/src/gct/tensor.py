"""Dense tensors with reverse-mode automatic differentiation.

Every value the model computes is a Tensor wrapping a float32/float64
numpy array. Operations build a graph of parent links and backward
closures; Tensor.backward() walks it in reverse topological order and
accumulates gradients into every reachable tensor with requires_grad set.
Nothing here knows about the model; it is a minimal engine.
"""

from __future__ import annotations

import numpy as np

# Floor inside log() of cross-entropy so collapsed probabilities cannot
# produce -inf.
LOG_FLOOR = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph -----------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor.

        seed defaults to ones; pass an array (e.g. 1/B) to scale the whole
        backward pass. Gradients accumulate across calls until cleared.
        """
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        _accumulate(self, np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / s)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self):
        return transpose(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias an upstream gradient buffer
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        if np.ndim(s) != 0:
            s = _as_tensor(s, t)
            return mul(t, s)
        s = float(s)

        def backward_scalar(g):
            _accumulate(t, g * s)

        return _node(t.data * s, (t,), backward_scalar)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g.T)

    return _node(np.ascontiguousarray(a.data.T), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return _node(a.data[index].copy(), (a,), backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, size in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            _accumulate(p, g[tuple(index)])
            offset += size

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; rows may repeat."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _node(a.data[idx], (a,), backward)


# -- reductions --------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.full_like(a.data, g))

    return _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accumulate(a, np.full_like(a.data, g / n))

    return _node(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), backward)


# -- activations -------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp() never overflows.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1, allowed=None) -> Tensor:
    """Row-stochastic softmax along `axis`, max-subtracted for stability.

    `allowed` is an optional boolean mask of the same shape; False entries
    get probability exactly 0.0 and receive zero gradient. Every slice must
    keep at least one allowed entry.
    """
    x = a.data
    if np.isnan(x).any():
        raise ValueError("softmax input contains NaN")
    if allowed is not None:
        x = np.where(allowed, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _node(out_data, (a,), backward)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         allowed=None, sink: list | None = None) -> Tensor:
    """Scaled dot-product attention over all heads at once.

    q is (L, d); k and v are (T, d); d splits into n_heads. `allowed` is an
    optional (L, T) boolean mask shared by all heads; blocked entries get
    weight exactly 0.0. When `sink` is a list, a detached (n_heads, L, T)
    copy of the attention weights is appended to it.
    """
    L, d = q.data.shape
    t_len = k.data.shape[0]
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    scale = 1.0 / np.sqrt(dk)
    # head-major stacks: (n_heads, len, dk) so np.matmul batches over heads
    qh = q.data.reshape(L, n_heads, dk).transpose(1, 0, 2)
    kh = k.data.reshape(t_len, n_heads, dk).transpose(1, 0, 2)
    vh = v.data.reshape(t_len, n_heads, dk).transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) * scale
    if np.isnan(logits).any():
        raise ValueError("attention logits contain NaN")
    if allowed is not None:
        logits = np.where(allowed, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    if sink is not None:
        sink.append(weights.copy())
    ctx = (weights @ vh).transpose(1, 0, 2)

    def backward(g):
        gh = g.reshape(L, n_heads, dk).transpose(1, 0, 2)
        d_weights = gh @ vh.transpose(0, 2, 1)
        d_logits = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))
        d_logits *= scale
        _accumulate(q, (d_logits @ kh).transpose(1, 0, 2).reshape(L, d))
        _accumulate(k, (d_logits.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(t_len, d))
        _accumulate(v, (weights.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(t_len, d))

    return _node(np.ascontiguousarray(ctx.reshape(L, d)), (q, k, v), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = gain.data * xhat + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(bias, g.sum(axis=lead) if lead else g)
        _accumulate(gain, (g * xhat).sum(axis=lead) if lead else g * xhat)
        gx = g * gain.data
        _accumulate(
            x,
            inv_std
            * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            ),
        )

    return _node(out_data, (x, gain, bias), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)

    def backward(g):
        _accumulate(a, g * keep)

    return _node(a.data * keep, (a,), backward)


# -- losses ------------------------------------------------------------------


def cross_entropy(probs: Tensor, targets, pad_id: int) -> Tensor:
    """Mean of -log p[t, target_t] over non-PAD steps.

    `probs` rows must already be probability vectors; the log is floored at
    LOG_FLOOR so a collapsed row cannot produce -inf.
    """
    tgt = np.asarray(targets, dtype=np.intp)
    if probs.data.ndim != 2 or tgt.ndim != 1 or tgt.shape[0] != probs.data.shape[0]:
        raise ValueError(
            f"cross_entropy expects (steps, V) probs and matching targets, "
            f"got {probs.data.shape} and {tgt.shape}"
        )
    v = probs.data.shape[1]
    if ((tgt < 0) | (tgt >= v)).any():
        raise ValueError(f"target id out of range [0, {v})")
    live = np.nonzero(tgt != pad_id)[0]
    if live.size == 0:
        raise ValueError("no supervised steps: every target is PAD")
    picked = probs.data[live, tgt[live]]
    clamped = np.maximum(picked, LOG_FLOOR)
    loss = -np.log(clamped).mean()

    def backward(g):
        if not probs.requires_grad:
            return
        if probs.grad is None:
            probs.grad = np.zeros_like(probs.data)
        coeff = np.where(picked > LOG_FLOOR, -1.0 / (clamped * live.size), 0.0)
        probs.grad[live, tgt[live]] += g * coeff

    return _node(np.asarray(loss, dtype=probs.data.dtype), (probs,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = sub(a, b)
    return mean_all(mul(diff, diff))
