"""Reverse-mode automatic differentiation on dense numpy arrays.

Small tape-based engine: every op records its parents and a closure that maps
the output gradient to per-parent gradients. Training runs in float32;
gradient checking runs the same graphs in float64.
"""

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense array plus gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def backward(self):
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.ndim != 0:
            raise ValueError(f"backward requires a scalar output, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValueError(f"dtype mismatch: {dt} vs {t.dtype}")
    return dt


def make_op(data, parents, grad_fn):
    """Build a graph node; extension ops in other modules go through this."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad, shape):
    # sum a broadcast gradient back down to the parent's shape
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and linear ops ---------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_dtypes(a, b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_op(out, (a, b), grad_fn)


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_dtypes(a, b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return make_op(out, (a, b), grad_fn)


def scale(a, c):
    c = float(c)
    out = a.data * c

    def grad_fn(g):
        return (g * c,)

    return make_op(out, (a,), grad_fn)


def matmul(a, b):
    """2D @ 2D, or batched 3D @ 3D with equal batch size."""
    _check_dtypes(a, b)
    sa, sb = a.data.shape, b.data.shape
    ok = (len(sa) == len(sb) == 2 and sa[1] == sb[0]) or (
        len(sa) == len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1]
    )
    if not ok:
        raise ValueError(f"matmul shape mismatch: {sa} vs {sb}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return make_op(out, (a, b), grad_fn)


def relu(x):
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return make_op(out, (x,), grad_fn)


def tanh(x):
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return make_op(out, (x,), grad_fn)


def gelu(x):
    """Gaussian error linear unit, tanh approximation."""
    c = 0.7978845608028654  # sqrt(2/pi)
    k = 0.044715
    xd = x.data
    u = np.tanh(c * (xd + k * xd**3))
    out = 0.5 * xd * (1.0 + u)

    def grad_fn(g):
        du = c * (1.0 + 3.0 * k * xd * xd) * (1.0 - u * u)
        return (g * (0.5 * (1.0 + u) + 0.5 * xd * du),)

    return make_op(out, (x,), grad_fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply a learned affine map.

    A constant row maps to the bias exactly (zero-centered input, gain times
    zero); eps keeps the inverse standard deviation finite.
    """
    _check_dtypes(x, gain, bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: {gain.data.shape}, {bias.data.shape} vs ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        dxhat = g * gain.data
        t1 = dxhat.sum(axis=-1, keepdims=True)
        t2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (inv / d) * (d * dxhat - t1 - xhat * t2)
        flat_g = g.reshape(-1, d)
        flat_h = xhat.reshape(-1, d)
        return dx, (flat_g * flat_h).sum(axis=0), flat_g.sum(axis=0)

    return make_op(out, (x, gain, bias), grad_fn)


def softmax_masked(x, mask):
    """Softmax over the last axis; mask=True entries are excluded exactly.

    Masked positions come out exactly zero. A fully masked row is rejected
    rather than producing NaN.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ValueError(f"softmax_masked mask shape {mask.shape} != input shape {x.data.shape}")
    if np.all(mask, axis=-1).any():
        raise ValueError("softmax_masked: fully masked row")
    z = x.data.copy()
    z[mask] = -np.inf
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return make_op(out, (x,), grad_fn)


# -- shape ops ---------------------------------------------------------


def reshape(x, shape):
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.data.shape),)

    return make_op(out, (x,), grad_fn)


def transpose(x, axes):
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inv),)

    return make_op(out, (x,), grad_fn)


def take_rows(x, idx):
    """Gather rows along axis 0; scattered gradient accumulates duplicates."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"take_rows index out of range for {x.data.shape[0]} rows")
    out = x.data[idx]

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return make_op(out, (x,), grad_fn)


def concat_rows(tensors):
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return make_op(out, tuple(tensors), grad_fn)


def slice_cols(x, start, stop):
    out = x.data[..., start:stop]

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        return (dx,)

    return make_op(out, (x,), grad_fn)


def repeat_rows(x, n):
    """Tile a vector [d] into [n, d]; gradient sums over the copies."""
    if x.data.ndim != 1:
        raise ValueError(f"repeat_rows expects a vector, got shape {x.data.shape}")
    out = np.broadcast_to(x.data, (n, x.data.shape[0])).copy()

    def grad_fn(g):
        return (g.sum(axis=0),)

    return make_op(out, (x,), grad_fn)


def segment_max(x, starts):
    """Columnwise max over contiguous row segments of a [P, D] array.

    `starts` are ascending segment offsets with starts[0] == 0; segments must
    be non-empty. Ties route the gradient to the lowest row index.
    """
    starts = np.asarray(starts, dtype=np.int64)
    p = x.data.shape[0]
    if starts.ndim != 1 or starts.size == 0 or starts[0] != 0:
        raise ValueError("segment_max: starts must be 1D, non-empty, and begin at 0")
    if np.any(np.diff(starts) < 1) or starts[-1] >= p:
        raise ValueError("segment_max: empty segment")
    out = np.maximum.reduceat(x.data, starts, axis=0)
    lengths = np.diff(np.append(starts, p))
    seg_of_row = np.repeat(np.arange(starts.size), lengths)

    def grad_fn(g):
        d = x.data.shape[1]
        hit = x.data == out[seg_of_row]
        row_ids = np.where(hit, np.arange(p)[:, None], p)
        first = np.minimum.reduceat(row_ids, starts, axis=0)  # [V, D]
        dx = np.zeros_like(x.data)
        cols = np.tile(np.arange(d), starts.size)
        np.add.at(dx, (first.ravel(), cols), g.ravel())
        return (dx,)

    return make_op(out, (x,), grad_fn)


def segment_mean(x, starts):
    """Columnwise mean over contiguous row segments of a [P, D] array."""
    starts = np.asarray(starts, dtype=np.int64)
    p = x.data.shape[0]
    if starts.ndim != 1 or starts.size == 0 or starts[0] != 0:
        raise ValueError("segment_mean: starts must be 1D, non-empty, and begin at 0")
    if np.any(np.diff(starts) < 1) or starts[-1] >= p:
        raise ValueError("segment_mean: empty segment")
    lengths = np.diff(np.append(starts, p)).astype(x.dtype)
    out = np.add.reduceat(x.data, starts, axis=0) / lengths[:, None]
    seg_of_row = np.repeat(np.arange(starts.size), np.diff(np.append(starts, p)))

    def grad_fn(g):
        return ((g / lengths[:, None])[seg_of_row],)

    return make_op(out, (x,), grad_fn)


# -- reductions --------------------------------------------------------


def sum_axis(x, axis, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).astype(x.dtype, copy=True),)

    return make_op(out, (x,), grad_fn)


def sum_all(x):
    out = x.data.sum()

    def grad_fn(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True),)

    return make_op(out, (x,), grad_fn)


def mean_all(x):
    n = x.data.size
    if n == 0:
        raise ValueError("mean_all over an empty tensor")
    return scale(sum_all(x), 1.0 / n)


# -- parameters --------------------------------------------------------


class Parameter:
    """Named trainable tensor; gradient buffer always exists."""

    def __init__(self, name, data):
        self.name = str(name)
        self.value = Tensor(data, requires_grad=True)
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def data(self):
        return self.value.data

    @data.setter
    def data(self, arr):
        if arr.shape != self.value.data.shape:
            raise ValueError(f"parameter {self.name}: shape {arr.shape} != {self.value.data.shape}")
        self.value.data = arr

    @property
    def grad(self):
        if self.value.grad is None:
            self.value.grad = np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self):
        if self.value.grad is None:
            self.value.grad = np.zeros_like(self.value.data)
        else:
            self.value.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.data.shape})"


def zero_grads(params):
    for p in params:
        p.zero_grad()


# -- gradient checking -------------------------------------------------


class GradCheckEntry:
    def __init__(self, name, n_checked, max_rel, worst_index, analytic, numeric):
        self.name = name
        self.n_checked = n_checked
        self.max_rel = max_rel
        self.worst_index = worst_index
        self.analytic = analytic
        self.numeric = numeric

    def __repr__(self):
        return (f"{self.name}: max_rel={self.max_rel:.3e} over {self.n_checked} elems "
                f"(worst flat index {self.worst_index}: analytic={self.analytic:.6e} numeric={self.numeric:.6e})")


class GradCheckReport:
    def __init__(self, entries, tol, failures):
        self.entries = entries
        self.tol = tol
        self.failures = list(failures)

    @property
    def max_rel(self):
        return max((e.max_rel for e in self.entries), default=0.0)

    @property
    def passed(self):
        return not self.failures and self.max_rel < self.tol

    def __str__(self):
        lines = [repr(e) for e in self.entries]
        lines += [f"FAILURE: {msg}" for msg in self.failures]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict} (max relative error {self.max_rel:.3e}, tolerance {self.tol:.1e})")
        return "\n".join(lines)


def grad_check(fn, inputs, tol=1e-4, step=1e-5, sample_per_tensor=None, seed=0):
    """Compare analytic gradients of a scalar-valued fn against central differences.

    Inputs must be float64 Tensors or Parameters. Relative error uses
    |a - n| / max(|a|, |n|, 1e-6). `sample_per_tensor` bounds the number of
    perturbed elements per input (seeded subset) to keep large checks cheap.
    """
    tensors = []
    names = []
    for i, item in enumerate(inputs):
        if isinstance(item, Parameter):
            tensors.append(item.value)
            names.append(item.name)
        else:
            tensors.append(item)
            names.append(f"input[{i}]")
    failures = []
    for name, t in zip(names, tensors):
        if t.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 inputs, {name} is {t.dtype}")
        if not np.isfinite(t.data).all():
            raise ValueError(f"grad_check input {name} contains non-finite values")
        t.requires_grad = True
        t.grad = None

    out = fn(*tensors)
    if out.data.ndim != 0:
        raise ValueError(f"grad_check target must return a scalar, got shape {out.data.shape}")
    if not np.isfinite(out.data):
        failures.append("forward value is not finite")
        return GradCheckReport([], tol, failures)
    out.backward()

    analytic = []
    for name, t in zip(names, tensors):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            failures.append(f"analytic gradient of {name} is not finite")
        analytic.append(g.ravel().copy())

    # finite differences do not need the tape
    for t in tensors:
        t.requires_grad = False
    rng = np.random.default_rng(seed)
    entries = []
    try:
        for name, t, ana in zip(names, tensors, analytic):
            flat = t.data.ravel()
            n = flat.size
            if sample_per_tensor is not None and n > sample_per_tensor:
                picks = np.sort(rng.choice(n, size=sample_per_tensor, replace=False))
            else:
                picks = np.arange(n)
            max_rel, worst, a_w, n_w = 0.0, -1, 0.0, 0.0
            for j in picks:
                x0 = flat[j]
                flat[j] = x0 + step
                f1 = float(fn(*tensors).data)
                flat[j] = x0 - step
                f2 = float(fn(*tensors).data)
                flat[j] = x0
                num = (f1 - f2) / (2.0 * step)
                rel = abs(ana[j] - num) / max(abs(ana[j]), abs(num), 1e-6)
                if rel > max_rel:
                    max_rel, worst, a_w, n_w = rel, int(j), float(ana[j]), num
            entries.append(GradCheckEntry(name, len(picks), max_rel, worst, a_w, n_w))
            if max_rel >= tol:
                failures.append(f"{name}: relative error {max_rel:.3e} >= {tol:.1e}")
    finally:
        for t in tensors:
            t.requires_grad = True
    return GradCheckReport(entries, tol, failures)
