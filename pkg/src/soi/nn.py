"""Reverse-mode differentiation over numpy arrays, sized for small MLP stacks.

Covers exactly the operations the dynamics model needs: affine maps, ReLU,
concatenation, row gather / segment scatter-add, row means and norms. Not a
general autodiff framework; shapes are ordinary numpy, values float64.

Gradient arrays are treated as immutable: accumulation rebinds `.grad` to a
new array (or to the sole contribution) instead of mutating in place, so
contributions may be stored by reference, including views.
"""

import numpy as np
from scipy import sparse


class Tensor:
    """One node of the computation tape.

    `bwd`, when set, receives the accumulated output gradient and adds each
    parent's contribution into its `.grad` array.
    """

    __slots__ = ("value", "grad", "parents", "bwd", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = None
        self.requires_grad = requires_grad or any(
            p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def backward(self, seed=None):
        if seed is None:
            seed = np.ones_like(self.value)
        backward_multi([(self, seed)])


def _accum(t, g):
    t.grad = g if t.grad is None else t.grad + g


def backward_multi(roots):
    """Run one backward sweep from several seeded roots.

    `roots` is a list of (tensor, seed-gradient) pairs. Gradients of shared
    ancestors accumulate across roots, which is what a sum-of-losses over a
    rollout needs. Overwrites `.grad` on every reachable tensor.
    """
    topo = []
    visited = set()
    for root, _ in roots:
        if not root.requires_grad or id(root) in visited:
            continue
        visited.add(id(root))
        stack = [(root, iter(root.parents))]
        while stack:
            node, it = stack[-1]
            child = next(
                (p for p in it
                 if p.requires_grad and id(p) not in visited), None)
            if child is None:
                topo.append(node)
                stack.pop()
            else:
                visited.add(id(child))
                stack.append((child, iter(child.parents)))
    for node in topo:
        node.grad = None
    for root, seed in roots:
        if root.requires_grad:
            _accum(root, np.asarray(seed, dtype=np.float64))
    for node in reversed(topo):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class ScatterPlan:
    """Precomputed sort/segment structure for repeated bucket sums over one
    index array (the same senders/receivers are reused round after round)."""

    __slots__ = ("idx", "n", "order", "starts", "targets")

    def __init__(self, idx, n):
        self.idx = np.asarray(idx)
        self.n = n
        self.order = np.argsort(self.idx, kind="stable")
        sidx = self.idx[self.order]
        if len(sidx):
            self.starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
            self.targets = sidx[self.starts]
        else:
            self.starts = np.zeros(0, dtype=int)
            self.targets = np.zeros(0, dtype=int)

    def sum(self, rows):
        out = np.zeros((self.n,) + rows.shape[1:], dtype=np.float64)
        if len(self.idx):
            out[self.targets] = np.add.reduceat(rows[self.order], self.starts,
                                                axis=0)
        return out


def segment_sum(rows, idx, n):
    """Sum `rows` into `n` buckets by `idx`; faster than np.add.at."""
    return ScatterPlan(idx, n).sum(rows)


class FixedMap:
    """A constant row-selection/aggregation matrix with cached transpose, so
    gathers and (optionally weighted) bucket sums run as sparse products."""

    __slots__ = ("mat", "mat_t")

    def __init__(self, rows, cols, n_rows, n_cols, data=None):
        if data is None:
            data = np.ones(len(np.asarray(rows)), dtype=np.float64)
        self.mat = sparse.csr_matrix((data, (rows, cols)),
                                     shape=(n_rows, n_cols))
        self.mat_t = self.mat.T.tocsr()


def spmm(fmap, x):
    """fmap.mat @ x with reverse mode through the constant sparse matrix."""
    out = Tensor(fmap.mat @ x.value, (x,))

    def bwd(g):
        if x.requires_grad:
            _accum(x, fmap.mat_t @ g)

    out.bwd = bwd
    return out


def matmul(a, b):
    out = Tensor(a.value @ b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.value.T)
        if b.requires_grad:
            _accum(b, a.value.T @ g)

    out.bwd = bwd
    return out


def add(a, b):
    out = Tensor(a.value + b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.value.shape))

    out.bwd = bwd
    return out


def sub(a, b):
    out = Tensor(a.value - b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accum(b, -_unbroadcast(g, b.value.shape))

    out.bwd = bwd
    return out


def mul(a, b):
    out = Tensor(a.value * b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out.bwd = bwd
    return out


_RELU_TRACE = None


class relu_trace:
    """Context manager collecting every ReLU pre-activation array, used to
    keep finite-difference probes away from the kinks."""

    def __enter__(self):
        global _RELU_TRACE
        _RELU_TRACE = self.values = []
        return self.values

    def __exit__(self, *exc):
        global _RELU_TRACE
        _RELU_TRACE = None
        return False


def relu(a):
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(a.value)
    out = Tensor(np.maximum(a.value, 0.0), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (a.value > 0.0))

    out.bwd = bwd
    return out


def concat(parts, axis=-1):
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis),
                 tuple(parts))
    ax = axis if axis >= 0 else parts[0].value.ndim + axis
    splits = np.cumsum([p.value.shape[ax] for p in parts])[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=ax)):
            if p.requires_grad:
                _accum(p, piece)

    out.bwd = bwd
    return out


def gather(a, idx, plan=None):
    """Row selection: out[k] = a[idx[k]]. An optional ScatterPlan over `idx`
    (with n = len(a)) speeds up the backward bucket sum."""
    idx = np.asarray(idx)
    out = Tensor(a.value[idx], (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, plan.sum(g) if plan is not None
                   else segment_sum(g, idx, len(a.value)))

    out.bwd = bwd
    return out


def scatter_add(src, idx, n, plan=None):
    """out[i] = sum of src rows whose idx equals i; out has n rows."""
    idx = np.asarray(idx)
    if plan is None:
        plan = ScatterPlan(idx, n)
    out = Tensor(plan.sum(src.value), (src,))

    def bwd(g):
        if src.requires_grad:
            _accum(src, g[idx])

    out.bwd = bwd
    return out


def mean_rows(a):
    """Column means of a 2-D tensor: (N, F) -> (F,)."""
    n = len(a.value)
    out = Tensor(a.value.mean(axis=0), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / n, a.value.shape))

    out.bwd = bwd
    return out


def norm_rows(a, floor=1e-12):
    """Euclidean row norms: (N, F) -> (N, 1); gradient guarded at zero."""
    val = np.sqrt((a.value**2).sum(axis=1, keepdims=True))
    out = Tensor(val, (a,))
    denom = np.maximum(val, floor)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * a.value / denom)

    out.bwd = bwd
    return out


class Linear:
    """Affine layer; fan-in-scaled uniform weight init, zero bias."""

    def __init__(self, n_in, n_out, rng):
        lim = np.sqrt(6.0 / n_in)
        self.w = Tensor(rng.uniform(-lim, lim, (n_in, n_out)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)

    @property
    def params(self):
        return [self.w, self.b]


class Mlp:
    """Stack of Linear layers with ReLU between them (none on the output)."""

    def __init__(self, sizes, rng):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layers = [Linear(sizes[i], sizes[i + 1], rng)
                       for i in range(len(sizes) - 1)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def infer(self, x):
        """Same arithmetic as __call__ on a plain array, without the tape.
        The first matmul leaves the caller's array untouched; later ops run
        in place on the fresh intermediates."""
        for i, layer in enumerate(self.layers):
            x = x @ layer.w.value
            x += layer.b.value
            if i < len(self.layers) - 1:
                np.maximum(x, 0.0, out=x)
        return x

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]


class Adam:
    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                raise ValueError("parameter has no gradient; run backward first")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
