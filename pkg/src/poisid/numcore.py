"""Small reverse-mode differentiation kernel over 2-D float64 arrays.

Only the handful of operators needed by the residual-quantized autoencoder
are provided. Every node records its parents and a backward rule; nodes are
numbered on creation so the tape is topologically ordered by construction.
"""

import itertools
from collections import OrderedDict

import numpy as np

CHECKPOINT_HEADER = "poisid-params v1"

_node_ids = itertools.count()


class Tensor:
    __slots__ = ("value", "grad", "op", "parents", "backward_fn", "requires_grad", "id")

    def __init__(self, value, op="leaf", parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.id = next(_node_ids)

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"


def as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, -1)
    elif x.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got shape {x.shape}")
    return x


def constant(x):
    return Tensor(as_2d(x))


def parameter(x):
    return Tensor(as_2d(x).copy(), requires_grad=True)


def _check_finite(op, value):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op}: non-finite value produced")
    return value


def _node(op, value, parents, backward_fn):
    _check_finite(op, value)
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, op, parents if needs else (), backward_fn if needs else None, needs)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def affine(x, W, b):
    """y = x @ W + b with x (n, i), W (i, o), b (1, o)."""
    if x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise ValueError(f"affine: shape mismatch x{x.shape} W{W.shape} b{b.shape}")
    y = x.value @ W.value + b.value

    def backward(g):
        return (g @ W.value.T, x.value.T @ g, g.sum(axis=0, keepdims=True))

    return _node("affine", y, (x, W, b), backward)


def relu(x):
    mask = x.value > 0
    return _node("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def add(a, b):
    _same_shape("add", a, b)
    return _node("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _node("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c):
    c = float(c)
    return _node("scale", a.value * c, (a,), lambda g: (g * c,))


def total(*terms):
    """Sum of scalar (1, 1) tensors."""
    for t in terms:
        if t.shape != (1, 1):
            raise ValueError(f"total: expected scalars, got {t.shape}")
    value = sum((t.value for t in terms), np.zeros((1, 1)))
    return _node("total", value, terms, lambda g: tuple(g for _ in terms))


def stop_gradient(x):
    # Forward identity; the result is a fresh leaf so nothing flows upstream.
    return Tensor(x.value, op="stop_gradient")


def straight_through(z_e, z_q):
    """Forward value of z_q; gradient passes to z_e unchanged."""
    _same_shape("straight_through", z_e, z_q)
    return add(z_e, stop_gradient(sub(z_q, z_e)))


def take_rows(C, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= C.shape[0])):
        raise ValueError(f"take_rows: indices out of range for {C.shape[0]} rows")

    def backward(g):
        gc = np.zeros_like(C.value)
        np.add.at(gc, idx, g)
        return (gc,)

    return _node("take_rows", C.value[idx], (C,), backward)


def mse(a, b):
    """Mean of squared elementwise differences."""
    _same_shape("mse", a, b)
    d = a.value - b.value
    n = d.size

    def backward(g):
        ga = g[0, 0] * 2.0 * d / n
        return (ga, -ga)

    return _node("mse", np.array([[np.mean(d * d)]]), (a, b), backward)


def mean_row_sqnorm(x):
    """Mean over rows of each row's squared L2 norm."""
    n = x.shape[0]
    v = x.value
    return _node(
        "mean_row_sqnorm",
        np.array([[np.sum(v * v) / n]]),
        (x,),
        lambda g: (g[0, 0] * 2.0 * v / n,),
    )


def sq_dist_rows(X, C):
    """Pairwise squared distances, out[i, j] = ||X_i - C_j||^2."""
    if X.shape[1] != C.shape[1]:
        raise ValueError(f"sq_dist_rows: shape mismatch {X.shape} vs {C.shape}")
    x, c = X.value, C.value
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    d = np.maximum(d, 0.0)

    def backward(g):
        gx = 2.0 * (g.sum(1)[:, None] * x - g @ c)
        gc = 2.0 * (g.sum(0)[:, None] * c - g.T @ x)
        return (gx, gc)

    return _node("sq_dist_rows", d, (X, C), backward)


def group_compactness(R, groups, n_groups):
    """Sum over groups of the mean pairwise squared distance among member rows.

    For a group with k >= 2 members the contribution is
    (1 / (k (k - 1))) * sum_{i != j} ||r_i - r_j||^2; smaller groups add 0.
    Uses sum_{i != j} ||r_i - r_j||^2 = 2 k S - 2 ||s||^2 with s the member
    sum and S the sum of member squared norms.
    """
    groups = np.asarray(groups, dtype=np.int64)
    r = R.value
    counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
    sums = np.zeros((n_groups, r.shape[1]))
    np.add.at(sums, groups, r)
    sqsums = np.bincount(groups, weights=(r * r).sum(1), minlength=n_groups)
    weight = np.zeros(n_groups)
    big = counts >= 2
    weight[big] = 1.0 / (counts[big] * (counts[big] - 1.0))
    per_group = 2.0 * counts * sqsums - 2.0 * (sums * sums).sum(1)
    value = float(np.sum(weight * per_group))

    def backward(g):
        w = weight[groups][:, None]
        k = counts[groups][:, None]
        return (g[0, 0] * w * (4.0 * k * r - 4.0 * sums[groups]),)

    return _node("group_compactness", np.array([[value]]), (R,), backward)


def soft_count_deviation(D, tau):
    """(1/N) * sum_j |c_j - N/K| with soft counts c_j = sum_i softmax(-D_i / tau)_j.

    ``D`` holds (N, K) squared distances to the K codewords.
    """
    n, k = D.shape
    logits = -D.value / tau
    logits = logits - logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    counts = P.sum(axis=0)
    dev = counts - n / k
    s = np.sign(dev) / n

    def backward(g):
        inner = (P * s[None, :]).sum(axis=1, keepdims=True)
        return (g[0, 0] * (-1.0 / tau) * P * (s[None, :] - inner),)

    return _node("soft_count_deviation", np.array([[np.abs(dev).sum() / n]]), (D,), backward)


def backward(loss):
    """Reverse-mode accumulation from a scalar root into every reachable node.

    Parameter leaves accumulate into ``.grad``; call ``ParamStore.zero_grad``
    between steps.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward: root must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in nodes or not node.requires_grad:
            continue
        nodes[node.id] = node
        stack.extend(node.parents)
    upstream = {loss.id: np.ones((1, 1))}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = upstream.pop(nid, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            _check_finite(f"{node.op} (backward)", pg)
            upstream[parent.id] = upstream[parent.id] + pg if parent.id in upstream else pg


class ParamStore:
    """Named parameters with gradient slots and Adam moment estimates."""

    def __init__(self):
        self.params = OrderedDict()
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = parameter(value)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def values(self):
        return {k: t.value for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grad(self, name):
        g = self.params[name].grad
        return np.zeros_like(self.params[name].value) if g is None else g

    def snapshot(self):
        return {k: t.value.copy() for k, t in self.params.items()}

    def restore(self, snap):
        for k, v in snap.items():
            self.params[k].value = v.copy()


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grad(name)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += eps
        p.value = p.value - (lr / c1) * m / denom


def save_params(arrays, path):
    """Write named 2-D arrays as text; repr() of a float round-trips exactly."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(CHECKPOINT_HEADER + "\n")
        for name, arr in arrays.items():
            arr = as_2d(arr)
            f.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                f.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_params(path):
    out = OrderedDict()
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise ValueError(f"{path}: unsupported checkpoint header {header!r}")
        while True:
            line = f.readline()
            if not line:
                break
            name, rows, cols = line.split()
            rows, cols = int(rows), int(cols)
            arr = np.empty((rows, cols))
            for i in range(rows):
                arr[i] = [float(x) for x in f.readline().split()]
            out[name] = arr
    return out
