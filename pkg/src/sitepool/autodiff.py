"""Minimal reverse-mode automatic differentiation over dense arrays.

Define-by-run: every op builds a Node holding its value, its parents and a
closure producing parent gradients. Graphs are rebuilt per minibatch and all
arithmetic is float64. The vocabulary is fixed to what the training losses
need, including fused batched ops for the skew-coordinates-to-rotation head.
"""

from __future__ import annotations

import numpy as np

from .liegroup import DimensionError, ambient_dim_from_algebra


class NumericError(RuntimeError):
    """A numerically unsafe operation (e.g. near-singular inverse)."""


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class Parameter(Node):
    __slots__ = ("name",)

    def __init__(self, value, name):
        super().__init__(np.array(value, dtype=np.float64))
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def constant(value) -> Node:
    return Node(value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _toposort(root: Node):
    order, seen, stack = [], set(), [(root, False)]
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


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every reachable node."""
    if root.value.shape != ():
        raise DimensionError(f"backward root must be scalar, got shape {root.value.shape}")
    order = _toposort(root)
    grads = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _require_same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _require_same_shape(a, b, "add")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _require_same_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def elementwise_mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _require_same_shape(a, b, "elementwise_mul")
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return Node(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Node:
    a = _as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a) -> Node:
    a = _as_node(a)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    out = a.value * sig
    return Node(out, (a,), lambda g: (g * (sig + out * (1.0 - sig)),))


def square(a) -> Node:
    a = _as_node(a)
    return Node(a.value ** 2, (a,), lambda g: (2.0 * g * a.value,))


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def sum_all(a) -> Node:
    a = _as_node(a)
    return Node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def mean_all(a) -> Node:
    a = _as_node(a)
    count = a.value.size
    return Node(a.value.mean(), (a,),
                lambda g: (np.broadcast_to(g / count, a.value.shape).copy(),))


def frobenius_sq(a) -> Node:
    a = _as_node(a)
    return Node(np.sum(a.value ** 2), (a,), lambda g: (2.0 * g * a.value,))


# ---------------------------------------------------------------------------
# linear-algebra ops


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.value.shape}, {b.value.shape}")
    return Node(a.value @ b.value, (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def matvec(mat, vec) -> Node:
    mat, vec = _as_node(mat), _as_node(vec)
    if mat.value.ndim != 2 or vec.value.ndim != 1 or mat.value.shape[1] != vec.value.size:
        raise DimensionError(f"matvec: incompatible shapes {mat.value.shape}, {vec.value.shape}")
    return Node(mat.value @ vec.value, (mat, vec),
                lambda g: (np.outer(g, vec.value), mat.value.T @ g))


def transpose(a) -> Node:
    a = _as_node(a)
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects rank 2, got shape {a.value.shape}")
    return Node(a.value.T, (a,), lambda g: (g.T,))


def mat_inverse(a) -> Node:
    a = _as_node(a)
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise DimensionError(f"mat_inverse expects a square matrix, got {a.value.shape}")
    cond = np.linalg.cond(a.value)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericError(f"matrix too ill-conditioned to invert (cond ~ {cond:.3e})")
    inv = np.linalg.inv(a.value)
    return Node(inv, (a,), lambda g: (-inv.T @ g @ inv.T,))


def bias_add(x, b) -> Node:
    """Row-broadcast bias: (B, d) + (d,), or plain (d,) + (d,)."""
    x, b = _as_node(x), _as_node(b)
    if x.value.ndim == 2 and b.value.ndim == 1 and x.value.shape[1] == b.value.size:
        return Node(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))
    if x.value.shape == b.value.shape:
        return Node(x.value + b.value, (x, b), lambda g: (g, g))
    raise DimensionError(f"bias_add: incompatible shapes {x.value.shape}, {b.value.shape}")


def l2_normalize(a) -> Node:
    """Normalize to unit length; rows independently for rank-2 input."""
    a = _as_node(a)
    if a.value.ndim == 1:
        norm = np.linalg.norm(a.value)
        out = a.value / norm

        def back(g):
            return ((g - out * (out @ g)) / norm,)

        return Node(out, (a,), back)
    if a.value.ndim == 2:
        norms = np.linalg.norm(a.value, axis=1, keepdims=True)
        out = a.value / norms

        def back2(g):
            dots = np.sum(out * g, axis=1, keepdims=True)
            return ((g - out * dots) / norms,)

        return Node(out, (a,), back2)
    raise DimensionError(f"l2_normalize expects rank 1 or 2, got shape {a.value.shape}")


# ---------------------------------------------------------------------------
# fused batched ops for the rotation head and losses


def skew_cayley(coords) -> Node:
    """Map rows of skew coordinates (B, m) to flattened rotations (B, n*n).

    Each row is embedded as an antisymmetric matrix A and pushed through the
    Cayley map (I - A)(I + A)^{-1}. The adjoint uses only the cached inverse:
    dL/dA = -(I + R)^T G P^T with P = (I + A)^{-1}, projected back to the
    upper-triangle coordinates.
    """
    coords = _as_node(coords)
    if coords.value.ndim != 2:
        raise DimensionError(f"skew_cayley expects (B, m), got {coords.value.shape}")
    batch, m = coords.value.shape
    n = ambient_dim_from_algebra(m)
    rows, cols = np.triu_indices(n, k=1)
    amat = np.zeros((batch, n, n))
    amat[:, rows, cols] = coords.value
    amat[:, cols, rows] = -coords.value
    eye = np.eye(n)
    pmat = np.linalg.inv(eye + amat)
    rmat = (eye - amat) @ pmat

    def back(g):
        gmat = g.reshape(batch, n, n)
        ga = -np.einsum("bji,bjk,blk->bil", eye + rmat, gmat, pmat)
        return ((ga[:, rows, cols] - ga[:, cols, rows]),)

    return Node(rmat.reshape(batch, n * n), (coords,), back)


def left_apply(stack: np.ndarray, flats) -> Node:
    """Row-wise product of constant rotations with flattened matrices.

    stack is a constant (B, n, n) array; flats a (B, n*n) node. Row b of the
    output is (stack[b] @ mat(flats[b])).ravel().
    """
    flats = _as_node(flats)
    batch, nsq = flats.value.shape
    n = stack.shape[-1]
    if stack.shape != (batch, n, n) or nsq != n * n:
        raise DimensionError(f"left_apply: stack {stack.shape} vs flats {flats.value.shape}")
    out = np.einsum("bij,bjk->bik", stack, flats.value.reshape(batch, n, n))

    def back(g):
        gm = g.reshape(batch, n, n)
        return (np.einsum("bji,bjk->bik", stack, gm).reshape(batch, nsq),)

    return Node(out.reshape(batch, nsq), (flats,), back)


def rowwise_matvec(flats, vecs, transpose_mat: bool = False) -> Node:
    """Row-wise matrix-vector products between two nodes.

    flats holds flattened (B, n*n) matrices, vecs is (B, n); row b of the
    output is M_b @ v_b, or M_b^T v_b when transpose_mat is set.
    """
    flats, vecs = _as_node(flats), _as_node(vecs)
    batch, nvec = vecs.value.shape
    n = int(round(np.sqrt(flats.value.shape[1])))
    if flats.value.shape != (batch, n * n) or nvec != n:
        raise DimensionError(
            f"rowwise_matvec: flats {flats.value.shape} vs vecs {vecs.value.shape}")
    mats = flats.value.reshape(batch, n, n)
    if transpose_mat:
        out = np.einsum("bji,bj->bi", mats, vecs.value)

        def back_t(g):
            gm = np.einsum("bj,bi->bji", vecs.value, g)
            return (gm.reshape(batch, n * n), np.einsum("bij,bj->bi", mats, g))

        return Node(out, (flats, vecs), back_t)
    out = np.einsum("bij,bj->bi", mats, vecs.value)

    def back(g):
        gm = np.einsum("bi,bj->bij", g, vecs.value)
        return (gm.reshape(batch, n * n), np.einsum("bji,bj->bi", mats, g))

    return Node(out, (flats, vecs), back)


def pairwise_sqdist(x, y) -> Node:
    """All squared euclidean distances between rows of x (a, d) and y (b, d)."""
    x, y = _as_node(x), _as_node(y)
    if x.value.ndim != 2 or y.value.ndim != 2 or x.value.shape[1] != y.value.shape[1]:
        raise DimensionError(f"pairwise_sqdist: shapes {x.value.shape}, {y.value.shape}")
    diff = x.value[:, None, :] - y.value[None, :, :]
    out = np.einsum("abd,abd->ab", diff, diff)

    def back(g):
        gx = 2.0 * (g.sum(axis=1)[:, None] * x.value - g @ y.value)
        gy = 2.0 * (g.sum(axis=0)[:, None] * y.value - g.T @ x.value)
        return (gx, gy)

    return Node(out, (x, y), back)


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Batch normalization over the row axis using batch statistics."""
    x, gamma, beta = _as_node(x), _as_node(gamma), _as_node(beta)
    if x.value.ndim != 2:
        raise DimensionError(f"batch_norm expects (B, d), got {x.value.shape}")
    batch = x.value.shape[0]
    mu = x.value.mean(axis=0)
    var = x.value.var(axis=0)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * istd

    def back(g):
        dgamma = np.sum(g * xhat, axis=0)
        dbeta = np.sum(g, axis=0)
        dxhat = g * gamma.value
        dx = (istd / batch) * (batch * dxhat - dxhat.sum(axis=0)
                               - xhat * np.sum(dxhat * xhat, axis=0))
        return (dx, dgamma, dbeta)

    return Node(xhat * gamma.value + beta.value, (x, gamma, beta), back)


def softmax_cross_entropy(logits, labels: np.ndarray) -> Node:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    logits = _as_node(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.value.ndim != 2 or labels.shape != (logits.value.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.value.shape}, labels {labels.shape}")
    batch = labels.size
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(batch), labels].mean()

    def back(g):
        probs = np.exp(logp)
        probs[np.arange(batch), labels] -= 1.0
        return (g * probs / batch,)

    return Node(loss, (logits,), back)


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(f, params, h: float = 1e-5, max_coords_per_param: int = 40,
              rng_seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    f rebuilds the scalar graph from the current parameter values on each
    call. Coordinates are subsampled per parameter when a tensor is large.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    zero_grads(params)
    root = f()
    backward(root)
    analytic = [np.zeros_like(p.value) if p.grad is None else np.array(p.grad)
                for p in params]
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords_per_param:
            idx = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up = float(f().value)
            flat[k] = orig - h
            down = float(f().value)
            flat[k] = orig
            fd = (up - down) / (2.0 * h)
            a = ana.reshape(-1)[k]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
