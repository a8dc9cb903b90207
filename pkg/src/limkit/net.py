"""Reverse-mode differentiation tape over numpy arrays, plus the network
building blocks used by the residual correction models: dense maps, LSTM
cells, month-conditioned affine modulation, AdamW, and cosine annealing.

The primitive set is deliberately small (add, mul, matmul, sigmoid, tanh,
abs, sum, mean, slice, concat, reshape); everything the models need is
composed from it, and every primitive carries an exact vector-Jacobian
product. Graphs are built eagerly; ``backward`` on a scalar loss fills the
``grad`` field of every tensor that requires it.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError
from .io import Reader, Writer

__all__ = [
    "Tensor",
    "concat",
    "backward",
    "lstm_cell",
    "init_lstm",
    "init_dense",
    "dense",
    "LstmParams",
    "MonthEmbedding",
    "film",
    "AdamW",
    "cosine_lr",
    "params_to_bytes",
    "params_from_bytes",
]


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node of the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
            else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    # -------------------------------------------------- shape plumbing
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -------------------------------------------------- arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def vjp(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _vjp=vjp, op="add")

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def vjp(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _vjp=vjp, op="mul")

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out_data = a @ b

        def vjp(g):
            if self.requires_grad:
                self._accumulate(g @ b.T if b.ndim == 2 else np.outer(g, b))
            if other.requires_grad:
                other._accumulate(a.T @ g)

        return Tensor(out_data, _parents=(self, other), _vjp=vjp, op="matmul")

    # -------------------------------------------------- nonlinearities
    def sigmoid(self):
        x = self.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)

        def vjp(g):
            if self.requires_grad:
                self._accumulate(g * s * (1.0 - s))

        return Tensor(s, _parents=(self,), _vjp=vjp, op="sigmoid")

    def tanh(self):
        t = np.tanh(self.data)

        def vjp(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - t * t))

        return Tensor(t, _parents=(self,), _vjp=vjp, op="tanh")

    def abs(self):
        sign = np.sign(self.data)  # subgradient 0 at 0

        def vjp(g):
            if self.requires_grad:
                self._accumulate(g * sign)

        return Tensor(np.abs(self.data), _parents=(self,), _vjp=vjp, op="abs")

    # -------------------------------------------------- reductions
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def vjp(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy() if np.ndim(g) == 0
                                 else np.full(shape, g))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, shape).copy())

        return Tensor(out_data, _parents=(self,), _vjp=vjp, op="sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -------------------------------------------------- indexing / shape
    def __getitem__(self, key):
        out_data = self.data[key]
        shape = self.data.shape

        def vjp(g):
            if self.requires_grad:
                full = np.zeros(shape)
                np.add.at(full, key, g)
                self._accumulate(full)

        return Tensor(out_data, _parents=(self,), _vjp=vjp, op="slice")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        orig = self.data.shape

        def vjp(g):
            if self.requires_grad:
                self._accumulate(g.reshape(orig))

        return Tensor(out_data, _parents=(self,), _vjp=vjp, op="reshape")

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accumulate(g[tuple(sl)])

    return Tensor(out_data, _parents=tuple(tensors), _vjp=vjp, op="concat")


def backward(loss):
    """Populate ``grad`` of every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


# ====================================================================
# layers
# ====================================================================


class LstmParams:
    """One LSTM layer: stacked gate weights in (input, forget, cell, output)
    order, so rows [0:h] drive the input gate, [h:2h] the forget gate,
    [2h:3h] the cell candidate, and [3h:4h] the output gate."""

    def __init__(self, W, U, b):
        self.W = W  # [4h, n_in]
        self.U = U  # [4h, h]
        self.b = b  # [4h]

    @property
    def hidden(self):
        return self.U.shape[1]

    def tensors(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.U": self.U, f"{prefix}.b": self.b}


class MonthEmbedding:
    """Per-calendar-month affine modulation coefficients, zero-initialized."""

    def __init__(self, alpha, beta):
        self.alpha = alpha  # [12, h]
        self.beta = beta  # [12, h]

    def tensors(self, prefix):
        return {f"{prefix}.alpha": self.alpha, f"{prefix}.beta": self.beta}


def init_lstm(rng, n_in, hidden):
    """Uniform +-1/sqrt(h) weights; forget-gate bias +1 for long memory."""
    s = 1.0 / np.sqrt(hidden)
    W = Tensor(rng.uniform(-s, s, (4 * hidden, n_in)), requires_grad=True)
    U = Tensor(rng.uniform(-s, s, (4 * hidden, hidden)), requires_grad=True)
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0
    return LstmParams(W, U, Tensor(b, requires_grad=True))


def init_dense(rng, n_in, n_out, zero=False):
    """Dense layer as a (W, b) pair; ``zero=True`` for output projections."""
    if zero:
        W = Tensor(np.zeros((n_out, n_in)), requires_grad=True)
    else:
        s = 1.0 / np.sqrt(n_in)
        W = Tensor(rng.uniform(-s, s, (n_out, n_in)), requires_grad=True)
    return W, Tensor(np.zeros(n_out), requires_grad=True)


def init_month_embedding(hidden):
    return MonthEmbedding(Tensor(np.zeros((12, hidden)), requires_grad=True),
                          Tensor(np.zeros((12, hidden)), requires_grad=True))


def dense(x, W, b):
    # x: [B, n_in]; keep the transpose inside the graph via matmul on W.
    return x @ _transpose(W) + b


def _transpose(t):
    out_data = t.data.T

    def vjp(g):
        if t.requires_grad:
            t._accumulate(g.T)

    return Tensor(out_data, _parents=(t,), _vjp=vjp, op="transpose")


def lstm_cell(x, h, c, params):
    """Standard LSTM step.

    ``i, f, o`` are sigmoid gates, ``g`` the tanh cell candidate;
    ``c' = f*c + i*g`` and ``h' = o*tanh(c')``. Accepts [B, n] batches or
    single [n] vectors.
    """
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
        h = h.reshape(1, -1)
        c = c.reshape(1, -1)
    hdim = params.hidden
    gates = dense(x, params.W, params.b) + h @ _transpose(params.U)
    i = gates[:, 0 * hdim : 1 * hdim].sigmoid()
    f = gates[:, 1 * hdim : 2 * hdim].sigmoid()
    g = gates[:, 2 * hdim : 3 * hdim].tanh()
    o = gates[:, 3 * hdim : 4 * hdim].sigmoid()
    c_new = f * c + i * g
    h_new = o * c_new.tanh()
    if single:
        return h_new.reshape(hdim), c_new.reshape(hdim)
    return h_new, c_new


def film(h, month, emb):
    """Month-conditioned affine modulation ``(1 + alpha_m) * h + beta_m``.

    ``month`` is a calendar month (1..12) or an int array of months, one
    per batch row.
    """
    idx = np.asarray(month, dtype=np.int64) - 1
    if idx.ndim == 0 and h.ndim > 1:
        idx = np.full(h.shape[0], int(idx))
    alpha = emb.alpha[idx]
    beta = emb.beta[idx]
    return (alpha + 1.0) * h + beta


# ====================================================================
# optimization
# ====================================================================


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    Decay is applied to the parameter directly (``p *= 1 - lr*wd``) before
    the adaptive step, so with ``weight_decay=0`` the update is exactly
    Adam.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for {k}", step=t)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(step, total_steps, lr_max, lr_min):
    """Cosine annealing from ``lr_max`` (step 0) to ``lr_min`` (last step)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


# ====================================================================
# checkpoint payload
# ====================================================================

NETP_VERSION = 1


def params_to_bytes(params, seed=0, step=0, opt_state=None):
    """Encode a name->Tensor table (optionally with AdamW moments)."""
    w = Writer()
    w.i64(int(seed))
    w.u64(int(step))
    w.u32(len(params))
    for name in sorted(params):
        w.string(name)
        w.array(params[name].data)
    if opt_state is None:
        w.u8(0)
    else:
        w.u8(1)
        for name in sorted(params):
            w.array(opt_state.m[name])
            w.array(opt_state.v[name])
    return w.getvalue()


def params_from_bytes(payload):
    """Decode to (name->array dict, seed, step, opt_moments or None)."""
    r = Reader(payload)
    seed = r.i64("seed")
    step = r.u64("step")
    n = r.u32("n_params")
    params = {}
    for _ in range(n):
        name = r.string("param_name")
        params[name] = r.array(name)
    moments = None
    if r.u8("opt_flag"):
        moments = {}
        for name in sorted(params):
            moments[name] = (r.array("m"), r.array("v"))
    return params, seed, step, moments
