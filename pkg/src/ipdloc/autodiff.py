"""Minimal dense-tensor reverse-mode autodiff on numpy, plus Adam.

Design notes:

* ``Tensor`` wraps a numpy array; ops build an acyclic tape.  ``backward``
  walks the tape with an iterative topological sort (recurrent graphs over
  hundreds of steps would blow Python's recursion limit otherwise) and
  accumulates gradients with ``+=``, so calling it twice doubles leaf grads.
* The LSTM runs as one fused node with a hand-derived backward-through-time
  rule; composing it from primitives would cost thousands of graph nodes
  per layer.  Gate order along the stacked axis is input, forget, cell,
  output.
* Everything inherits the dtype of its inputs: float32 for training,
  float64 for finite-difference validation.
* Reductions are index-order dependent in floating point; ``mean`` over an
  axis offers ``order_invariant=True`` which sorts along the axis before
  summing, making the result a function of the value multiset only.  The
  gradient (uniform 1/n) is unaffected.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph building inside the block.

    Ops return plain constants, and the fused LSTM skips its backward
    caches.  Inference over many utterances would otherwise accumulate
    cyclic graph garbage faster than the collector notices (numpy buffers
    are invisible to its heuristics).
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reversing numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array with an optional gradient and backward-graph link."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, free_graph: bool = False):
        """Reverse-mode sweep accumulating into ``grad`` (repeat calls add).

        ``free_graph=True`` drops every visited node's closure and parent
        links afterwards: the op closures each capture their output tensor,
        so graphs are reference cycles that plain refcounting never frees,
        and a training loop must break them itself to keep memory flat.
        The graph cannot be backpropagated again after freeing.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
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
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        # interior grads are per-sweep scratch; only leaf accumulators persist,
        # so a repeated backward adds the same gradient again instead of
        # propagating stale sums
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        if free_graph:
            for node in topo:
                node._backward = None
                node._parents = ()

    # -- elementwise and structural ops -------------------------------------

    @staticmethod
    def _wrap(other, dtype) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype))

    def __add__(self, other) -> "Tensor":
        other = self._wrap(other, self.dtype)
        try:
            data = self.data + other.data
        except ValueError as exc:
            raise ValueError(f"add shape mismatch: {self.shape} vs {other.shape}") from exc

        def backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad, other.shape))

        out = self._result(data, (self, other), backward)
        return out

    def __neg__(self) -> "Tensor":
        def backward():
            if self.requires_grad:
                self._accumulate(-out.grad)

        out = self._result(-self.data, (self,), backward)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-self._wrap(other, self.dtype))

    def __mul__(self, other) -> "Tensor":
        other = self._wrap(other, self.dtype)
        try:
            data = self.data * other.data
        except ValueError as exc:
            raise ValueError(f"mul shape mismatch: {self.shape} vs {other.shape}") from exc

        def backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

        out = self._result(data, (self, other), backward)
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError(f"matmul needs rank >= 2: {self.shape} @ {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        data = np.matmul(self.data, other.data)

        def backward():
            if self.requires_grad:
                g = np.matmul(out.grad, np.swapaxes(other.data, -1, -2))
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                g = np.matmul(np.swapaxes(self.data, -1, -2), out.grad)
                other._accumulate(_unbroadcast(g, other.shape))

        out = self._result(data, (self, other), backward)
        return out

    def __matmul__(self, other):
        return self.matmul(other)

    def __getitem__(self, key) -> "Tensor":
        def backward():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                g[key] += out.grad
                self._accumulate(g)

        out = self._result(self.data[key], (self,), backward)
        return out

    def reshape(self, *shape) -> "Tensor":
        def backward():
            if self.requires_grad:
                self._accumulate(out.grad.reshape(self.shape))

        out = self._result(self.data.reshape(*shape), (self,), backward)
        return out

    def transpose(self, axes: tuple) -> "Tensor":
        inverse = tuple(np.argsort(axes))

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad.transpose(inverse))

        out = self._result(self.data.transpose(axes), (self,), backward)
        return out

    def pad(self, pad_width: tuple) -> "Tensor":
        """Zero padding; ``pad_width`` is a per-axis (before, after) tuple."""
        inner = tuple(
            slice(b, b + s) for (b, _), s in zip(pad_width, self.shape)
        )

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad[inner])

        out = self._result(np.pad(self.data, pad_width), (self,), backward)
        return out

    @staticmethod
    def concat(tensors: list, axis: int) -> "Tensor":
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        data = np.concatenate([t.data for t in tensors], axis=axis)

        def backward():
            for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sel = [slice(None)] * data.ndim
                    sel[axis] = slice(start, stop)
                    t._accumulate(out.grad[tuple(sel)])

        out = Tensor._result(data, tuple(tensors), backward)
        return out

    @staticmethod
    def stack(tensors: list) -> "Tensor":
        """Stack along a new leading axis."""
        data = np.stack([t.data for t in tensors])

        def backward():
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(out.grad[i])

        out = Tensor._result(data, tuple(tensors), backward)
        return out

    def mean(self, axis: int = None, order_invariant: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
            data = np.asarray(self.data.sum() / n)

            def backward():
                if self.requires_grad:
                    self._accumulate(np.full_like(self.data, out.grad / n))

        else:
            n = self.shape[axis]
            if order_invariant:
                # sort: the sum becomes a function of the value multiset, so
                # permutations along this axis cannot flip rounding order
                data = np.sort(self.data, axis=axis).sum(axis=axis) / n
            else:
                data = self.data.mean(axis=axis)

            def backward():
                if self.requires_grad:
                    self._accumulate(np.expand_dims(out.grad, axis) / n * np.ones_like(self.data))

        out = self._result(data, (self,), backward)
        return out

    # -- nonlinearities ------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        data = expit(self.data)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad * data * (1.0 - data))

        out = self._result(data, (self,), backward)
        return out

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad * (1.0 - data * data))

        out = self._result(data, (self,), backward)
        return out

    def relu(self) -> "Tensor":
        data = np.maximum(self.data, 0.0)

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad * (self.data > 0.0))

        out = self._result(data, (self,), backward)
        return out

    def avg_pool_time(self, stride: int, axis: int = 1) -> "Tensor":
        """Average pooling along one axis, stride = window, ceil mode (the
        trailing short window is averaged over its actual length)."""
        n = self.shape[axis]
        n_out = -(-n // stride)
        pieces = []
        spans = []
        for j in range(n_out):
            sel = [slice(None)] * self.data.ndim
            start, stop = j * stride, min((j + 1) * stride, n)
            sel[axis] = slice(start, stop)
            spans.append((tuple(sel), stop - start))
            pieces.append(self.data[tuple(sel)].mean(axis=axis, keepdims=True))
        data = np.concatenate(pieces, axis=axis)

        def backward():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                for j, (sel, length) in enumerate(spans):
                    out_sel = [slice(None)] * self.data.ndim
                    out_sel[axis] = slice(j, j + 1)
                    g[sel] += out.grad[tuple(out_sel)] / length
                self._accumulate(g)

        out = self._result(data, (self,), backward)
        return out


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell(x, h_prev, c_prev, wih, whh, bias):
    """One LSTM step in plain numpy: returns (h, c).  Gate order i, f, g, o."""
    hsz = h_prev.shape[-1]
    z = x @ wih.T + h_prev @ whh.T + bias
    i = expit(z[..., :hsz])
    f = expit(z[..., hsz : 2 * hsz])
    g = np.tanh(z[..., 2 * hsz : 3 * hsz])
    o = expit(z[..., 3 * hsz :])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def lstm_sequence(
    x: Tensor,
    wih: Tensor,
    whh: Tensor,
    bias: Tensor,
    reverse: bool = False,
    initial_state: tuple = None,
    final_state_sink: list = None,
) -> Tensor:
    """Run an LSTM over a (T, B, In) sequence; returns hidden states (T, B, H).

    A single fused graph node with hand-rolled backward-through-time.
    ``initial_state`` is an optional (h0, c0) pair of (B, H) numpy arrays,
    treated as constants, and the final (h, c) is appended to
    ``final_state_sink`` when given; both are for streaming inference and
    never used in training.
    """
    t_len, batch, _ = x.shape
    hsz = whh.shape[1]
    if wih.shape[0] != 4 * hsz or whh.shape[0] != 4 * hsz or bias.shape[0] != 4 * hsz:
        raise ValueError(
            f"lstm parameter shapes disagree: wih {wih.shape}, whh {whh.shape}, "
            f"bias {bias.shape}"
        )
    if wih.shape[1] != x.shape[2]:
        raise ValueError(f"lstm input width {x.shape} vs wih {wih.shape}")
    dtype = x.dtype
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)

    ih = x.data @ wih.data.T + bias.data
    if not (_grad_enabled and any(t.requires_grad for t in (x, wih, whh, bias))):
        # lean path: no backward caches, output states only
        hs = np.empty((t_len, batch, hsz), dtype=dtype)
        if initial_state is None:
            h = np.zeros((batch, hsz), dtype=dtype)
            c = np.zeros((batch, hsz), dtype=dtype)
        else:
            h = np.asarray(initial_state[0], dtype=dtype)
            c = np.asarray(initial_state[1], dtype=dtype)
        for t in order:
            z = ih[t] + h @ whh.data.T
            c = expit(z[:, hsz : 2 * hsz]) * c + expit(z[:, :hsz]) * np.tanh(
                z[:, 2 * hsz : 3 * hsz]
            )
            h = expit(z[:, 3 * hsz :]) * np.tanh(c)
            hs[t] = h
        if final_state_sink is not None:
            final_state_sink.append((h.copy(), c.copy()))
        return Tensor(hs)

    gi = np.empty((t_len, batch, hsz), dtype=dtype)
    gf = np.empty_like(gi)
    gg = np.empty_like(gi)
    go = np.empty_like(gi)
    cs = np.empty_like(gi)
    tc = np.empty_like(gi)
    hp = np.empty_like(gi)
    cp = np.empty_like(gi)
    hs = np.empty_like(gi)
    if initial_state is None:
        h = np.zeros((batch, hsz), dtype=dtype)
        c = np.zeros((batch, hsz), dtype=dtype)
    else:
        h = np.asarray(initial_state[0], dtype=dtype)
        c = np.asarray(initial_state[1], dtype=dtype)
    for t in order:
        hp[t] = h
        cp[t] = c
        z = ih[t] + h @ whh.data.T
        gi[t] = expit(z[:, :hsz])
        gf[t] = expit(z[:, hsz : 2 * hsz])
        gg[t] = np.tanh(z[:, 2 * hsz : 3 * hsz])
        go[t] = expit(z[:, 3 * hsz :])
        c = gf[t] * cp[t] + gi[t] * gg[t]
        cs[t] = c
        tc[t] = np.tanh(c)
        h = go[t] * tc[t]
        hs[t] = h
    if final_state_sink is not None:
        final_state_sink.append((h.copy(), c.copy()))

    def backward():
        g_out = out.grad
        dwih = np.zeros_like(wih.data) if wih.requires_grad else None
        dwhh = np.zeros_like(whh.data) if whh.requires_grad else None
        db = np.zeros_like(bias.data) if bias.requires_grad else None
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dz_all = np.empty((batch, 4 * hsz), dtype=dtype)
        dh_next = np.zeros((batch, hsz), dtype=dtype)
        dc_next = np.zeros((batch, hsz), dtype=dtype)
        for t in reversed(list(order)):
            dh = g_out[t] + dh_next
            do = dh * tc[t]
            dc = dh * go[t] * (1.0 - tc[t] * tc[t]) + dc_next
            di = dc * gg[t]
            dg = dc * gi[t]
            df = dc * cp[t]
            dz_all[:, :hsz] = di * gi[t] * (1.0 - gi[t])
            dz_all[:, hsz : 2 * hsz] = df * gf[t] * (1.0 - gf[t])
            dz_all[:, 2 * hsz : 3 * hsz] = dg * (1.0 - gg[t] * gg[t])
            dz_all[:, 3 * hsz :] = do * go[t] * (1.0 - go[t])
            if dx is not None:
                dx[t] = dz_all @ wih.data
            dh_next = dz_all @ whh.data
            dc_next = dc * gf[t]
            if dwih is not None:
                dwih += dz_all.T @ x.data[t]
            if dwhh is not None:
                dwhh += dz_all.T @ hp[t]
            if db is not None:
                db += dz_all.sum(axis=0)
        if dx is not None:
            x._accumulate(dx)
        if dwih is not None:
            wih._accumulate(dwih)
        if dwhh is not None:
            whh._accumulate(dwhh)
        if db is not None:
            bias._accumulate(db)

    out = Tensor._result(hs, (x, wih, whh, bias), backward)
    return out


# ---------------------------------------------------------------------------
# Derived ops


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight^T + bias for a trailing feature axis."""
    return x.matmul(weight.transpose((1, 0))) + bias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, time_padding: str) -> Tensor:
    """Convolution over (time, frequency) of a (B, N, F, C) tensor.

    ``time_padding`` is "causal" (pad kh-1 past frames, output length N),
    "centered" (symmetric, output length N), or "none" (valid, output
    length N - kh + 1, for streaming with an explicit history prefix).
    Frequency padding is always symmetric.  Built compositionally from
    pad/slice/matmul so the backward comes off the tape.
    """
    kh, kw = weight.shape[0], weight.shape[1]
    if time_padding == "causal":
        tpad = (kh - 1, 0)
    elif time_padding == "centered":
        tpad = ((kh - 1) // 2, kh // 2)
    elif time_padding == "none":
        tpad = (0, 0)
    else:
        raise ValueError(f"unknown time padding {time_padding!r}")
    fpad = ((kw - 1) // 2, kw // 2)
    _, n, f, _ = x.shape
    n_out = n + tpad[0] + tpad[1] - (kh - 1)
    xp = x.pad(((0, 0), tpad, fpad, (0, 0)))
    total = None
    for a in range(kh):
        for b in range(kw):
            term = xp[:, a : a + n_out, b : b + f, :].matmul(weight[a, b])
            total = term if total is None else total + term
    return total + bias


# ---------------------------------------------------------------------------
# Initialization


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random n x n orthogonal matrix (QR with sign correction)."""
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def uniform_fan_in(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def lstm_init(rng: np.random.Generator, input_size: int, hidden: int) -> tuple:
    """(wih, whh, bias) arrays: fan-in-uniform input weights, per-gate
    orthogonal recurrent weights, forget-gate bias 1."""
    wih = uniform_fan_in(rng, 4 * hidden, input_size)
    whh = np.concatenate([orthogonal(rng, hidden) for _ in range(4)], axis=0)
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0
    return wih, whh, bias


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> dict:
        """Moment arrays for checkpointing, keyed adam.m/<name>, adam.v/<name>."""
        out = {}
        for name in self.params:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict, step_count: int):
        for name in self.params:
            self.m[name] = np.array(tensors[f"adam.m/{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(tensors[f"adam.v/{name}"], dtype=self.v[name].dtype)
        self.step_count = step_count
