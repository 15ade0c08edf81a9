"""Dense computation substrate with reverse-mode gradient propagation.

Everything is float64 numpy. A Tensor is a node in a dynamically built tape;
calling ``backward()`` on a scalar walks the tape in reverse topological order
and accumulates gradients into every node's ``grad`` slot. Params are
persistent leaves owned by a model; intermediate nodes are rebuilt each
forward pass and garbage-collected with the step.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError, DataError, TrainError

EPS_NORM = 1e-12

# Owner tags used for gradient-isolation checks.
ENC_P = "ENC_P"
ENC_U = "ENC_U"
ENC_POP = "ENC_POP"
HEAD = "HEAD"


def stream(seed: int, *tags) -> np.random.Generator:
    """Deterministic named RNG stream: a pure function of (seed, tags)."""
    ints = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            ints.append(zlib.crc32(t.encode()))
        else:
            ints.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(ints))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp  # vjp(upstream) -> tuple of parent gradients

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # -- graph walk ---------------------------------------------------------

    def _topo(self):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        if self.data.size != 1:
            raise ConfigError(f"backward() needs a scalar, got shape {self.data.shape}")
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # only leaves (params, inputs) keep their gradient; storing
                # it on every intermediate node would be pure overhead
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                acc = flowing.get(id(parent))
                flowing[id(parent)] = pg if acc is None else acc + pg

    # -- arithmetic ---------------------------------------------------------

    @staticmethod
    def _wrap(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other):
        o = self._wrap(other)
        return Tensor(self.data + o.data, (self, o),
                      lambda g: (_unbroadcast(g, self.data.shape),
                                 _unbroadcast(g, o.data.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        o = self._wrap(other)
        return Tensor(self.data * o.data, (self, o),
                      lambda g: (_unbroadcast(g * o.data, self.data.shape),
                                 _unbroadcast(g * self.data, o.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._wrap(other)
        return Tensor(self.data / o.data, (self, o),
                      lambda g: (_unbroadcast(g / o.data, self.data.shape),
                                 _unbroadcast(-g * self.data / o.data ** 2, o.data.shape)))

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, p: float):
        return Tensor(self.data ** p, (self,),
                      lambda g: (g * p * self.data ** (p - 1),))

    def __matmul__(self, other):
        o = self._wrap(other)
        if self.data.shape[-1] != o.data.shape[0]:
            raise ConfigError(
                f"matmul shape mismatch: {self.data.shape} @ {o.data.shape}")
        return Tensor(self.data @ o.data, (self, o),
                      lambda g: (g @ o.data.T, self.data.T @ g))

    # -- elementwise --------------------------------------------------------

    def relu(self):
        mask = self.data > 0  # subgradient at 0 is 0
        return Tensor(self.data * mask, (self,), lambda g: (g * mask,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, (self,), lambda g: (g * out,))

    def log(self):
        return Tensor(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, (self,), lambda g: (g * 0.5 / out,))

    # -- reductions / reshaping --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.data.shape).copy(),)

        return Tensor(out, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(self.data.reshape(*shape), (self,),
                      lambda g: (g.reshape(old),))

    def transpose(self):
        return Tensor(self.data.T, (self,), lambda g: (g.T,))

    @property
    def T(self):
        return self.transpose()

    def gather_rows(self, idx):
        """Row gather; backward scatters into the selected rows only."""
        idx = np.asarray(idx, dtype=np.intp)
        out = self.data[idx]

        def vjp(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor(out, (self,), vjp)


def concat(tensors, axis=1):
    tensors = [Tensor._wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), vjp)


def interleave_rows(a: Tensor, b: Tensor) -> Tensor:
    """Rows 2k come from a, rows 2k+1 from b (paired contrastive views)."""
    if a.data.shape != b.data.shape:
        raise ConfigError(f"interleave shape mismatch: {a.data.shape} vs {b.data.shape}")
    n, d = a.data.shape
    out = np.empty((2 * n, d))
    out[0::2] = a.data
    out[1::2] = b.data
    return Tensor(out, (a, b), lambda g: (g[0::2], g[1::2]))


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical forward; backward deposits nothing upstream."""
    return Tensor(x.data)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout: train-time zero+rescale, inference identity.

    The mask is a pure function of the rng stream, so two calls with streams
    built from the same seed produce identical views.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def normalize_rows(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    """L2-normalize each row with the norm floored at eps."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    norm = sq.sqrt() + eps
    return x / norm


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors (eps-floored norms)."""
    num = (a * b).sum()
    na = ((a * a).sum()).sqrt() + EPS_NORM
    nb = ((b * b).sum()).sqrt() + EPS_NORM
    return num / (na * nb)


def linear(x: Tensor, w, b=None) -> Tensor:
    """x @ w (+ b). Accepts Param or Tensor weights."""
    wt = w.tensor if isinstance(w, Param) else w
    if x.data.shape[-1] != wt.data.shape[0]:
        raise ConfigError(
            f"linear shape mismatch: input {x.data.shape} vs weight {wt.data.shape}")
    out = x @ wt
    if b is not None:
        bt = b.tensor if isinstance(b, Param) else b
        out = out + bt
    return out


def relu(x: Tensor) -> Tensor:
    return x.relu()


def embedding_lookup(table, idx) -> Tensor:
    """Batched row lookup into an embedding table."""
    tt = table.tensor if isinstance(table, Param) else table
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= tt.data.shape[0]):
        bad = idx[(idx < 0) | (idx >= tt.data.shape[0])][0]
        name = table.name if isinstance(table, Param) else "<tensor>"
        raise DataError(f"embedding index {bad} out of range for {name} "
                        f"(vocab {tt.data.shape[0]})")
    return tt.gather_rows(idx)


class Param:
    """A named, owner-tagged trainable leaf."""

    __slots__ = ("tensor", "name", "owner")

    def __init__(self, data, name: str, owner: str):
        self.tensor = Tensor(data)
        self.name = name
        self.owner = owner

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, v):
        self.tensor.data = np.asarray(v, dtype=np.float64)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Param({self.name}, shape={self.data.shape}, owner={self.owner})"


def init_linear(d_in: int, d_out: int, name: str, owner: str,
                rng: np.random.Generator) -> Param:
    """Uniform in [-1/sqrt(d_in), 1/sqrt(d_in)]."""
    bound = 1.0 / np.sqrt(d_in)
    return Param(rng.uniform(-bound, bound, size=(d_in, d_out)), name, owner)


def init_bias(d_in: int, d_out: int, name: str, owner: str,
              rng: np.random.Generator) -> Param:
    bound = 1.0 / np.sqrt(d_in)
    return Param(rng.uniform(-bound, bound, size=(d_out,)), name, owner)


def init_embedding(vocab: int, dim: int, name: str, owner: str,
                   rng: np.random.Generator) -> Param:
    return Param(rng.normal(0.0, 0.01, size=(vocab, dim)), name, owner)


class Adam:
    """Adam with decoupled weight decay over a list of Params."""

    def __init__(self, params, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate param names in optimizer")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainError(f"non-finite gradient in {p.name}")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
