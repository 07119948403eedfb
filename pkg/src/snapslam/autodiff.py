"""Reverse-mode automatic differentiation on a flat replayable tape.

Every differentiable computation in this package (field evaluation, volume
rendering, losses, pose refinement) is built by calling the ops below on
``Var`` handles.  A ``Tape`` records one node per op, eagerly computing values
as the graph is built.  ``Tape.backward`` walks the record once in reverse and
accumulates vector-Jacobian products; ``Tape.forward`` replays the identical
graph on fresh leaf values, which is what makes finite-difference checking
(and pose/map alternation on a fixed ray graph) cheap.

Conventions:
  * all values are float64 ndarrays; python scalars are lifted to 0-d arrays
  * gradients accumulate with += — on nodes (fan-out) and into ParamStore
    blocks (sequential backward passes compose) — so callers zero block
    gradients between optimizer steps, not between loss terms
  * parameters live in a ParamStore keyed by block name; each block carries
    its own learning rate, trainable flag and Adam moments
  * stop_gradient nodes keep their recorded value across forward() replays:
    a replayed tape computes the loss as a function of the leaves with every
    sg-argument frozen, which is the exact function the reverse pass
    differentiates — finite differences over replays therefore check every
    gradient path, including straight-through substitutions
"""

import numpy as np

from .errors import NumericError, TapeError

_LEAF_OPS = ("const", "input", "param")


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_reduced(g, in_shape, axis, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(in_shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, in_shape)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _scatter_rows(shape, idx, g):
    """Sum rows of g into a zeros(shape) array at positions idx (axis 0)."""
    out = np.zeros(shape, dtype=np.float64)
    flat_idx = idx.ravel()
    if len(shape) == 1:
        out += np.bincount(flat_idx, weights=g.ravel(), minlength=shape[0])
    else:
        gf = g.reshape(-1, shape[1])
        for f in range(shape[1]):
            out[:, f] = np.bincount(flat_idx, weights=gf[:, f], minlength=shape[0])
    return out


# --- forward rules: op name -> f(ctx, *parent_values) --------------------

_FORWARD = {
    "add": lambda ctx, a, b: a + b,
    "sub": lambda ctx, a, b: a - b,
    "mul": lambda ctx, a, b: a * b,
    "div": lambda ctx, a, b: a / b,
    "neg": lambda ctx, a: -a,
    "square": lambda ctx, a: a * a,
    "sqrt": lambda ctx, a: np.sqrt(a),
    "exp": lambda ctx, a: np.exp(a),
    "log": lambda ctx, a: np.log(a),
    "sin": lambda ctx, a: np.sin(a),
    "cos": lambda ctx, a: np.cos(a),
    "tanh": lambda ctx, a: np.tanh(a),
    "sigmoid": lambda ctx, a: _stable_sigmoid(a),
    "relu": lambda ctx, a: np.maximum(a, 0.0),
    "sum": lambda ctx, a: a.sum(axis=ctx[0], keepdims=ctx[1]),
    "mean": lambda ctx, a: a.mean(axis=ctx[0], keepdims=ctx[1]),
    "l2norm": lambda ctx, a: np.sqrt((a * a).sum(axis=ctx[0], keepdims=ctx[1])),
    "matmul": lambda ctx, a, b: a @ b,
    "transpose": lambda ctx, a: np.transpose(a, ctx),
    "reshape": lambda ctx, a: a.reshape(ctx),
    "concat": lambda ctx, *xs: np.concatenate(xs, axis=ctx),
    "getitem": lambda ctx, a: a[ctx],
    "gather": lambda ctx, a: np.take(a, ctx, axis=0),
    "stop_gradient": lambda ctx, a: a,
    "maxc": lambda ctx, a: np.maximum(a, ctx),
    "minc": lambda ctx, a: np.minimum(a, ctx),
}


# --- backward rules: op name -> f(ctx, g, *parent_values, y) -> grads -----

def _vjp_l2norm(ctx, g, x, y):
    axis, keepdims = ctx
    sumsq = (x * x).sum(axis=axis, keepdims=True)
    denom = np.sqrt(sumsq + 1e-12)
    if not keepdims and axis is not None:
        g = _expand_reduced(g, x.shape, axis, keepdims)
    else:
        g = np.broadcast_to(g, x.shape) if axis is None else g
    return (g * x / denom,)


def _vjp_getitem(ctx, g, x, y):
    out = np.zeros_like(x)
    np.add.at(out, ctx, g)
    return (out,)


def _vjp_concat(ctx, g, *args):
    xs, _y = args[:-1], args[-1]
    grads, start = [], 0
    for x in xs:
        n = x.shape[ctx]
        sl = [slice(None)] * g.ndim
        sl[ctx] = slice(start, start + n)
        grads.append(g[tuple(sl)])
        start += n
    return tuple(grads)


_VJP = {
    "add": lambda ctx, g, a, b, y: (g, g),
    "sub": lambda ctx, g, a, b, y: (g, -g),
    "mul": lambda ctx, g, a, b, y: (g * b, g * a),
    "div": lambda ctx, g, a, b, y: (g / b, -g * a / (b * b)),
    "neg": lambda ctx, g, a, y: (-g,),
    "square": lambda ctx, g, a, y: (2.0 * g * a,),
    "sqrt": lambda ctx, g, a, y: (0.5 * g / y,),
    "exp": lambda ctx, g, a, y: (g * y,),
    "log": lambda ctx, g, a, y: (g / a,),
    "sin": lambda ctx, g, a, y: (g * np.cos(a),),
    "cos": lambda ctx, g, a, y: (-g * np.sin(a),),
    "tanh": lambda ctx, g, a, y: (g * (1.0 - y * y),),
    "sigmoid": lambda ctx, g, a, y: (g * y * (1.0 - y),),
    "relu": lambda ctx, g, a, y: (g * (a > 0.0),),
    "sum": lambda ctx, g, a, y: (_expand_reduced(g, a.shape, ctx[0], ctx[1]),),
    "mean": lambda ctx, g, a, y: (
        _expand_reduced(g, a.shape, ctx[0], ctx[1]) * (y.size / a.size),
    ),
    "l2norm": _vjp_l2norm,
    "matmul": lambda ctx, g, a, b, y: (g @ b.T, a.T @ g),
    "transpose": lambda ctx, g, a, y: (np.transpose(g, np.argsort(ctx)),),
    "reshape": lambda ctx, g, a, y: (g.reshape(a.shape),),
    "concat": _vjp_concat,
    "getitem": _vjp_getitem,
    "gather": lambda ctx, g, a, y: (_scatter_rows(a.shape, ctx, g),),
    "stop_gradient": lambda ctx, g, a, y: (None,),
    "maxc": lambda ctx, g, a, y: (g * (a > ctx),),
    "minc": lambda ctx, g, a, y: (g * (a < ctx),),
}


class _Node:
    __slots__ = ("op", "value", "parents", "ctx", "grad")

    def __init__(self, op, value, parents=(), ctx=None):
        self.op = op
        self.value = value
        self.parents = parents
        self.ctx = ctx
        self.grad = None


class Var:
    """Handle to one tape node.  Cheap to copy; all state lives on the tape."""

    __slots__ = ("tape", "i")

    def __init__(self, tape, i):
        self.tape = tape
        self.i = i

    @property
    def value(self):
        return self.tape.nodes[self.i].value

    @property
    def grad(self):
        return self.tape.nodes[self.i].grad

    @property
    def shape(self):
        return self.tape.nodes[self.i].value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only op record supporting replay and reverse sweeps."""

    def __init__(self):
        self.nodes = []
        self._params = []  # (node index, store, block name)

    def _append(self, node):
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def constant(self, value):
        return self._append(_Node("const", _as_array(value)))

    def input(self, name, value):
        """Leaf whose value can be rebound at forward() time via `name`."""
        return self._append(_Node("input", _as_array(value), ctx=name))

    def param(self, store, name):
        v = self._append(_Node("param", store.value(name), ctx=(store, name)))
        self._params.append((v.i, store, name))
        return v

    def record(self, op, parents, ctx=None):
        vals = [self.nodes[p.i].value for p in parents]
        try:
            value = _FORWARD[op](ctx, *vals)
        except ValueError as e:
            shapes = [v.shape for v in vals]
            raise TapeError(f"op '{op}' rejected operand shapes {shapes}: {e}") from e
        return self._append(_Node(op, value, tuple(p.i for p in parents), ctx))

    def forward(self, bindings=None):
        """Recompute every node in record order; leaves refresh from
        `bindings` (inputs, by name) and their ParamStore (params)."""
        bindings = bindings or {}
        if bindings:
            known = {nd.ctx for nd in self.nodes if nd.op == "input"}
            unknown = set(bindings) - known
            if unknown:
                raise TapeError(f"no input named {sorted(unknown)} on this tape")
        for nd in self.nodes:
            if nd.op == "input":
                if nd.ctx in bindings:
                    nd.value = _as_array(bindings[nd.ctx])
            elif nd.op == "param":
                store, name = nd.ctx
                nd.value = store.value(name)
            elif nd.op == "stop_gradient":
                # frozen on replay: the tape then recomputes exactly the
                # function backward() differentiates (sg-arguments held at
                # their recorded values), which is what makes central
                # finite differences a valid oracle for every path,
                # commitment terms and straight-through included
                pass
            elif nd.op != "const":
                nd.value = _FORWARD[nd.op](nd.ctx, *[self.nodes[p].value for p in nd.parents])

    def backward(self, out, seed=1.0):
        """Accumulate d(out)/d(leaf) into node grads and ParamStore blocks.

        `seed` is the upstream gradient of `out` (scalar or matching array).
        Node grads are reset here; store grads are NOT (loss terms compose).
        """
        if out.tape is not self:
            raise TapeError("output var belongs to a different tape")
        top = self.nodes[out.i]
        if top.value is None:
            raise TapeError("backward before forward")
        for nd in self.nodes:
            nd.grad = None
        seed = _as_array(seed)
        if seed.shape != top.value.shape:
            seed = np.broadcast_to(seed, top.value.shape).copy()
        top.grad = seed
        for i in range(out.i, -1, -1):
            nd = self.nodes[i]
            if nd.grad is None:
                continue
            if nd.op == "param":
                store, name = nd.ctx
                store.accumulate_grad(name, nd.grad)
                continue
            if nd.op in _LEAF_OPS:
                continue
            vals = [self.nodes[p].value for p in nd.parents]
            grads = _VJP[nd.op](nd.ctx, nd.grad, *vals, nd.value)
            for p, gp in zip(nd.parents, grads):
                if gp is None:
                    continue
                pn = self.nodes[p]
                gp = _unbroadcast(gp, pn.value.shape)
                pn.grad = gp if pn.grad is None else pn.grad + gp

    def __len__(self):
        return len(self.nodes)


def _lift(tape, x):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _binary(op, a, b):
    t = _tape_of(a, b)
    return t.record(op, (_lift(t, a), _lift(t, b)))


def _unary(op, a, ctx=None):
    return a.tape.record(op, (a,), ctx)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def matmul(a, b):
    return _binary("matmul", a, b)


def neg(a):
    return _unary("neg", a)


def square(a):
    return _unary("square", a)


def sqrt(a):
    return _unary("sqrt", a)


def exp(a):
    return _unary("exp", a)


def log(a):
    return _unary("log", a)


def sin(a):
    return _unary("sin", a)


def cos(a):
    return _unary("cos", a)


def tanh(a):
    return _unary("tanh", a)


def sigmoid(a):
    return _unary("sigmoid", a)


def relu(a):
    return _unary("relu", a)


def reduce_sum(a, axis=None, keepdims=False):
    return _unary("sum", a, (axis, keepdims))


def reduce_mean(a, axis=None, keepdims=False):
    return _unary("mean", a, (axis, keepdims))


def l2norm(a, axis=None, keepdims=False):
    """Euclidean norm.  Forward is the exact sqrt (norm of 0 is 0); the
    backward denominator is sqrt(sum(x^2) + 1e-12) so the zero point does
    not blow up."""
    return _unary("l2norm", a, (axis, keepdims))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(len(a.shape))))
    return _unary("transpose", a, tuple(axes))


def reshape(a, shape):
    return _unary("reshape", a, tuple(shape))


def concat(xs, axis=0):
    t = _tape_of(*xs)
    return t.record("concat", tuple(_lift(t, x) for x in xs), axis)


def getitem(a, key):
    return _unary("getitem", a, key)


def gather(a, idx):
    """Row lookup a[idx] along axis 0 with a scatter-add backward."""
    return _unary("gather", a, np.asarray(idx))


def stop_gradient(a):
    """Identity in the forward pass; blocks all gradient flow in reverse."""
    return _unary("stop_gradient", a)


def maximum(a, floor):
    """Elementwise max against a host constant (dead below the floor)."""
    return _unary("maxc", a, float(floor))


def minimum(a, ceil):
    return _unary("minc", a, float(ceil))


class _Block:
    __slots__ = ("value", "grad", "rate", "trainable", "m", "v", "step")

    def __init__(self, value, rate=None, trainable=True):
        self.value = _as_array(value)
        self.grad = np.zeros_like(self.value)
        self.rate = rate
        self.trainable = trainable
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0


class ParamStore:
    """Named parameter blocks (+ grad accumulators and Adam state)."""

    def __init__(self):
        self._blocks = {}

    def add(self, name, value, rate=None, trainable=True):
        if name in self._blocks:
            raise TapeError(f"parameter block '{name}' already exists")
        self._blocks[name] = _Block(value, rate, trainable)

    def __contains__(self, name):
        return name in self._blocks

    def names(self):
        return list(self._blocks)

    def value(self, name):
        return self._blocks[name].value

    def set_value(self, name, value):
        blk = self._blocks[name]
        blk.value = _as_array(value)

    def grad(self, name):
        return self._blocks[name].grad

    def accumulate_grad(self, name, g):
        self._blocks[name].grad += g

    def zero_grad(self):
        for blk in self._blocks.values():
            blk.grad[...] = 0.0

    def set_trainable(self, prefix, flag):
        """Flip the trainable flag on every block whose name starts with
        `prefix` — how the runtime switches between pose-only and map-only
        phases without rebuilding anything."""
        hit = False
        for name, blk in self._blocks.items():
            if name.startswith(prefix):
                blk.trainable = flag
                hit = True
        if not hit:
            raise TapeError(f"no parameter block matches prefix '{prefix}'")

    def set_rate(self, name, rate):
        self._blocks[name].rate = rate

    def trainable(self, name):
        return self._blocks[name].trainable

    def state_dict(self):
        out = {}
        for name, blk in self._blocks.items():
            out[name] = {
                "value": blk.value.copy(),
                "m": blk.m.copy(),
                "v": blk.v.copy(),
                "step": blk.step,
                "rate": blk.rate,
                "trainable": blk.trainable,
            }
        return out

    def load_state_dict(self, state):
        self._blocks = {}
        for name, d in state.items():
            blk = _Block(d["value"], d.get("rate"), bool(d.get("trainable", True)))
            blk.m = _as_array(d["m"])
            blk.v = _as_array(d["v"])
            blk.step = int(d["step"])
            self._blocks[name] = blk


def adam_step(store, rate, betas=(0.9, 0.99), eps=1e-15):
    """One Adam update over every trainable block.

    Bias-corrected moments; per-block rates override `rate` when set.
    Non-finite gradients abort with the offending block named — by the time
    a NaN reaches the optimizer the step is unrecoverable anyway.
    """
    b1, b2 = betas
    for name, blk in store._blocks.items():
        if not blk.trainable:
            continue
        g = blk.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block '{name}'")
        blk.step += 1
        lr = blk.rate if blk.rate is not None else rate
        blk.m = b1 * blk.m + (1.0 - b1) * g
        blk.v = b2 * blk.v + (1.0 - b2) * (g * g)
        m_hat = blk.m / (1.0 - b1 ** blk.step)
        v_hat = blk.v / (1.0 - b2 ** blk.step)
        blk.value = blk.value - lr * m_hat / (np.sqrt(v_hat) + eps)


def param_hash(store):
    """SHA-256 over every block's name and exact float bytes.

    Changes iff some parameter value changes; used to prove read-only code
    paths (meshing, evaluation) really are read-only.
    """
    import hashlib

    h = hashlib.sha256()
    for name in sorted(store.names()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(store.value(name)).tobytes())
    return h.hexdigest()
