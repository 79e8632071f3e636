"""Reverse-mode automatic differentiation on dense numpy arrays.

Tensors wrap float64/float32 or complex128/complex64 numpy arrays. Every
operation records its parent tensors together with a closure that computes
vector-Jacobian products, and ``Tensor.backward`` walks the recorded graph
once in reverse topological order, accumulating gradients on the leaves.

Complex values use the pairing convention: the gradient stored for a
complex tensor is ``dL/dRe + 1j*dL/dIm``. For a real-valued loss this is
exactly equivalent to differentiating the real and imaginary parts as two
independent real leaves, so finite-difference checks reduce to ordinary
real perturbations and no special calculus conventions are needed.
"""

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GradientMap",
    "GradCheckReport",
    "ShapeError",
    "stable_sigmoid",
    "grad_check",
    "forward_eval",
    "run_backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "max_along",
    "concat",
    "reshape",
    "as_complex",
    "real_part",
    "imag_part",
]

_REAL_DTYPES = (np.float32, np.float64)
_COMPLEX_DTYPES = (np.complex64, np.complex128)


class ShapeError(ValueError):
    """Raised when incompatible shapes reach an operation."""


def stable_sigmoid(z):
    """Overflow-safe logistic function, elementwise; exact 0/1 at saturation."""
    z = np.asarray(z)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    if arr.dtype.kind not in "fc":
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` along axes that were broadcast in forward."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _grad_for(parent_data, g):
    """Coerce an upstream gradient to the parent's shape and dtype family."""
    g = np.asarray(g)
    g = _unbroadcast(g, parent_data.shape)
    parent_complex = parent_data.dtype.kind == "c"
    if not parent_complex and g.dtype.kind == "c":
        g = g.real
    if g.dtype != parent_data.dtype:
        g = g.astype(parent_data.dtype)
    return g


class Tensor:
    """A dense array node in a dynamically recorded computation graph."""

    def __init__(self, data, requires_grad=False, name=None, dtype=None,
                 _parents=(), _backward=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad = None
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req}{nm})"

    def item(self):
        return self.data.item()

    def detach(self):
        """Leaf copy sharing no graph history."""
        return Tensor(self.data.copy())

    # -- operators -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    # -- backward ------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this (real scalar) node onto all leaves."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss node, got shape {self.data.shape}"
            )
        if self.data.dtype.kind == "c":
            raise TypeError("backward requires a real scalar loss")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _grad_for(parent.data, g)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def _toposort(root):
    """Iterative post-order over ancestors that require gradients."""
    topo = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited and p.requires_grad:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()
    return topo


def _node(data, parents, backward_fn):
    """Construct an interior graph node; gradient tracking is inherited."""
    return Tensor(data, _parents=parents, _backward=backward_fn)


def _promote(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# -- elementwise arithmetic ---------------------------------------------
#
# Python-number operands stay plain scalars instead of becoming float64
# leaf tensors: numpy's weak scalar promotion then preserves float32
# pipelines, and constants never enter the graph.


def _is_pynum(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b):
    if isinstance(a, Tensor) and _is_pynum(b):
        return _node(a.data + b, (a,), lambda g: (g,))
    if isinstance(b, Tensor) and _is_pynum(a):
        return _node(b.data + a, (b,), lambda g: (g,))
    a, b = _promote(a), _promote(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if isinstance(a, Tensor) and _is_pynum(b):
        return _node(a.data - b, (a,), lambda g: (g,))
    if isinstance(b, Tensor) and _is_pynum(a):
        return _node(a - b.data, (b,), lambda g: (-g,))
    a, b = _promote(a), _promote(b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product; complex factors follow the pairing convention."""
    if isinstance(a, Tensor) and _is_pynum(b):
        return _node(a.data * b, (a,), lambda g: (g * b,))
    if isinstance(b, Tensor) and _is_pynum(a):
        return _node(b.data * a, (b,), lambda g: (g * a,))
    a, b = _promote(a), _promote(b)

    def backward(g):
        ga = np.conj(b.data) * g if a.requires_grad else None
        gb = np.conj(a.data) * g if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    if isinstance(a, Tensor) and _is_pynum(b):
        return _node(a.data / b, (a,), lambda g: (g / b,))
    if isinstance(b, Tensor) and _is_pynum(a):

        def backward_const_num(g):
            cb = np.conj(b.data)
            return (-g * a / (cb * cb),)

        return _node(a / b.data, (b,), backward_const_num)
    a, b = _promote(a), _promote(b)

    def backward(g):
        cb = np.conj(b.data)
        ga = g / cb if a.requires_grad else None
        gb = -g * np.conj(a.data) / (cb * cb) if b.requires_grad else None
        return ga, gb

    return _node(a.data / b.data, (a, b), backward)


def neg(a):
    a = _promote(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    """Elementwise a**p for a constant real exponent."""
    a = _promote(a)
    p = float(p)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), backward)


def exp(a):
    a = _promote(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = _promote(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    a = _promote(a)
    out = stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = _promote(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.maximum(a.data, 0.0), (a,), backward)


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    a, b = _promote(a), _promote(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        return g @ np.conj(b.data).T, np.conj(a.data).T @ g

    return _node(a.data @ b.data, (a, b), backward)


# -- reductions and shape ops --------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = _promote(a)
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, a.data.shape),)

    return _node(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _promote(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g) / count
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, a.data.shape),)

    return _node(out, (a,), backward)


def max_along(a, axis):
    """Maximum along one axis; ties route the gradient to the lowest index."""
    a = _promote(a)
    axis = axis % a.data.ndim
    idx = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(
            gx, np.expand_dims(idx, axis), np.expand_dims(np.asarray(g), axis), axis
        )
        return (gx,)

    return _node(out, (a,), backward)


def concat(tensors, axis):
    tensors = [_promote(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def reshape(a, shape):
    a = _promote(a)
    orig = a.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _node(a.data.reshape(shape), (a,), backward)


# -- complex plumbing ------------------------------------------------------


def as_complex(re, im):
    """Pack two real tensors into one complex tensor."""
    re, im = _promote(re), _promote(im)
    if re.data.shape != im.data.shape:
        raise ShapeError(
            f"as_complex parts differ in shape: {re.data.shape} vs {im.data.shape}"
        )

    def backward(g):
        return g.real, g.imag

    return _node(re.data + 1j * im.data, (re, im), backward)


def real_part(z):
    z = _promote(z)

    def backward(g):
        return (np.asarray(g).astype(z.data.dtype),)

    return _node(np.ascontiguousarray(z.data.real), (z,), backward)


def imag_part(z):
    z = _promote(z)

    def backward(g):
        return ((1j * np.asarray(g)).astype(z.data.dtype),)

    return _node(np.ascontiguousarray(z.data.imag), (z,), backward)


# -- graphs ----------------------------------------------------------------


class GradientMap:
    """Named gradients produced by one backward pass.

    `entries` maps parameter names to numpy arrays with the parameter's
    shape; `nonfinite` lists names whose gradient contains NaN or Inf.
    """

    def __init__(self, entries, nonfinite=()):
        self.entries = dict(entries)
        self.nonfinite = tuple(nonfinite)

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    def __len__(self):
        return len(self.entries)


class Graph:
    """A reusable computation over named parameter leaves and named inputs.

    `build` is called as ``build(parameters, inputs)`` with dicts of
    Tensors and must return the output tensor. Re-running `forward` traces
    a fresh graph against the current parameter values, which is what lets
    finite-difference checks perturb `Tensor.data` in place.
    """

    def __init__(self, build, parameters=None):
        self.build = build
        self.parameters = dict(parameters or {})
        for name, p in self.parameters.items():
            if not isinstance(p, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")
        self.output = None
        self._bound_inputs = None

    def forward(self, inputs=None):
        if inputs is not None:
            self._bound_inputs = {
                k: v if isinstance(v, Tensor) else Tensor(v)
                for k, v in inputs.items()
            }
        bound = self._bound_inputs or {}
        try:
            self.output = self.build(self.parameters, bound)
        except KeyError as exc:
            raise KeyError(
                f"graph is missing a required input or parameter: {exc.args[0]!r}"
            ) from exc
        if not isinstance(self.output, Tensor):
            raise TypeError("graph build function must return a Tensor")
        return self.output

    def zero_grad(self):
        for p in self.parameters.values():
            p.grad = None

    def backward(self):
        """Differentiate the retained scalar output into a GradientMap."""
        if self.output is None:
            raise RuntimeError("graph backward requires a prior forward pass")
        self.zero_grad()
        self.output.backward()
        entries = {}
        nonfinite = []
        for name, p in self.parameters.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            entries[name] = g
            if not np.all(np.isfinite(g)):
                nonfinite.append(name)
        return GradientMap(entries, nonfinite)


def forward_eval(graph, inputs=None):
    """Evaluate a graph on named inputs, retaining state for backward."""
    return graph.forward(inputs)


def run_backward(graph):
    """Module-level alias for :meth:`Graph.backward`."""
    return graph.backward()


class GradCheckReport:
    """Per-parameter comparison of analytic and central-difference gradients."""

    def __init__(self, max_rel_error, nonfinite, tolerance):
        self.max_rel_error = dict(max_rel_error)
        self.nonfinite = dict(nonfinite)
        self.tolerance = tolerance

    @property
    def passed(self):
        if self.nonfinite:
            return False
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def worst(self, n=5):
        """The n parameters with the largest relative error, descending."""
        ranked = sorted(self.max_rel_error.items(), key=lambda kv: -kv[1])
        return ranked[:n]

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        top = ", ".join(f"{k}={v:.3e}" for k, v in self.worst(3))
        return f"GradCheckReport({status} at {self.tolerance:g}; worst: {top})"


def grad_check(graph, inputs=None, epsilon=1e-6, tolerance=1e-4):
    """Compare every parameter component against central finite differences.

    Requires float64 parameters; the relative error per component is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    for name, p in graph.parameters.items():
        if p.requires_grad and p.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters ({name})")

    graph.forward(inputs)
    analytic = graph.backward()

    max_rel = {}
    nonfinite = {}
    for name, p in graph.parameters.items():
        if not p.requires_grad:
            continue
        flat = p.data.ravel()
        ana = analytic[name].ravel()
        worst = 0.0
        bad = []
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = graph.forward().data.item()
            flat[i] = orig - epsilon
            lm = graph.forward().data.item()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                bad.append(i)
                continue
            num = (lp - lm) / (2.0 * epsilon)
            rel = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, rel)
        max_rel[name] = worst
        if bad:
            nonfinite[name] = bad
    graph.forward()  # leave the graph evaluated at the unperturbed point
    return GradCheckReport(max_rel, nonfinite, tolerance)
