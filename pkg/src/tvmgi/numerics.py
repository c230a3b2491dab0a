"""Dense tensor ops with an explicit reverse-mode tape.

Tensors are plain ``numpy.ndarray`` values.  A :class:`Tape` records every
differentiable operation executed through it and returns lightweight
:class:`Var` handles; :meth:`Tape.backward` replays the record in reverse.

    tape = Tape(np.float64)
    w = tape.param(np.zeros(3), "w")
    loss = tape.sum(tape.sigmoid(w))
    grads = tape.backward(loss)      # {"w": array([0.25, 0.25, 0.25])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Reduction over an empty axis, or similar."""


class ContractError(RuntimeError):
    """A precondition of the tape API was violated."""


class Var:
    """Handle to a value produced on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(idx={self.idx}, shape={self.value.shape})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    ``dtype`` fixes the working precision for the whole run (float32 for
    training, float64 for gradient checks).  With ``grad=False`` nothing is
    recorded and the tape is a plain evaluator.
    """

    def __init__(self, dtype: Any = np.float64, grad: bool = True):
        self.dtype = np.dtype(dtype)
        self.grad = grad
        self._values: List[np.ndarray] = []
        self._parents: List[Tuple[int, ...]] = []
        self._backward: List[Optional[BackwardFn]] = []
        self._ops: List[str] = []
        self._params: Dict[str, int] = {}
        self.last_backward_order: List[int] = []

    # ------------------------------------------------------------------ nodes
    def __len__(self) -> int:
        return len(self._values)

    @property
    def ops(self) -> List[str]:
        return list(self._ops)

    def _push(self, op: str, value: np.ndarray, parents: Tuple[Var, ...] = (),
              backward: Optional[BackwardFn] = None) -> Var:
        if not self.grad:
            # evaluation only: nothing to replay, so nothing is stored
            return Var(self, -1, value)
        idx = len(self._values)
        self._values.append(value)
        self._parents.append(tuple(p.idx for p in parents))
        self._backward.append(backward)
        self._ops.append(op)
        return Var(self, idx, value)

    def _cast(self, x: Any) -> np.ndarray:
        return np.asarray(x, dtype=self.dtype)

    def _lift(self, x: Any) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("Var belongs to a different tape")
            return x
        return self.const(x)

    def param(self, value: Any, name: str) -> Var:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        v = self._push("param", self._cast(value).copy() if self.grad else self._cast(value))
        self._params[name] = v.idx
        return v

    def const(self, value: Any) -> Var:
        return self._push("const", self._cast(value))

    # ------------------------------------------------------------ arithmetic
    def add(self, a: Any, b: Any) -> Var:
        """Elementwise sum; ``b`` may match a trailing suffix of ``a``'s shape."""
        a, b = self._lift(a), self._lift(b)
        _check_trailing(a.shape, b.shape, "add")
        nb = b.value.ndim
        lead = a.value.ndim - nb

        def bw(g):
            gb = g.sum(axis=tuple(range(lead))) if lead else g
            return g, gb

        return self._push("add", a.value + b.value, (a, b), bw)

    def sub(self, a: Any, b: Any) -> Var:
        a, b = self._lift(a), self._lift(b)
        _check_trailing(a.shape, b.shape, "sub")
        lead = a.value.ndim - b.value.ndim

        def bw(g):
            gb = g.sum(axis=tuple(range(lead))) if lead else g
            return g, -gb

        return self._push("sub", a.value - b.value, (a, b), bw)

    def mul(self, a: Any, b: Any) -> Var:
        a, b = self._lift(a), self._lift(b)
        _check_trailing(a.shape, b.shape, "mul")
        av, bv = a.value, b.value
        lead = av.ndim - bv.ndim

        def bw(g):
            gb = g * av
            if lead:
                gb = gb.sum(axis=tuple(range(lead)))
            return g * bv, gb

        return self._push("mul", av * bv, (a, b), bw)

    def scale(self, a: Var, c: float) -> Var:
        c = self.dtype.type(c)
        return self._push("scale", a.value * c, (a,), lambda g: (g * c,))

    def neg(self, a: Var) -> Var:
        return self._push("neg", -a.value, (a,), lambda g: (-g,))

    def matmul(self, a: Any, b: Any) -> Var:
        """Matrix product over the last two axes.

        ``b`` is either 2-D (shared across ``a``'s leading axes) or has the
        same leading axes as ``a``.
        """
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or (
                bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]):
            raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
        out = np.matmul(av, bv)

        def bw(g):
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            if bv.ndim == 2 and av.ndim > 2:
                k, n = bv.shape
                gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(av, -1, -2), g)
            return ga, gb

        return self._push("matmul", out, (a, b), bw)

    # --------------------------------------------------------- elementwise
    def exp(self, a: Var) -> Var:
        out = np.exp(a.value)
        return self._push("exp", out, (a,), lambda g: (g * out,))

    def log(self, a: Var) -> Var:
        av = a.value
        return self._push("log", np.log(av), (a,), lambda g: (g / av,))

    def sigmoid(self, a: Var) -> Var:
        out = _sigmoid(a.value)
        return self._push("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))

    def clip(self, a: Var, lo: float, hi: float) -> Var:
        av = a.value
        lo_, hi_ = self.dtype.type(lo), self.dtype.type(hi)
        inside = (av >= lo_) & (av <= hi_)
        return self._push("clip", np.clip(av, lo_, hi_), (a,), lambda g: (g * inside,))

    # ----------------------------------------------------------- reductions
    def sum(self, a: Var, axis: Optional[int] = None) -> Var:
        av = a.value
        if axis is None:
            return self._push("sum", np.asarray(av.sum(), dtype=self.dtype), (a,),
                              lambda g: (np.broadcast_to(g, av.shape).copy(),))
        ax = axis % av.ndim

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g, ax), av.shape).copy(),)

        return self._push("sum", av.sum(axis=ax), (a,), bw)

    def mean_axis(self, a: Var, axis: int) -> Var:
        av = a.value
        if not -av.ndim <= axis < av.ndim:
            raise ShapeError(f"mean_axis: axis {axis} out of range for shape {av.shape}")
        ax = axis % av.ndim
        n = av.shape[ax]
        if n == 0:
            raise DegenerateInputError(f"mean_axis: axis {axis} of shape {av.shape} is empty")
        inv = self.dtype.type(1.0 / n)

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g * inv, ax), av.shape).copy(),)

        return self._push("mean", av.mean(axis=ax), (a,), bw)

    def softmax(self, a: Var) -> Var:
        """Softmax over the last axis, stabilised by the row max."""
        out = softmax_rows(a.value)

        def bw(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return self._push("softmax", out, (a,), bw)

    softmax_rows = softmax

    def logsumexp(self, a: Var, mask: Optional[np.ndarray] = None) -> Var:
        """log-sum-exp over the last axis, optionally restricted to ``mask``."""
        av = a.value
        if mask is None:
            mask = np.ones(av.shape, dtype=bool)
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateInputError("logsumexp: a row has an empty mask")
        masked = np.where(mask, av, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(masked - m), 0).astype(self.dtype)
        s = e.sum(axis=-1, keepdims=True)
        out = (np.log(s) + m)[..., 0]
        w = e / s

        def bw(g):
            return (w * g[..., None],)

        return self._push("logsumexp", out, (a,), bw)

    # -------------------------------------------------------------- shaping
    def reshape(self, a: Var, shape: Sequence[int]) -> Var:
        src = a.value.shape
        return self._push("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))

    def transpose(self, a: Var, axes: Optional[Sequence[int]] = None) -> Var:
        if axes is None:
            axes = tuple(reversed(range(a.value.ndim)))
        out = a.value.transpose(axes)
        if not self.grad:
            return self._push("transpose", out)
        inv = tuple(int(i) for i in np.argsort(axes))
        return self._push("transpose", out, (a,), lambda g: (g.transpose(inv),))

    def index(self, a: Var, key: Any) -> Var:
        """``a[key]`` for any numpy index; repeated indices accumulate."""
        av = a.value
        out = np.array(av[key], dtype=self.dtype)

        def bw(g):
            ga = np.zeros_like(av)
            np.add.at(ga, key, g)
            return (ga,)

        return self._push("index", out, (a,), bw)

    # -------------------------------------------------------------- layers
    def layer_norm(self, x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
        xv = x.value
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.dtype.type(eps))
        xhat = xc * rstd
        gv = gain.value
        out = xhat * gv + bias.value
        n = xv.shape[-1]
        lead = tuple(range(xv.ndim - 1))

        def bw(g):
            gg = (g * xhat).sum(axis=lead)
            gb = g.sum(axis=lead)
            gx_hat = g * gv
            gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                         - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
            return gx, gg, gb

        return self._push("layer_norm", out, (x, gain, bias), bw)

    # ------------------------------------------------------------- backward
    def backward(self, loss: Var) -> Dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every parameter on the tape.

        Parameters that do not influence ``loss`` receive zeros.
        """
        if not self.grad:
            raise ContractError("backward on a tape created with grad=False")
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        grads: List[Optional[np.ndarray]] = [None] * len(self._values)
        grads[loss.idx] = np.ones((), dtype=self.dtype)
        order = []
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            fn = self._backward[i]
            order.append(i)
            if fn is None:
                continue
            for p, gp in zip(self._parents[i], fn(g)):
                if gp is None:
                    continue
                gp = np.asarray(gp, dtype=self.dtype)
                if grads[p] is None:
                    grads[p] = gp
                else:
                    grads[p] = grads[p] + gp
        self.last_backward_order = order
        out = {}
        for name, idx in self._params.items():
            g = grads[idx]
            out[name] = np.zeros_like(self._values[idx]) if g is None else g.reshape(self._values[idx].shape)
        return out


def _check_trailing(sa: Tuple[int, ...], sb: Tuple[int, ...], op: str) -> None:
    if len(sb) > len(sa) or tuple(sa[len(sa) - len(sb):]) != tuple(sb):
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis of a plain array."""
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(a: np.ndarray) -> np.ndarray:
    return _sigmoid(np.asarray(a, dtype=np.result_type(a, np.float32)))


# ---------------------------------------------------------------- grad check
@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_param: Dict[str, float] = field(default_factory=dict)
    worst: Optional[Tuple[str, Tuple[int, ...]]] = None
    failure: Optional[str] = None
    n_coords: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "max_rel_err": self.max_rel_err,
            "pass": self.passed,
            "per_param": dict(self.per_param),
            "worst": None if self.worst is None else [self.worst[0], list(self.worst[1])],
            "failure": self.failure,
            "n_coords": self.n_coords,
        }


LossFn = Callable[[Tape, Dict[str, Var]], Union[Var, Sequence[Var]]]


def grad_check(f: LossFn, params: Mapping[str, np.ndarray], h: float = 1e-5,
               tol: float = 1e-4, coords: Optional[Mapping[str, Sequence[int]]] = None
               ) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences in float64.

    ``f(tape, vars)`` builds the loss from the parameter handles, either as a
    scalar or as a sequence of term tensors whose elements sum to the loss.
    Terms are differenced elementwise before summing, so the cancellation
    error is set by each term's magnitude rather than by the whole loss.
    ``coords`` optionally restricts the check to flat indices per parameter.
    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values, grad):
        tape = Tape(np.float64, grad=grad)
        vars_ = {k: tape.param(v, k) for k, v in values.items()}
        out = f(tape, vars_)
        return tape, [out] if isinstance(out, Var) else list(out)

    def finite(terms):
        return all(np.all(np.isfinite(t.value)) for t in terms)

    tape, terms = evaluate(base, True)
    if not terms or not finite(terms):
        return GradCheckReport(float("inf"), False, failure="loss is not finite at base point")
    loss = tape.sum(terms[0])
    for t in terms[1:]:
        loss = tape.add(loss, tape.sum(t))
    analytic = tape.backward(loss)

    report = GradCheckReport(0.0, True)
    worst_err = -1.0
    for name, value in base.items():
        flat = value.reshape(-1)
        idxs = range(flat.size) if coords is None or name not in coords else coords[name]
        err_max = 0.0
        ga = analytic[name].reshape(-1)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            fp = evaluate(base, False)[1]
            flat[j] = orig - h
            fm = evaluate(base, False)[1]
            flat[j] = orig
            report.n_coords += 1
            unravel = tuple(int(i) for i in np.unravel_index(j, value.shape))
            if not (finite(fp) and finite(fm)):
                report.passed = False
                report.max_rel_err = float("inf")
                report.failure = f"non-finite loss when perturbing {name}{list(unravel)}"
                report.per_param[name] = float("inf")
                report.worst = (name, unravel)
                return report
            num = sum(float(np.sum(a.value - b.value)) for a, b in zip(fp, fm)) / (2 * h)
            denom = max(abs(ga[j]), abs(num), 1e-8)
            err = abs(ga[j] - num) / denom
            if err > err_max:
                err_max = err
            if err > worst_err:
                worst_err = err
                report.worst = (name, unravel)
        report.per_param[name] = float(err_max)
        report.max_rel_err = max(report.max_rel_err, float(err_max))
    report.passed = report.max_rel_err < tol
    return report
