"""Scalar reverse-mode automatic differentiation.

A ``Tape`` records every primitive applied to its ``Variable`` handles and
plays them back in reverse to accumulate adjoints. Variables without a tape
entry are constants: they take part in arithmetic but receive zero adjoint,
which is also how ``detach`` implements stop-gradient.

Conventions fixed here and relied on everywhere else:

* one tape per optimization step, reset after each ``backward``;
* kinks of ``abs``/``min``/``max``/``relu`` (and the splatting hat function
  ``sigma``) differentiate to 0 at the kink itself;
* all arithmetic is IEEE float64, identical between the compiled and
  pure-Python engines.
"""

import math

from ._core import Engine, engine_name
from ._core import _ops as _op
from ._core._pytape import compute1, compute2
from .errors import DomainError, TapeStateError

__all__ = [
    "Tape",
    "Variable",
    "atan2",
    "cos",
    "detach",
    "engine_name",
    "exp",
    "gradient_check",
    "log",
    "relu",
    "sigma",
    "sin",
    "sqrt",
    "sum_vars",
    "tan",
    "unwrap",
    "vabs",
    "vmax",
    "vmin",
]


class Variable:
    """A float with an optional handle into a recording tape."""

    __slots__ = ("val", "tape", "idx", "gen")

    def __init__(self, value, tape=None, idx=-1, gen=0):
        self.val = value
        self.tape = tape
        self.idx = idx
        self.gen = gen

    @property
    def value(self):
        return self.val

    @property
    def is_constant(self):
        return self.tape is None

    def __repr__(self):
        tag = "const" if self.tape is None else "node %d" % self.idx
        return "Variable(%r, %s)" % (self.val, tag)

    def __add__(self, other):
        return _binary(_op.ADD, self, other)

    def __radd__(self, other):
        return _binary(_op.ADD, other, self)

    def __sub__(self, other):
        return _binary(_op.SUB, self, other)

    def __rsub__(self, other):
        return _binary(_op.SUB, other, self)

    def __mul__(self, other):
        return _binary(_op.MUL, self, other)

    def __rmul__(self, other):
        return _binary(_op.MUL, other, self)

    def __truediv__(self, other):
        return _binary(_op.DIV, self, other)

    def __rtruediv__(self, other):
        return _binary(_op.DIV, other, self)

    def __pow__(self, other):
        return _binary(_op.POW, self, other)

    def __rpow__(self, other):
        return _binary(_op.POW, other, self)

    def __neg__(self):
        return _binary(_op.MUL, self, -1.0)

    def __abs__(self):
        return _unary(_op.ABS, self)


class Tape:
    """Owner of one recorded computation; thin wrapper over an engine."""

    def __init__(self, engine_cls=None):
        self.engine = (engine_cls or Engine)()
        self.generation = 0

    @property
    def n_nodes(self):
        return self.engine.n_nodes

    def reset(self):
        """Discard all nodes and invalidate every outstanding handle."""
        self.engine.reset()
        self.generation += 1

    def leaf(self, value):
        """Record an input node whose adjoint survives to be read out."""
        idx = self.engine.leaf(float(value))
        return Variable(float(value), self, idx, self.generation)

    def check(self, var):
        if var.gen != self.generation:
            raise TapeStateError("stale tape handle (tape was reset)")

    def backward(self, root=None, seeds=None):
        """Reverse sweep from ``root`` (adjoint 1) plus optional extra seeds.

        ``seeds`` is an iterable of (Variable, adjoint) pairs; it is how
        dense image-space gradients re-enter the tape at PSF cells.
        """
        root_idx = -1
        if root is not None:
            if root.tape is not self:
                raise TapeStateError("backward root is not on this tape")
            self.check(root)
            root_idx = root.idx
        seed_idx = None
        seed_val = None
        if seeds is not None:
            seed_idx = []
            seed_val = []
            for var, adj in seeds:
                if var.tape is None:
                    continue
                if var.tape is not self:
                    raise TapeStateError("seed variable is not on this tape")
                self.check(var)
                seed_idx.append(var.idx)
                seed_val.append(float(adj))
        if root_idx < 0 and not seed_idx:
            raise TapeStateError("backward needs a recorded root or at least one seed")
        self.engine.backward(root_idx, seed_idx, seed_val)

    def grad(self, var):
        """Adjoint of ``var`` after backward; constants report 0."""
        if var.tape is None:
            return 0.0
        if var.tape is not self:
            raise TapeStateError("variable is not on this tape")
        self.check(var)
        return self.engine.adjoint(var.idx)


def _binary(opcode, a, b):
    if isinstance(a, Variable):
        ta = a.tape
        av, ai = a.val, a.idx
    else:
        ta = None
        av, ai = float(a), -1
    if isinstance(b, Variable):
        tb = b.tape
        bv, bi = b.val, b.idx
    else:
        tb = None
        bv, bi = float(b), -1
    if ta is None and tb is None:
        v, _, _ = compute2(opcode, av, bv)
        return Variable(v)
    if ta is not None and tb is not None and ta is not tb:
        raise TapeStateError("operands recorded on different tapes")
    tape = ta if ta is not None else tb
    gen = tape.generation
    if (ta is not None and a.gen != gen) or (tb is not None and b.gen != gen):
        raise TapeStateError("stale tape handle (tape was reset)")
    if ta is None:
        ai = -1
    if tb is None:
        bi = -1
    idx, v = tape.engine.record2(opcode, ai, av, bi, bv)
    return Variable(v, tape, idx, gen)


def _unary(opcode, a):
    if not isinstance(a, Variable):
        v, _ = compute1(opcode, float(a))
        return Variable(v)
    if a.tape is None:
        v, _ = compute1(opcode, a.val)
        return Variable(v)
    tape = a.tape
    if a.gen != tape.generation:
        raise TapeStateError("stale tape handle (tape was reset)")
    idx, v = tape.engine.record1(opcode, a.idx, a.val)
    return Variable(v, tape, idx, tape.generation)


def sqrt(x):
    return _unary(_op.SQRT, x)


def sin(x):
    return _unary(_op.SIN, x)


def cos(x):
    return _unary(_op.COS, x)


def tan(x):
    return _unary(_op.TAN, x)


def exp(x):
    return _unary(_op.EXP, x)


def log(x):
    return _unary(_op.LOG, x)


def relu(x):
    return _unary(_op.RELU, x)


def sigma(x):
    """Hat weight 1-x on [0, 1], 0 outside; derivative 0 at both kinks."""
    return _unary(_op.SIGMA, x)


def vabs(x):
    return _unary(_op.ABS, x)


def atan2(y, x):
    return _binary(_op.ATAN2, y, x)


def vmin(a, b):
    return _binary(_op.MIN, a, b)


def vmax(a, b):
    return _binary(_op.MAX, a, b)


def detach(x):
    """Stop-gradient: the value continues, the adjoint does not."""
    if isinstance(x, Variable):
        return Variable(x.val)
    return Variable(float(x))


def unwrap(x):
    """Constant Variables become plain floats; tape nodes pass through."""
    if isinstance(x, Variable) and x.tape is None:
        return x.val
    return x


def sum_vars(items):
    """Sum of Variables and floats as a single n-ary tape node.

    Much cheaper than a chain of ``+`` for long reductions (one node, one
    accumulation loop) and the only reduction primitive the fused kernels
    emit, so pure and compiled paths stay comparable.
    """
    tape = None
    node_idx = []
    node_val = []
    const_total = 0.0
    for item in items:
        if isinstance(item, Variable) and item.tape is not None:
            t = item.tape
            if t.generation != item.gen:
                raise TapeStateError("stale tape handle (tape was reset)")
            if tape is None:
                tape = t
            elif tape is not t:
                raise TapeStateError("operands recorded on different tapes")
            node_idx.append(item.idx)
            node_val.append(item.val)
        else:
            const_total += item.val if isinstance(item, Variable) else float(item)
    if tape is None:
        return Variable(const_total)
    if len(node_idx) == 1:
        out = Variable(node_val[0], tape, node_idx[0], tape.generation)
    else:
        idx, v = tape.engine.record_sum(node_idx, node_val)
        out = Variable(v, tape, idx, tape.generation)
    if const_total != 0.0:
        out = out + const_total
    return out


def gradient_check(f, x, h=1e-6):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of Variables to a scalar Variable; it is evaluated
    once on tape leaves and twice per coordinate on constants for the
    finite-difference probes.
    """
    tape = Tape()
    leaves = [tape.leaf(v) for v in x]
    y = f(leaves)
    if y.tape is None:
        g_ad = [0.0] * len(x)
    else:
        tape.backward(y)
        g_ad = [tape.grad(v) for v in leaves]

    worst = 0.0
    for i in range(len(x)):
        probes = []
        for sign in (1.0, -1.0):
            xp = [Variable(v) for v in x]
            xp[i] = Variable(x[i] + sign * h)
            fv = f(xp)
            fv = fv.val if isinstance(fv, Variable) else float(fv)
            if not math.isfinite(fv):
                raise DomainError(
                    "gradient_check: non-finite value at index %d (probe %+g)"
                    % (i, sign * h)
                )
            probes.append(fv)
        g_fd = (probes[0] - probes[1]) / (2.0 * h)
        rel = abs(g_ad[i] - g_fd) / max(1e-12, abs(g_fd))
        if rel > worst:
            worst = rel
    return worst
