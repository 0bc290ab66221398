"""Pure-Python tape engine.

Reference implementation of the scalar reverse-mode tape. The compiled
engine in ``_tapecore.pyx`` mirrors these semantics operation for
operation; ``compute1``/``compute2`` are the single source of truth for
values, local partials, kink conventions, and domain errors. Keep the two
in lockstep: parity tests assert bit-identical values and adjoints.
"""

import math

from ..errors import DomainError, TapeStateError
from . import _ops as op


def _is_integer(x):
    return math.isfinite(x) and x == math.floor(x)


def compute2(opcode, a, b, grad_exponent=False):
    """Value and local partials of a binary primitive.

    Returns (value, d/da, d/db). Kinks (min/max ties) take derivative 0 on
    both sides.
    """
    if opcode == op.ADD:
        return a + b, 1.0, 1.0
    if opcode == op.SUB:
        return a - b, 1.0, -1.0
    if opcode == op.MUL:
        return a * b, b, a
    if opcode == op.DIV:
        if b == 0.0:
            raise DomainError("div: division by zero (numerator %r)" % a)
        v = a / b
        return v, 1.0 / b, -v / b
    if opcode == op.POW:
        if a < 0.0 and not _is_integer(b):
            raise DomainError(
                "pow: negative base %r with non-integer exponent %r" % (a, b)
            )
        if a == 0.0 and b < 0.0:
            raise DomainError("pow: zero base with negative exponent %r" % b)
        if a == 0.0 and 0.0 < b < 1.0:
            raise DomainError("pow: derivative singular at zero base (exponent %r)" % b)
        if grad_exponent and a <= 0.0:
            raise DomainError(
                "pow: gradient w.r.t. exponent needs positive base (base %r)" % a
            )
        v = math.pow(a, b)
        da = 0.0 if b == 0.0 else b * math.pow(a, b - 1.0)
        db = v * math.log(a) if grad_exponent else 0.0
        return v, da, db
    if opcode == op.ATAN2:
        denom = a * a + b * b
        if denom == 0.0:
            raise DomainError("atan2: undefined at origin")
        return math.atan2(a, b), b / denom, -a / denom
    if opcode == op.MIN:
        if a < b:
            return a, 1.0, 0.0
        if b < a:
            return b, 0.0, 1.0
        return a, 0.0, 0.0
    if opcode == op.MAX:
        if a > b:
            return a, 1.0, 0.0
        if b > a:
            return b, 0.0, 1.0
        return a, 0.0, 0.0
    raise ValueError("unknown binary opcode %d" % opcode)


def compute1(opcode, a):
    """Value and local partial of a unary primitive."""
    if opcode == op.SQRT:
        if a < 0.0:
            raise DomainError("sqrt: negative operand %r" % a)
        v = math.sqrt(a)
        return v, 0.0 if a == 0.0 else 0.5 / v
    if opcode == op.SIN:
        return math.sin(a), math.cos(a)
    if opcode == op.COS:
        return math.cos(a), -math.sin(a)
    if opcode == op.TAN:
        v = math.tan(a)
        return v, 1.0 + v * v
    if opcode == op.ABS:
        if a > 0.0:
            return a, 1.0
        if a < 0.0:
            return -a, -1.0
        return 0.0, 0.0
    if opcode == op.EXP:
        v = math.exp(a)
        return v, v
    if opcode == op.LOG:
        if a <= 0.0:
            raise DomainError("log: non-positive operand %r" % a)
        return math.log(a), 1.0 / a
    if opcode == op.RELU:
        if a > 0.0:
            return a, 1.0
        return 0.0, 0.0
    if opcode == op.SIGMA:
        if 0.0 <= a <= 1.0:
            return 1.0 - a, -1.0 if 0.0 < a < 1.0 else 0.0
        return 0.0, 0.0
    raise ValueError("unknown unary opcode %d" % opcode)


class PyTape:
    """Append-only scalar tape with reverse-sweep backward."""

    has_fused = False

    def __init__(self):
        self._ops = []
        self._pa = []
        self._pb = []
        self._da = []
        self._db = []
        self._vals = []
        self._nary = []
        self._adj = None
        self._done = False

    @property
    def n_nodes(self):
        return len(self._ops)

    def reset(self):
        self._ops.clear()
        self._pa.clear()
        self._pb.clear()
        self._da.clear()
        self._db.clear()
        self._vals.clear()
        self._nary.clear()
        self._adj = None
        self._done = False

    def _push(self, opcode, pa, pb, da, db, val):
        if self._done:
            raise TapeStateError("cannot record after backward; reset the tape first")
        self._ops.append(opcode)
        self._pa.append(pa)
        self._pb.append(pb)
        self._da.append(da)
        self._db.append(db)
        self._vals.append(val)
        return len(self._ops) - 1

    def leaf(self, value):
        return self._push(op.LEAF, -1, -1, 0.0, 0.0, float(value))

    def record1(self, opcode, ai, av):
        v, da = compute1(opcode, av)
        return self._push(opcode, ai, -1, da, 0.0, v), v

    def record2(self, opcode, ai, av, bi, bv):
        v, da, db = compute2(opcode, av, bv, grad_exponent=(opcode == op.POW and bi >= 0))
        return self._push(opcode, ai, bi, da, db, v), v

    def record_sum(self, idxs, vals):
        # plain left-to-right accumulation, mirrored by the compiled engine
        total = 0.0
        for v in vals:
            total += v
        offset = len(self._nary)
        self._nary.extend(idxs)
        return self._push(op.SUMN, offset, len(idxs), 0.0, 0.0, total), total

    def value(self, idx):
        return self._vals[idx]

    def backward(self, root_idx, seed_idx=None, seed_val=None):
        if self._done:
            raise TapeStateError("backward already ran on this tape; reset first")
        n = len(self._ops)
        adj = [0.0] * n
        if root_idx >= 0:
            adj[root_idx] = 1.0
        if seed_idx is not None:
            for i, v in zip(seed_idx, seed_val):
                adj[i] += v
        ops_ = self._ops
        pa_ = self._pa
        pb_ = self._pb
        da_ = self._da
        db_ = self._db
        nary = self._nary
        for i in range(n - 1, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            o = ops_[i]
            if o == op.SUMN:
                off = pa_[i]
                for j in range(off, off + pb_[i]):
                    adj[nary[j]] += g
            else:
                a = pa_[i]
                if a >= 0:
                    adj[a] += g * da_[i]
                b = pb_[i]
                if b >= 0:
                    adj[b] += g * db_[i]
        self._adj = adj
        self._done = True

    def adjoint(self, idx):
        if self._adj is None:
            raise TapeStateError("no backward pass has run on this tape")
        return self._adj[idx]
