"""Opcode table shared by the compiled and pure-Python tape engines.

The numeric values are part of the engine ABI: the Cython kernels and the
Python fallback must agree on them, so change them in lockstep with
``_tapecore.pyx``.
"""

LEAF = 0

# binary
ADD = 1
SUB = 2
MUL = 3
DIV = 4
POW = 5
ATAN2 = 6
MIN = 7
MAX = 8

# unary
SQRT = 10
SIN = 11
COS = 12
TAN = 13
ABS = 14
EXP = 15
LOG = 16
RELU = 17
SIGMA = 18

# n-ary
SUMN = 19

OP_NAMES = {
    LEAF: "leaf",
    ADD: "add",
    SUB: "sub",
    MUL: "mul",
    DIV: "div",
    POW: "pow",
    ATAN2: "atan2",
    MIN: "min",
    MAX: "max",
    SQRT: "sqrt",
    SIN: "sin",
    COS: "cos",
    TAN: "tan",
    ABS: "abs",
    EXP: "exp",
    LOG: "log",
    RELU: "relu",
    SIGMA: "sigma",
    SUMN: "sum",
}
