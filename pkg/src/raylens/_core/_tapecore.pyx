# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tape engine and fused hot kernels.

Semantics are defined by ``_pytape.py``: every opcode here must produce
bit-identical values, partials, and adjoints (same IEEE operation order, no
FMA contraction; see -ffp-contract=off in setup.py). Domain violations
delegate to the pure-Python compute functions so error messages match.

The fused kernels (bundle tracing, penalty reduction, spot reduction)
record exactly the node sequence the per-ray Python composition in
``raytrace.py``/``optimize.py`` would record; the parity test suite pins
that equivalence bit-for-bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan2 as c_atan2
from libc.math cimport cos as c_cos
from libc.math cimport exp as c_exp
from libc.math cimport fabs, floor
from libc.math cimport log as c_log
from libc.math cimport pow as c_pow
from libc.math cimport sin as c_sin
from libc.math cimport sqrt as c_sqrt
from libc.math cimport tan as c_tan

from raylens._core._pytape import compute1 as py_compute1
from raylens._core._pytape import compute2 as py_compute2
from raylens.errors import TapeStateError

cnp.import_array()

DEF OP_LEAF = 0
DEF OP_ADD = 1
DEF OP_SUB = 2
DEF OP_MUL = 3
DEF OP_DIV = 4
DEF OP_POW = 5
DEF OP_ATAN2 = 6
DEF OP_MIN = 7
DEF OP_MAX = 8
DEF OP_SQRT = 10
DEF OP_SIN = 11
DEF OP_COS = 12
DEF OP_TAN = 13
DEF OP_ABS = 14
DEF OP_EXP = 15
DEF OP_LOG = 16
DEF OP_RELU = 17
DEF OP_SIGMA = 18
DEF OP_SUMN = 19


cdef inline bint _is_integer(double x) noexcept nogil:
    return x == floor(x)


cdef class CTape:
    """Drop-in compiled replacement for ``_pytape.PyTape``."""

    cdef cnp.ndarray ops_a, pa_a, pb_a, da_a, db_a, val_a, nary_a, adj_a
    cdef unsigned char *ops
    cdef cnp.int32_t *pa
    cdef cnp.int32_t *pb
    cdef double *da
    cdef double *db
    cdef double *vals
    cdef cnp.int32_t *nary
    cdef Py_ssize_t n, cap, nary_n, nary_cap
    cdef bint done

    has_fused = True

    def __cinit__(self):
        self.cap = 1 << 16
        self.nary_cap = 1 << 12
        self.ops_a = np.empty(self.cap, dtype=np.uint8)
        self.pa_a = np.empty(self.cap, dtype=np.int32)
        self.pb_a = np.empty(self.cap, dtype=np.int32)
        self.da_a = np.empty(self.cap, dtype=np.float64)
        self.db_a = np.empty(self.cap, dtype=np.float64)
        self.val_a = np.empty(self.cap, dtype=np.float64)
        self.nary_a = np.empty(self.nary_cap, dtype=np.int32)
        self.adj_a = None
        self._rebind()
        self.n = 0
        self.nary_n = 0
        self.done = False

    cdef void _rebind(self):
        self.ops = <unsigned char *> cnp.PyArray_DATA(self.ops_a)
        self.pa = <cnp.int32_t *> cnp.PyArray_DATA(self.pa_a)
        self.pb = <cnp.int32_t *> cnp.PyArray_DATA(self.pb_a)
        self.da = <double *> cnp.PyArray_DATA(self.da_a)
        self.db = <double *> cnp.PyArray_DATA(self.db_a)
        self.vals = <double *> cnp.PyArray_DATA(self.val_a)
        self.nary = <cnp.int32_t *> cnp.PyArray_DATA(self.nary_a)

    cdef void _grow(self, Py_ssize_t need):
        cdef Py_ssize_t newcap = self.cap
        while newcap < need:
            newcap = newcap + (newcap >> 1)
        self.ops_a = np.resize(self.ops_a, newcap)
        self.pa_a = np.resize(self.pa_a, newcap)
        self.pb_a = np.resize(self.pb_a, newcap)
        self.da_a = np.resize(self.da_a, newcap)
        self.db_a = np.resize(self.db_a, newcap)
        self.val_a = np.resize(self.val_a, newcap)
        self.cap = newcap
        self._rebind()

    cdef void _grow_nary(self, Py_ssize_t need):
        cdef Py_ssize_t newcap = self.nary_cap
        while newcap < need:
            newcap = newcap + (newcap >> 1)
        self.nary_a = np.resize(self.nary_a, newcap)
        self.nary_cap = newcap
        self._rebind()

    @property
    def n_nodes(self):
        return self.n

    def reset(self):
        self.n = 0
        self.nary_n = 0
        self.adj_a = None
        self.done = False

    cdef inline Py_ssize_t _push(self, int opcode, Py_ssize_t pa, Py_ssize_t pb,
                                 double da, double db, double val) except -1:
        if self.done:
            raise TapeStateError("cannot record after backward; reset the tape first")
        cdef Py_ssize_t i = self.n
        if i >= self.cap:
            self._grow(i + 1)
        self.ops[i] = <unsigned char> opcode
        self.pa[i] = <cnp.int32_t> pa
        self.pb[i] = <cnp.int32_t> pb
        self.da[i] = da
        self.db[i] = db
        self.vals[i] = val
        self.n = i + 1
        return i

    def leaf(self, double value):
        return self._push(OP_LEAF, -1, -1, 0.0, 0.0, value)

    # Returns 0 on success, 1 on domain violation (caller re-raises through
    # the pure-Python compute for an identical message).
    cdef inline int _compute2(self, int opcode, double a, double b, bint grad_exp,
                              double *v, double *da, double *db) noexcept nogil:
        cdef double denom
        if opcode == OP_ADD:
            v[0] = a + b; da[0] = 1.0; db[0] = 1.0
        elif opcode == OP_SUB:
            v[0] = a - b; da[0] = 1.0; db[0] = -1.0
        elif opcode == OP_MUL:
            v[0] = a * b; da[0] = b; db[0] = a
        elif opcode == OP_DIV:
            if b == 0.0:
                return 1
            v[0] = a / b; da[0] = 1.0 / b; db[0] = -v[0] / b
        elif opcode == OP_POW:
            if a < 0.0 and not _is_integer(b):
                return 1
            if a == 0.0 and b < 0.0:
                return 1
            if a == 0.0 and 0.0 < b < 1.0:
                return 1
            if grad_exp and a <= 0.0:
                return 1
            v[0] = c_pow(a, b)
            da[0] = 0.0 if b == 0.0 else b * c_pow(a, b - 1.0)
            db[0] = v[0] * c_log(a) if grad_exp else 0.0
        elif opcode == OP_ATAN2:
            denom = a * a + b * b
            if denom == 0.0:
                return 1
            v[0] = c_atan2(a, b); da[0] = b / denom; db[0] = -a / denom
        elif opcode == OP_MIN:
            if a < b:
                v[0] = a; da[0] = 1.0; db[0] = 0.0
            elif b < a:
                v[0] = b; da[0] = 0.0; db[0] = 1.0
            else:
                v[0] = a; da[0] = 0.0; db[0] = 0.0
        elif opcode == OP_MAX:
            if a > b:
                v[0] = a; da[0] = 1.0; db[0] = 0.0
            elif b > a:
                v[0] = b; da[0] = 0.0; db[0] = 1.0
            else:
                v[0] = a; da[0] = 0.0; db[0] = 0.0
        else:
            return 2
        return 0

    cdef inline int _compute1(self, int opcode, double a, double *v, double *da) noexcept nogil:
        if opcode == OP_SQRT:
            if a < 0.0:
                return 1
            v[0] = c_sqrt(a)
            da[0] = 0.0 if a == 0.0 else 0.5 / v[0]
        elif opcode == OP_SIN:
            v[0] = c_sin(a); da[0] = c_cos(a)
        elif opcode == OP_COS:
            v[0] = c_cos(a); da[0] = -c_sin(a)
        elif opcode == OP_TAN:
            v[0] = c_tan(a); da[0] = 1.0 + v[0] * v[0]
        elif opcode == OP_ABS:
            if a > 0.0:
                v[0] = a; da[0] = 1.0
            elif a < 0.0:
                v[0] = -a; da[0] = -1.0
            else:
                v[0] = 0.0; da[0] = 0.0
        elif opcode == OP_EXP:
            v[0] = c_exp(a); da[0] = v[0]
        elif opcode == OP_LOG:
            if a <= 0.0:
                return 1
            v[0] = c_log(a); da[0] = 1.0 / a
        elif opcode == OP_RELU:
            if a > 0.0:
                v[0] = a; da[0] = 1.0
            else:
                v[0] = 0.0; da[0] = 0.0
        elif opcode == OP_SIGMA:
            if 0.0 <= a <= 1.0:
                v[0] = 1.0 - a
                da[0] = -1.0 if 0.0 < a < 1.0 else 0.0
            else:
                v[0] = 0.0; da[0] = 0.0
        else:
            return 2
        return 0

    def record1(self, int opcode, Py_ssize_t ai, double av):
        cdef double v = 0.0, da = 0.0
        cdef int err = self._compute1(opcode, av, &v, &da)
        if err:
            py_compute1(opcode, av)  # raises the canonical DomainError
            raise ValueError("unknown unary opcode %d" % opcode)
        cdef Py_ssize_t idx = self._push(opcode, ai, -1, da, 0.0, v)
        return idx, v

    def record2(self, int opcode, Py_ssize_t ai, double av, Py_ssize_t bi, double bv):
        cdef double v = 0.0, da = 0.0, db = 0.0
        cdef bint grad_exp = (opcode == OP_POW and bi >= 0)
        cdef int err = self._compute2(opcode, av, bv, grad_exp, &v, &da, &db)
        if err:
            py_compute2(opcode, av, bv, grad_exponent=grad_exp)
            raise ValueError("unknown binary opcode %d" % opcode)
        cdef Py_ssize_t idx = self._push(opcode, ai, bi, da, db, v)
        return idx, v

    cdef Py_ssize_t _push_sum(self, const cnp.int32_t *idxs, const double *vals,
                              Py_ssize_t m) except -1:
        cdef double total = 0.0
        cdef Py_ssize_t j
        for j in range(m):
            total += vals[j]
        if self.nary_n + m > self.nary_cap:
            self._grow_nary(self.nary_n + m)
        cdef Py_ssize_t off = self.nary_n
        for j in range(m):
            self.nary[off + j] = idxs[j]
        self.nary_n = off + m
        return self._push(OP_SUMN, off, m, 0.0, 0.0, total)

    def record_sum(self, idxs, vals):
        cdef cnp.ndarray[cnp.int32_t, ndim=1] ia = np.ascontiguousarray(idxs, dtype=np.int32)
        cdef cnp.ndarray[cnp.float64_t, ndim=1] va = np.ascontiguousarray(vals, dtype=np.float64)
        cdef Py_ssize_t m = ia.shape[0]
        cdef Py_ssize_t idx = self._push_sum(<cnp.int32_t *> cnp.PyArray_DATA(ia),
                                             <double *> cnp.PyArray_DATA(va), m)
        return idx, self.vals[idx]

    def value(self, Py_ssize_t idx):
        return self.vals[idx]

    def backward(self, Py_ssize_t root_idx, seed_idx=None, seed_val=None):
        if self.done:
            raise TapeStateError("backward already ran on this tape; reset first")
        cdef cnp.ndarray[cnp.float64_t, ndim=1] adj_arr = np.zeros(self.n, dtype=np.float64)
        cdef double *adj = <double *> cnp.PyArray_DATA(adj_arr)
        if root_idx >= 0:
            adj[root_idx] = 1.0
        cdef Py_ssize_t k
        if seed_idx is not None:
            for k in range(len(seed_idx)):
                adj[<Py_ssize_t> seed_idx[k]] += <double> seed_val[k]
        cdef Py_ssize_t i, j, off, cnt
        cdef double g
        cdef int o
        for i in range(self.n - 1, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            o = self.ops[i]
            if o == OP_SUMN:
                off = self.pa[i]
                cnt = self.pb[i]
                for j in range(off, off + cnt):
                    adj[self.nary[j]] += g
            else:
                if self.pa[i] >= 0:
                    adj[self.pa[i]] += g * self.da[i]
                if self.pb[i] >= 0:
                    adj[self.pb[i]] += g * self.db[i]
        self.adj_a = adj_arr
        self.done = True

    def adjoint(self, Py_ssize_t idx):
        if self.adj_a is None:
            raise TapeStateError("no backward pass has run on this tape")
        return (<double *> cnp.PyArray_DATA(self.adj_a))[idx]

    # ------------------------------------------------------------------
    # fused kernels
    #
    # These record exactly the node sequences that the Variable-level
    # compositions in raytrace.py / psf.py / optimize.py would record
    # (including constant folding), just without Python dispatch. The
    # parity tests compare both paths bit-for-bit.

    cdef inline Py_ssize_t _push_raw(self, int opcode, Py_ssize_t pa, Py_ssize_t pb,
                                     double da, double db, double val) noexcept nogil:
        cdef Py_ssize_t i = self.n
        self.ops[i] = <unsigned char> opcode
        self.pa[i] = <cnp.int32_t> pa
        self.pb[i] = <cnp.int32_t> pb
        self.da[i] = da
        self.db[i] = db
        self.vals[i] = val
        self.n = i + 1
        return i

    cdef inline void _e2(self, int opcode, Py_ssize_t ai, double av,
                         Py_ssize_t bi, double bv,
                         Py_ssize_t *oi, double *ov) noexcept nogil:
        """Binary op with Variable-layer constant folding; no domain checks
        (callers guard domains before emitting)."""
        cdef double v = 0.0, da = 0.0, db = 0.0
        self._compute2(opcode, av, bv, 0, &v, &da, &db)
        if ai < 0 and bi < 0:
            oi[0] = -1
            ov[0] = v
            return
        oi[0] = self._push_raw(opcode, ai, bi, da, db, v)
        ov[0] = v

    cdef inline void _e1(self, int opcode, Py_ssize_t ai, double av,
                         Py_ssize_t *oi, double *ov) noexcept nogil:
        cdef double v = 0.0, da = 0.0
        self._compute1(opcode, av, &v, &da)
        if ai < 0:
            oi[0] = -1
            ov[0] = v
            return
        oi[0] = self._push_raw(opcode, ai, -1, da, 0.0, v)
        ov[0] = v

    cdef inline Py_ssize_t _push_sum_raw(self, const cnp.int32_t *idxs,
                                         const double *vals, Py_ssize_t m) noexcept nogil:
        cdef double total = 0.0
        cdef Py_ssize_t j
        for j in range(m):
            total += vals[j]
        cdef Py_ssize_t off = self.nary_n
        for j in range(m):
            self.nary[off + j] = idxs[j]
        self.nary_n = off + m
        return self._push_raw(OP_SUMN, off, m, 0.0, 0.0, total)

    def ensure_capacity(self, Py_ssize_t extra_nodes, Py_ssize_t extra_nary=0):
        if self.done:
            raise TapeStateError("cannot record after backward; reset the tape first")
        if self.n + extra_nodes > self.cap:
            self._grow(self.n + extra_nodes)
        if self.nary_n + extra_nary > self.nary_cap:
            self._grow_nary(self.nary_n + extra_nary)

    def trace_bundle(self,
                     cnp.ndarray[cnp.float64_t, ndim=2] surf_vals,
                     cnp.ndarray[cnp.int32_t, ndim=2] surf_idx,
                     cnp.ndarray[cnp.float64_t, ndim=1] eta_arr,
                     Py_ssize_t stop_index, double stop_z, double stop_r,
                     bint apply_clip, double sensor_z,
                     cnp.ndarray[cnp.float64_t, ndim=2] origins,
                     cnp.ndarray[cnp.float64_t, ndim=2] dirs,
                     cnp.ndarray[cnp.int32_t, ndim=1] x_idx,
                     cnp.ndarray[cnp.int32_t, ndim=1] y_idx,
                     cnp.ndarray[cnp.float64_t, ndim=1] x_val,
                     cnp.ndarray[cnp.float64_t, ndim=1] y_val,
                     cnp.ndarray[cnp.uint8_t, ndim=1] valid,
                     cnp.ndarray[cnp.int32_t, ndim=2] cos_idx,
                     cnp.ndarray[cnp.float64_t, ndim=2] cos_val,
                     cnp.ndarray[cnp.float64_t, ndim=2] stop_xy):
        """Mirror of raytrace._trace_scalar for one bundle."""
        cdef Py_ssize_t n_rays = origins.shape[0]
        cdef Py_ssize_t n_surf = surf_vals.shape[0]
        self.ensure_capacity(n_rays * (130 * n_surf + 32))
        cdef double[:, :] sv = surf_vals
        cdef cnp.int32_t[:, :] sx = surf_idx
        cdef double[:] eta = eta_arr
        cdef double[:, :] o_in = origins
        cdef double[:, :] d_in = dirs
        cdef cnp.int32_t[:] xi = x_idx
        cdef cnp.int32_t[:] yi = y_idx
        cdef double[:] xv = x_val
        cdef double[:] yv = y_val
        cdef cnp.uint8_t[:] va = valid
        cdef cnp.int32_t[:, :] ci = cos_idx
        cdef double[:, :] cv = cos_val
        cdef double[:, :] sxy = stop_xy
        cdef Py_ssize_t i
        with nogil:
            for i in range(n_rays):
                self._trace_one(i, n_surf, sv, sx, eta, stop_index, stop_z,
                                stop_r, apply_clip, sensor_z, o_in, d_in,
                                xi, yi, xv, yv, va, ci, cv, sxy)

    cdef void _trace_one(self, Py_ssize_t i, Py_ssize_t n_surf,
                         double[:, :] sv, cnp.int32_t[:, :] sx, double[:] eta,
                         Py_ssize_t stop_index, double stop_z, double stop_r,
                         bint apply_clip, double sensor_z,
                         double[:, :] o_in, double[:, :] d_in,
                         cnp.int32_t[:] xi_out, cnp.int32_t[:] yi_out,
                         double[:] xv_out, double[:] yv_out,
                         cnp.uint8_t[:] va_out, cnp.int32_t[:, :] ci_out,
                         double[:, :] cv_out, double[:, :] sxy_out) noexcept nogil:
        # ray state: (index, value) pairs; index -1 marks a constant
        cdef Py_ssize_t oxi = -1, oyi = -1, ozi = -1, dxi = -1, dyi = -1, dzi = -1
        cdef double oxv = o_in[i, 0], oyv = o_in[i, 1], ozv = o_in[i, 2]
        cdef double dxv = d_in[i, 0], dyv = d_in[i, 1], dzv = d_in[i, 2]
        cdef double c, k, a4, a6, a8, a10, vz, sd, et
        cdef double tb = 0.0, fp = 0.0, ts, xs, ys
        cdef bint ok = True
        cdef Py_ssize_t si, ii
        cdef Py_ssize_t ci_c, ci_k, ci_a4, ci_a6, ci_a8, ci_a10, ci_vz
        # node scratch
        cdef Py_ssize_t t1i, t2i, x1i, y1i, r2bi, sagi, zbi, fbi, ti
        cdef Py_ssize_t xni, yni, zni, r2i, sli
        cdef Py_ssize_t gxi, gyi, nxi, nyi, n2i, nni, inxi, inyi, inzi
        cdef Py_ssize_t cosii, c2i, omci, s2ti, kki, costi, eci, coefi
        cdef Py_ssize_t d2xi = -1, d2yi = -1, d2zi = -1
        cdef double t1v, t2v, x1v, y1v, r2bv, sagv, zbv, fbv, tv
        cdef double xnv, ynv, znv, r2v, slv
        cdef double gxv, gyv, nxv, nyv, n2v, nnv, inxv, inyv, inzv
        cdef double cosiv, c2v, omcv, s2tv, kkv, costv, ecv, coefv
        cdef double d2xv = 0.0, d2yv = 0.0, d2zv = 0.0

        va_out[i] = 0
        for si in range(n_surf):
            if si == stop_index:
                if dzv <= 0.0:
                    return
                ts = (stop_z - ozv) / dzv
                xs = oxv + dxv * ts
                ys = oyv + dyv * ts
                sxy_out[i, 0] = xs
                sxy_out[i, 1] = ys
                if apply_clip and xs * xs + ys * ys > stop_r * stop_r:
                    return
            c = sv[si, 0]; k = sv[si, 1]; a4 = sv[si, 2]; a6 = sv[si, 3]
            a8 = sv[si, 4]; a10 = sv[si, 5]; vz = sv[si, 6]; sd = sv[si, 7]
            ci_c = sx[si, 0]; ci_k = sx[si, 1]; ci_a4 = sx[si, 2]
            ci_a6 = sx[si, 3]; ci_a8 = sx[si, 4]; ci_a10 = sx[si, 5]
            ci_vz = sx[si, 6]
            et = eta[si]
            if not self._newton(c, k, a4, a6, a8, a10, vz,
                                oxv, oyv, ozv, dxv, dyv, dzv, &tb, &fp):
                return
            # --- mirror raytrace._intersect_nodes ---
            self._e2(OP_MUL, dxi, dxv, -1, tb, &t1i, &t1v)
            self._e2(OP_ADD, oxi, oxv, t1i, t1v, &x1i, &x1v)
            self._e2(OP_MUL, dyi, dyv, -1, tb, &t1i, &t1v)
            self._e2(OP_ADD, oyi, oyv, t1i, t1v, &y1i, &y1v)
            self._e2(OP_MUL, x1i, x1v, x1i, x1v, &t1i, &t1v)
            self._e2(OP_MUL, y1i, y1v, y1i, y1v, &t2i, &t2v)
            self._e2(OP_ADD, t1i, t1v, t2i, t2v, &r2bi, &r2bv)
            self._sag_nodes(c, k, a4, a6, a8, a10, ci_c, ci_k, ci_a4, ci_a6,
                            ci_a8, ci_a10, r2bi, r2bv, &sagi, &sagv)
            self._e2(OP_MUL, dzi, dzv, -1, tb, &t1i, &t1v)
            self._e2(OP_ADD, ozi, ozv, t1i, t1v, &zbi, &zbv)
            self._e2(OP_SUB, zbi, zbv, ci_vz, vz, &t1i, &t1v)
            self._e2(OP_SUB, t1i, t1v, sagi, sagv, &fbi, &fbv)
            self._e2(OP_DIV, fbi, fbv, -1, fp, &t1i, &t1v)
            self._e2(OP_SUB, -1, tb, t1i, t1v, &ti, &tv)
            self._e2(OP_MUL, dxi, dxv, ti, tv, &t1i, &t1v)
            self._e2(OP_ADD, oxi, oxv, t1i, t1v, &xni, &xnv)
            self._e2(OP_MUL, dyi, dyv, ti, tv, &t1i, &t1v)
            self._e2(OP_ADD, oyi, oyv, t1i, t1v, &yni, &ynv)
            self._e2(OP_MUL, dzi, dzv, ti, tv, &t1i, &t1v)
            self._e2(OP_ADD, ozi, ozv, t1i, t1v, &zni, &znv)
            self._e2(OP_MUL, xni, xnv, xni, xnv, &t1i, &t1v)
            self._e2(OP_MUL, yni, ynv, yni, ynv, &t2i, &t2v)
            self._e2(OP_ADD, t1i, t1v, t2i, t2v, &r2i, &r2v)
            self._slope_nodes(c, k, a4, a6, a8, a10, ci_c, ci_k, ci_a4, ci_a6,
                              ci_a8, ci_a10, r2i, r2v, &sli, &slv)
            if apply_clip and c_sqrt(r2bv) > sd:
                return
            # --- mirror raytrace._normal_nodes ---
            self._e2(OP_MUL, xni, xnv, sli, slv, &gxi, &gxv)
            self._e2(OP_MUL, yni, ynv, sli, slv, &gyi, &gyv)
            self._e2(OP_MUL, gxi, gxv, -1, -2.0, &nxi, &nxv)
            self._e2(OP_MUL, gyi, gyv, -1, -2.0, &nyi, &nyv)
            self._e2(OP_MUL, nxi, nxv, nxi, nxv, &t1i, &t1v)
            self._e2(OP_MUL, nyi, nyv, nyi, nyv, &t2i, &t2v)
            self._e2(OP_ADD, t1i, t1v, t2i, t2v, &t1i, &t1v)
            self._e2(OP_ADD, t1i, t1v, -1, 1.0, &n2i, &n2v)
            self._e1(OP_SQRT, n2i, n2v, &nni, &nnv)
            self._e2(OP_DIV, nxi, nxv, nni, nnv, &inxi, &inxv)
            self._e2(OP_DIV, nyi, nyv, nni, nnv, &inyi, &inyv)
            self._e2(OP_DIV, -1, 1.0, nni, nnv, &inzi, &inzv)
            # --- mirror raytrace._refract_nodes ---
            self._e2(OP_MUL, dxi, dxv, inxi, inxv, &t1i, &t1v)
            self._e2(OP_MUL, dyi, dyv, inyi, inyv, &t2i, &t2v)
            self._e2(OP_ADD, t1i, t1v, t2i, t2v, &t1i, &t1v)
            self._e2(OP_MUL, dzi, dzv, inzi, inzv, &t2i, &t2v)
            self._e2(OP_ADD, t1i, t1v, t2i, t2v, &cosii, &cosiv)
            self._e2(OP_MUL, cosii, cosiv, cosii, cosiv, &c2i, &c2v)
            self._e2(OP_SUB, -1, 1.0, c2i, c2v, &omci, &omcv)
            self._e2(OP_MUL, -1, et * et, omci, omcv, &s2ti, &s2tv)
            self._e2(OP_SUB, -1, 1.0, s2ti, s2tv, &kki, &kkv)
            # transmitted direction d*eta - coef*n is emitted before the
            # validity checks, matching the scalar composition
            if kkv >= 0.0:
                self._e1(OP_SQRT, kki, kkv, &costi, &costv)
                self._e2(OP_MUL, cosii, cosiv, -1, et, &eci, &ecv)
                self._e2(OP_SUB, eci, ecv, costi, costv, &coefi, &coefv)
                self._e2(OP_MUL, dxi, dxv, -1, et, &t1i, &t1v)
                self._e2(OP_MUL, coefi, coefv, inxi, inxv, &t2i, &t2v)
                self._e2(OP_SUB, t1i, t1v, t2i, t2v, &d2xi, &d2xv)
                self._e2(OP_MUL, dyi, dyv, -1, et, &t1i, &t1v)
                self._e2(OP_MUL, coefi, coefv, inyi, inyv, &t2i, &t2v)
                self._e2(OP_SUB, t1i, t1v, t2i, t2v, &d2yi, &d2yv)
                self._e2(OP_MUL, dzi, dzv, -1, et, &t1i, &t1v)
                self._e2(OP_MUL, coefi, coefv, inzi, inzv, &t2i, &t2v)
                self._e2(OP_SUB, t1i, t1v, t2i, t2v, &d2zi, &d2zv)
            if cosiv <= 0.0:
                return  # grazing/backside incidence
            ci_out[i, si] = <cnp.int32_t> cosii
            cv_out[i, si] = cosiv
            if kkv < 0.0:
                return  # total internal reflection
            dxi = d2xi; dxv = d2xv
            dyi = d2yi; dyv = d2yv
            dzi = d2zi; dzv = d2zv
            oxi = xni; oxv = xnv
            oyi = yni; oyv = ynv
            ozi = zni; ozv = znv
        if stop_index == n_surf:
            if dzv <= 0.0:
                return
            ts = (stop_z - ozv) / dzv
            xs = oxv + dxv * ts
            ys = oyv + dyv * ts
            sxy_out[i, 0] = xs
            sxy_out[i, 1] = ys
            if apply_clip and xs * xs + ys * ys > stop_r * stop_r:
                return
        if dzv <= 0.0:
            return
        # sensor plane
        self._e2(OP_SUB, -1, sensor_z, ozi, ozv, &t1i, &t1v)
        self._e2(OP_DIV, t1i, t1v, dzi, dzv, &ti, &tv)
        self._e2(OP_MUL, dxi, dxv, ti, tv, &t1i, &t1v)
        self._e2(OP_ADD, oxi, oxv, t1i, t1v, &xni, &xnv)
        self._e2(OP_MUL, dyi, dyv, ti, tv, &t1i, &t1v)
        self._e2(OP_ADD, oyi, oyv, t1i, t1v, &yni, &ynv)
        xi_out[i] = <cnp.int32_t> xni
        yi_out[i] = <cnp.int32_t> yni
        xv_out[i] = xnv
        yv_out[i] = ynv
        va_out[i] = 1

    cdef void _sag_nodes(self, double c, double k, double a4, double a6,
                         double a8, double a10,
                         Py_ssize_t ci_c, Py_ssize_t ci_k, Py_ssize_t ci_a4,
                         Py_ssize_t ci_a6, Py_ssize_t ci_a8, Py_ssize_t ci_a10,
                         Py_ssize_t r2i, double r2v,
                         Py_ssize_t *oi, double *ov) noexcept nogil:
        """Mirror of optics.sag_expr."""
        cdef Py_ssize_t cci, wi, ui, sqi, deni, numi, basei
        cdef Py_ssize_t r4i, r6i, r8i, r10i, t1i, acci
        cdef double ccv, wv, uv, sqv, denv, numv, basev
        cdef double r4v, r6v, r8v, r10v, t1v, accv
        self._e2(OP_MUL, ci_c, c, ci_c, c, &cci, &ccv)
        self._e2(OP_ADD, -1, 1.0, ci_k, k, &t1i, &t1v)
        self._e2(OP_MUL, t1i, t1v, cci, ccv, &wi, &wv)
        self._e2(OP_MUL, wi, wv, r2i, r2v, &ui, &uv)
        self._e2(OP_SUB, -1, 1.0, ui, uv, &t1i, &t1v)
        self._e1(OP_SQRT, t1i, t1v, &sqi, &sqv)
        self._e2(OP_ADD, -1, 1.0, sqi, sqv, &deni, &denv)
        self._e2(OP_MUL, ci_c, c, r2i, r2v, &numi, &numv)
        self._e2(OP_DIV, numi, numv, deni, denv, &basei, &basev)
        self._e2(OP_MUL, r2i, r2v, r2i, r2v, &r4i, &r4v)
        self._e2(OP_MUL, r4i, r4v, r2i, r2v, &r6i, &r6v)
        self._e2(OP_MUL, r6i, r6v, r2i, r2v, &r8i, &r8v)
        self._e2(OP_MUL, r8i, r8v, r2i, r2v, &r10i, &r10v)
        self._e2(OP_MUL, ci_a4, a4, r4i, r4v, &t1i, &t1v)
        self._e2(OP_ADD, basei, basev, t1i, t1v, &acci, &accv)
        self._e2(OP_MUL, ci_a6, a6, r6i, r6v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, &acci, &accv)
        self._e2(OP_MUL, ci_a8, a8, r8i, r8v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, &acci, &accv)
        self._e2(OP_MUL, ci_a10, a10, r10i, r10v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, oi, ov)

    cdef void _slope_nodes(self, double c, double k, double a4, double a6,
                           double a8, double a10,
                           Py_ssize_t ci_c, Py_ssize_t ci_k, Py_ssize_t ci_a4,
                           Py_ssize_t ci_a6, Py_ssize_t ci_a8, Py_ssize_t ci_a10,
                           Py_ssize_t r2i, double r2v,
                           Py_ssize_t *oi, double *ov) noexcept nogil:
        """Mirror of optics.slope_expr."""
        cdef Py_ssize_t cci, wi, ui, sqi, deni, numi
        cdef Py_ssize_t r4i, r6i, r8i, t1i, t2i, acci
        cdef double ccv, wv, uv, sqv, denv, numv
        cdef double r4v, r6v, r8v, t1v, t2v, accv
        self._e2(OP_MUL, ci_c, c, ci_c, c, &cci, &ccv)
        self._e2(OP_ADD, -1, 1.0, ci_k, k, &t1i, &t1v)
        self._e2(OP_MUL, t1i, t1v, cci, ccv, &wi, &wv)
        self._e2(OP_MUL, wi, wv, r2i, r2v, &ui, &uv)
        self._e2(OP_SUB, -1, 1.0, ui, uv, &t1i, &t1v)
        self._e1(OP_SQRT, t1i, t1v, &sqi, &sqv)
        self._e2(OP_ADD, -1, 1.0, sqi, sqv, &deni, &denv)
        self._e2(OP_MUL, ci_c, c, r2i, r2v, &numi, &numv)
        self._e2(OP_MUL, r2i, r2v, r2i, r2v, &r4i, &r4v)
        self._e2(OP_MUL, r4i, r4v, r2i, r2v, &r6i, &r6v)
        self._e2(OP_MUL, r6i, r6v, r2i, r2v, &r8i, &r8v)
        # c/den
        self._e2(OP_DIV, ci_c, c, deni, denv, &acci, &accv)
        # num*w / ((2 s)(den den))
        self._e2(OP_MUL, numi, numv, wi, wv, &t1i, &t1v)
        self._e2(OP_MUL, -1, 2.0, sqi, sqv, &t2i, &t2v)
        self._e2(OP_MUL, deni, denv, deni, denv, &ui, &uv)
        self._e2(OP_MUL, t2i, t2v, ui, uv, &t2i, &t2v)
        self._e2(OP_DIV, t1i, t1v, t2i, t2v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, &acci, &accv)
        # polynomial terms
        self._e2(OP_MUL, -1, 2.0, ci_a4, a4, &t1i, &t1v)
        self._e2(OP_MUL, t1i, t1v, r2i, r2v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, &acci, &accv)
        self._e2(OP_MUL, -1, 3.0, ci_a6, a6, &t1i, &t1v)
        self._e2(OP_MUL, t1i, t1v, r4i, r4v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, &acci, &accv)
        self._e2(OP_MUL, -1, 4.0, ci_a8, a8, &t1i, &t1v)
        self._e2(OP_MUL, t1i, t1v, r6i, r6v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, &acci, &accv)
        self._e2(OP_MUL, -1, 5.0, ci_a10, a10, &t1i, &t1v)
        self._e2(OP_MUL, t1i, t1v, r8i, r8v, &t1i, &t1v)
        self._e2(OP_ADD, acci, accv, t1i, t1v, oi, ov)

    cdef bint _newton(self, double c, double k, double a4, double a6,
                      double a8, double a10, double vz,
                      double ox, double oy, double oz,
                      double dx, double dy, double dz,
                      double *t_out, double *fp_out) noexcept nogil:
        """Mirror of raytrace._newton_values."""
        cdef double t, x, y, z, r2, sag, slope, f, fp
        cdef bint converged = False
        cdef int it
        if dz <= 0.0:
            return False
        t = (vz - oz) / dz
        x = y = r2 = 0.0
        for it in range(32):
            x = ox + dx * t
            y = oy + dy * t
            z = oz + dz * t
            r2 = x * x + y * y
            if not self._sag_slope_val(c, k, a4, a6, a8, a10, r2, &sag, &slope):
                return False
            f = z - vz - sag
            if fabs(f) < 1e-9:
                converged = True
                break
            fp = dz - slope * (2.0 * (x * dx + y * dy))
            if fp == 0.0:
                return False
            t = t - f / fp
        if not converged or t < 0.0:
            return False
        if not self._sag_slope_val(c, k, a4, a6, a8, a10, r2, &sag, &slope):
            return False
        fp = dz - slope * (2.0 * (x * dx + y * dy))
        if fp == 0.0:
            return False
        t_out[0] = t
        fp_out[0] = fp
        return True

    cdef bint _sag_slope_val(self, double c, double k, double a4, double a6,
                             double a8, double a10, double r2,
                             double *sag, double *slope) noexcept nogil:
        """Mirror of raytrace._sag_slope_val."""
        cdef double cc = c * c
        cdef double w = (1.0 + k) * cc
        cdef double u = w * r2
        if u >= 1.0:
            return False
        cdef double s = c_sqrt(1.0 - u)
        cdef double den = 1.0 + s
        cdef double num = c * r2
        cdef double base = num / den
        cdef double r4 = r2 * r2
        cdef double r6 = r4 * r2
        cdef double r8 = r6 * r2
        cdef double r10 = r8 * r2
        sag[0] = base + a4 * r4 + a6 * r6 + a8 * r8 + a10 * r10
        slope[0] = (c / den
                    + num * w / ((2.0 * s) * (den * den))
                    + (2.0 * a4) * r2
                    + (3.0 * a6) * r4
                    + (4.0 * a8) * r6
                    + (5.0 * a10) * r8)
        return True

    def penalty_mean(self,
                     cnp.ndarray[cnp.int32_t, ndim=1] idx_arr,
                     cnp.ndarray[cnp.float64_t, ndim=1] val_arr,
                     double threshold):
        """Mirror of the Variable-level incidence penalty reduction."""
        cdef Py_ssize_t m = idx_arr.shape[0]
        if m == 0:
            raise ValueError("penalty_mean needs at least one event")
        self.ensure_capacity(3 * m + 4, m)
        cdef cnp.int32_t[:] ei = idx_arr
        cdef double[:] ev = val_arr
        cdef cnp.ndarray[cnp.int32_t, ndim=1] term_i = np.empty(m, dtype=np.int32)
        cdef cnp.ndarray[cnp.float64_t, ndim=1] term_v = np.empty(m, dtype=np.float64)
        cdef cnp.int32_t[:] ti = term_i
        cdef double[:] tvv = term_v
        cdef Py_ssize_t j, di, ri, qi, outi
        cdef double dv, rv, qv, outv
        cdef double const_total = 0.0
        cdef Py_ssize_t n_nodes_ = 0
        with nogil:
            for j in range(m):
                self._e2(OP_SUB, -1, threshold, ei[j], ev[j], &di, &dv)
                self._e1(OP_RELU, di, dv, &ri, &rv)
                self._e2(OP_MUL, ri, rv, ri, rv, &qi, &qv)
                if qi >= 0:
                    ti[n_nodes_] = <cnp.int32_t> qi
                    tvv[n_nodes_] = qv
                    n_nodes_ += 1
                else:
                    const_total += qv
        cdef Py_ssize_t sumi
        cdef double sumv
        if n_nodes_ == 0:
            return -1, const_total / <double> m
        if n_nodes_ == 1:
            sumi = ti[0]
            sumv = tvv[0]
        else:
            sumi = self._push_sum_raw(<cnp.int32_t *> cnp.PyArray_DATA(term_i),
                                      <double *> cnp.PyArray_DATA(term_v), n_nodes_)
            sumv = self.vals[sumi]
        if const_total != 0.0:
            self._e2(OP_ADD, sumi, sumv, -1, const_total, &sumi, &sumv)
        self._e2(OP_DIV, sumi, sumv, -1, <double> m, &sumi, &sumv)
        return sumi, sumv

    def spot_rms(self,
                 cnp.ndarray[cnp.int32_t, ndim=1] x_idx,
                 cnp.ndarray[cnp.float64_t, ndim=1] x_val,
                 cnp.ndarray[cnp.int32_t, ndim=1] y_idx,
                 cnp.ndarray[cnp.float64_t, ndim=1] y_val):
        """Mirror of the Variable-level differentiable RMS spot radius."""
        cdef Py_ssize_t m = x_idx.shape[0]
        if m == 0:
            raise ValueError("spot_rms needs at least one hit")
        self.ensure_capacity(5 * m + 16, 3 * m)
        cdef Py_ssize_t sxi, syi, cxi, cyi
        cdef double sxv, syv, cxv, cyv
        self._mixed_sum(x_idx, x_val, &sxi, &sxv)
        self._mixed_sum(y_idx, y_val, &syi, &syv)
        self._e2(OP_DIV, sxi, sxv, -1, <double> m, &cxi, &cxv)
        self._e2(OP_DIV, syi, syv, -1, <double> m, &cyi, &cyv)
        cdef cnp.ndarray[cnp.int32_t, ndim=1] d2_i = np.empty(m, dtype=np.int32)
        cdef cnp.ndarray[cnp.float64_t, ndim=1] d2_v = np.empty(m, dtype=np.float64)
        cdef cnp.int32_t[:] d2i = d2_i
        cdef double[:] d2v = d2_v
        cdef cnp.int32_t[:] xi = x_idx
        cdef double[:] xv = x_val
        cdef cnp.int32_t[:] yi = y_idx
        cdef double[:] yv = y_val
        cdef Py_ssize_t j, dxi, dyi, m1i, m2i, si
        cdef double dxv, dyv, m1v, m2v, sv
        cdef Py_ssize_t n_nodes_ = 0
        cdef double const_total = 0.0
        with nogil:
            for j in range(m):
                self._e2(OP_SUB, xi[j], xv[j], cxi, cxv, &dxi, &dxv)
                self._e2(OP_SUB, yi[j], yv[j], cyi, cyv, &dyi, &dyv)
                self._e2(OP_MUL, dxi, dxv, dxi, dxv, &m1i, &m1v)
                self._e2(OP_MUL, dyi, dyv, dyi, dyv, &m2i, &m2v)
                self._e2(OP_ADD, m1i, m1v, m2i, m2v, &si, &sv)
                if si >= 0:
                    d2i[n_nodes_] = <cnp.int32_t> si
                    d2v[n_nodes_] = sv
                    n_nodes_ += 1
                else:
                    const_total += sv
        cdef Py_ssize_t s2i, msi, rmsi
        cdef double s2v, msv, rmsv
        if n_nodes_ == 0:
            s2i = -1
            s2v = const_total
        else:
            if n_nodes_ == 1:
                s2i = d2i[0]
                s2v = d2v[0]
            else:
                s2i = self._push_sum_raw(<cnp.int32_t *> cnp.PyArray_DATA(d2_i),
                                         <double *> cnp.PyArray_DATA(d2_v), n_nodes_)
                s2v = self.vals[s2i]
            if const_total != 0.0:
                self._e2(OP_ADD, s2i, s2v, -1, const_total, &s2i, &s2v)
        self._e2(OP_DIV, s2i, s2v, -1, <double> m, &msi, &msv)
        self._e1(OP_SQRT, msi, msv, &rmsi, &rmsv)
        return rmsi, rmsv

    cdef void _mixed_sum(self, cnp.ndarray idx_arr, cnp.ndarray val_arr,
                         Py_ssize_t *oi, double *ov):
        """Mirror of autodiff.sum_vars over (idx, value) pairs."""
        cdef Py_ssize_t m = idx_arr.shape[0]
        cdef cnp.int32_t *ia = <cnp.int32_t *> cnp.PyArray_DATA(idx_arr)
        cdef double *va = <double *> cnp.PyArray_DATA(val_arr)
        cdef cnp.ndarray[cnp.int32_t, ndim=1] node_i = np.empty(m, dtype=np.int32)
        cdef cnp.ndarray[cnp.float64_t, ndim=1] node_v = np.empty(m, dtype=np.float64)
        cdef cnp.int32_t *ni = <cnp.int32_t *> cnp.PyArray_DATA(node_i)
        cdef double *nv = <double *> cnp.PyArray_DATA(node_v)
        cdef Py_ssize_t j, n_nodes_ = 0
        cdef double const_total = 0.0
        for j in range(m):
            if ia[j] >= 0:
                ni[n_nodes_] = ia[j]
                nv[n_nodes_] = va[j]
                n_nodes_ += 1
            else:
                const_total += va[j]
        cdef Py_ssize_t si
        cdef double sv
        if n_nodes_ == 0:
            oi[0] = -1
            ov[0] = const_total
            return
        if n_nodes_ == 1:
            si = ni[0]
            sv = nv[0]
        else:
            si = self._push_sum_raw(ni, nv, n_nodes_)
            sv = self.vals[si]
        if const_total != 0.0:
            self._e2(OP_ADD, si, sv, -1, const_total, &si, &sv)
        oi[0] = si
        ov[0] = sv
