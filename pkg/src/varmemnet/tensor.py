"""Dense float64 arrays on a reverse-mode differentiation tape.

The op set is deliberately small: exactly what the memory-network forward
pass and the divergence terms of the training objective need. Every op
checks its output for NaN/Inf (a detected fault, raised as NumericError)
and stores double precision only.

A Tape is single-owner while the graph is being built. ``Tape(record=False)``
runs the same ops without recording, for cheap inference-time evaluation.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError

__all__ = ["Tensor", "Tape", "finite_diff_check"]


class Tensor:
    """A value on the tape: float64 ndarray plus its node index."""

    __slots__ = ("data", "idx")

    def __init__(self, data, idx):
        self.data = data
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, idx={self.idx})"


class _Rec:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0 or a.flags.c_contiguous:
        return a
    return np.ascontiguousarray(a)


class Tape:
    def __init__(self, record=True):
        self.record = record
        self.nodes = []
        self.params = {}

    # ------------------------------------------------------------- leaves

    def const(self, value):
        return self._emit(_as_f64(value), "const", (), None)

    def param(self, name, value):
        """Register a trainable leaf. The array is referenced, not copied."""
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        if not self.record:
            raise ValueError("parameters require a recording tape")
        value = _as_f64(value)
        node = self._emit(value, "param", (), None)
        self.params[name] = node
        return node

    def _emit(self, value, op, inputs, backward):
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite values produced by op {op!r}")
        if self.record:
            node = Tensor(value, len(self.nodes))
            self.nodes.append(_Rec(op, inputs, backward))
        else:
            node = Tensor(value, -1)
        return node

    # ------------------------------------------------------- arithmetic

    def add(self, a, b):
        out = a.data + b.data

        def bw(g, acc):
            acc(a, _unbroadcast(g, a.data.shape))
            acc(b, _unbroadcast(g, b.data.shape))

        return self._emit(out, "add", (a, b), bw)

    def sub(self, a, b):
        out = a.data - b.data

        def bw(g, acc):
            acc(a, _unbroadcast(g, a.data.shape))
            acc(b, _unbroadcast(-g, b.data.shape))

        return self._emit(out, "sub", (a, b), bw)

    def elem_mul(self, a, b):
        out = a.data * b.data

        def bw(g, acc):
            acc(a, _unbroadcast(g * b.data, a.data.shape))
            acc(b, _unbroadcast(g * a.data, b.data.shape))

        return self._emit(out, "elem_mul", (a, b), bw)

    def scale(self, a, c):
        c = float(c)
        out = a.data * c

        def bw(g, acc):
            acc(a, g * c)

        return self._emit(out, "scale", (a,), bw)

    def add_const(self, a, c):
        out = a.data + float(c)

        def bw(g, acc):
            acc(a, g)

        return self._emit(out, "add_const", (a,), bw)

    def matmul(self, a, b):
        """2-d @ 2-d, 2-d @ 1-d, or 1-d @ 2-d product."""
        ad, bd = a.data, b.data
        if ad.ndim + bd.ndim < 3:
            raise ValueError("matmul needs at least one 2-d operand")
        out = ad @ bd

        def bw(g, acc):
            if ad.ndim == 2 and bd.ndim == 2:
                acc(a, g @ bd.T)
                acc(b, ad.T @ g)
            elif ad.ndim == 2 and bd.ndim == 1:
                acc(a, np.outer(g, bd))
                acc(b, ad.T @ g)
            else:  # 1-d @ 2-d
                acc(a, bd @ g)
                acc(b, np.outer(ad, g))

        return self._emit(out, "matmul", (a, b), bw)

    def total(self, a):
        """Sum of all entries, as a 0-d tensor."""
        out = np.asarray(a.data.sum())

        def bw(g, acc):
            acc(a, np.broadcast_to(g, a.data.shape).copy())

        return self._emit(out, "total", (a,), bw)

    def add_n(self, terms):
        """Sum of same-shaped tensors in one node."""
        out = terms[0].data.copy()
        for t in terms[1:]:
            out += t.data

        def bw(g, acc):
            for t in terms:
                acc(t, g)

        return self._emit(out, "add_n", tuple(terms), bw)

    # ----------------------------------------------------- nonlinearities

    def softmax(self, z, n_valid=None):
        """Max-shifted softmax over a vector; positions >= n_valid get zero mass."""
        zd = z.data
        if zd.ndim != 1:
            raise ValueError("softmax expects a vector")
        n = zd.shape[0] if n_valid is None else int(n_valid)
        if n < 1:
            raise ValueError("softmax needs at least one valid entry")
        zz = zd[:n]
        e = np.exp(zz - zz.max())
        p = np.zeros_like(zd)
        p[:n] = e / e.sum()

        def bw(g, acc):
            inner = float(np.dot(g, p))
            acc(z, p * (g - inner))

        return self._emit(p, "softmax", (z,), bw)

    def nll(self, probs, target):
        """-log probs[target], with the probability clamped at 1e-12 below."""
        target = int(target)
        if target < 0 or target >= probs.data.shape[0]:
            raise ValueError(f"target {target} out of range")
        pt = probs.data[target]
        clamped = max(pt, 1e-12)
        out = np.asarray(-math.log(clamped))

        def bw(g, acc):
            gp = np.zeros_like(probs.data)
            if pt > 1e-12:
                gp[target] = -float(g) / pt
            acc(probs, gp)

        return self._emit(out, "nll", (probs,), bw)

    def log(self, a):
        if np.any(a.data <= 0.0):
            raise NumericError("log of non-positive value")
        out = np.log(a.data)

        def bw(g, acc):
            acc(a, g / a.data)

        return self._emit(out, "log", (a,), bw)

    def exp(self, a):
        with np.errstate(over="ignore"):
            out = np.exp(a.data)

        def bw(g, acc):
            acc(a, g * out)

        return self._emit(out, "exp", (a,), bw)

    def sqrt(self, a):
        if np.any(a.data < 0.0):
            raise NumericError("sqrt of negative value")
        out = np.sqrt(a.data)

        def bw(g, acc):
            acc(a, g * 0.5 / out)

        return self._emit(out, "sqrt", (a,), bw)

    def reciprocal(self, a):
        if np.any(a.data == 0.0):
            raise NumericError("reciprocal of zero")
        out = 1.0 / a.data

        def bw(g, acc):
            acc(a, -g * out * out)

        return self._emit(out, "reciprocal", (a,), bw)

    def softplus(self, a):
        ad = a.data
        out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))

        def bw(g, acc):
            acc(a, g / (1.0 + np.exp(-ad)))

        return self._emit(out, "softplus", (a,), bw)

    def lgamma(self, a):
        from .tmath import digamma, log_gamma

        if np.any(a.data <= 0.0):
            raise NumericError("lgamma of non-positive value")
        out = np.asarray(log_gamma(a.data))

        def bw(g, acc):
            acc(a, g * np.asarray(digamma(a.data)))

        return self._emit(out, "lgamma", (a,), bw)

    def power(self, a, b):
        """a ** b with a > 0; the exponent may be a float or a scalar tensor."""
        if np.any(a.data <= 0.0):
            raise NumericError("power with non-positive base")
        if isinstance(b, Tensor):
            out = a.data ** b.data

            def bw(g, acc):
                acc(a, g * b.data * a.data ** (b.data - 1.0))
                acc(b, _unbroadcast(g * out * np.log(a.data), b.data.shape))

            return self._emit(out, "power", (a, b), bw)
        c = float(b)
        out = a.data**c

        def bwc(g, acc):
            acc(a, g * c * a.data ** (c - 1.0))

        return self._emit(out, "power", (a,), bwc)

    def embedding_bag(self, weights, ids, pos_weights):
        """Position-weighted bag of embedding rows per sentence.

        out[i] = sum_j pos_weights[j] * weights[ids[i, j]], skipping the nil
        id 0, which therefore contributes a zero embedding and receives no
        gradient.
        """
        ids = np.asarray(ids)
        pw = _as_f64(pos_weights)
        if ids.ndim != 2 or pw.ndim != 2 or pw.shape[0] != ids.shape[1]:
            raise ValueError("ids must be (M, J) and pos_weights (J, d)")
        if ids.min() < 0 or ids.max() >= weights.data.shape[0]:
            raise ValueError("token id out of range")
        emb = weights.data[ids]  # (M, J, d)
        nil = ids == 0
        if nil.any():
            emb = emb.copy()
            emb[nil] = 0.0
        out = np.einsum("jd,mjd->md", pw, emb)

        def bw(g, acc):
            contrib = g[:, None, :] * pw[None, :, :]
            if nil.any():
                contrib = contrib.copy()
                contrib[nil] = 0.0
            gw = np.zeros_like(weights.data)
            np.add.at(gw, ids.reshape(-1), contrib.reshape(-1, pw.shape[1]))
            acc(weights, gw)

        return self._emit(out, "embedding_bag", (weights,), bw)

    # ----------------------------------------------------------- backward

    def backward(self, loss):
        """Accumulated d loss / d param for every registered parameter.

        Visits nodes in reverse insertion order exactly once; deterministic
        for a given tape.
        """
        if not self.record:
            raise ValueError("cannot backprop through a non-recording tape")
        if loss.data.ndim != 0:
            raise ValueError("loss must be a scalar node")
        grads = [None] * len(self.nodes)
        grads[loss.idx] = np.ones(())

        def acc(node, contribution):
            if grads[node.idx] is None:
                grads[node.idx] = np.array(contribution, dtype=np.float64, copy=True)
            else:
                grads[node.idx] += contribution

        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            rec = self.nodes[i]
            if rec.backward is not None:
                rec.backward(g, acc)
        return {
            name: (
                grads[node.idx]
                if grads[node.idx] is not None
                else np.zeros_like(node.data)
            )
            for name, node in self.params.items()
        }


def _unbroadcast(g, shape):
    """Reduce a gradient back to the pre-broadcast shape.

    Supports the cases the ops allow: identical shapes, scalar against
    anything, and a vector against matrix rows.
    """
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    # row-vector broadcast over a matrix
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def finite_diff_check(f, params, grads, h=1e-5, denom_floor=1e-6):
    """Max relative error between analytic gradients and central differences.

    ``f`` maps a dict of parameter arrays to a float and must be pure;
    ``grads`` are the analytic gradients to verify, keyed like ``params``.
    """
    work = {name: np.array(v, dtype=np.float64, copy=True) for name, v in params.items()}
    worst = 0.0
    for name, value in work.items():
        flat = value.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_hi = f(work)
            flat[i] = orig - h
            f_lo = f(work)
            flat[i] = orig
            fd = (f_hi - f_lo) / (2.0 * h)
            an = gflat[i]
            err = abs(fd - an) / max(abs(fd), abs(an), denom_floor)
            if err > worst:
                worst = err
    return worst
