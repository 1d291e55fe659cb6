"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records primitive applications during one forward pass
and replays them in reverse to accumulate gradients for its registered
parameter leaves.  Complex quantities never appear as complex dtype on
the tape: they travel as separate real/imaginary arrays, and the complex
primitives (``hdot``, ``norm2``, ``gram``, ``hpd_solve``) consume and
produce split pairs.  The Hermitian solve carries a custom adjoint that
reuses the forward Cholesky factorization instead of differentiating it
element by element.

Constructed with ``record=False`` a tape computes identical forward
values (same code paths) but stores nothing and cannot run backward;
that is the evaluation mode used for inference.
"""

import numpy as np

from .complexops import cholesky_batched, cholesky_solve_batched

_LN2 = np.log(2.0)


class Var:
    """A value living on a tape.  ``value`` is a float64 ndarray."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None


class _Node:
    __slots__ = ("inputs", "outputs", "backward", "saved", "op")

    def __init__(self, inputs, outputs, backward, saved=None, op=""):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward
        self.saved = saved or {}
        self.op = op


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Ordered record of primitive applications, one backward per forward."""

    def __init__(self, record=True):
        self.record = record
        self._nodes = []
        self._params = {}
        self._consumed = False

    # -- leaves -------------------------------------------------------

    def param(self, value, name):
        """Register a differentiable parameter leaf under ``name``."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Var(value)
        self._params[name] = v
        return v

    # -- plumbing -----------------------------------------------------

    def _push(self, inputs, outputs, backward, saved=None, op=""):
        self._nodes.append(
            _Node(
                tuple(i if isinstance(i, Var) else None for i in inputs),
                outputs,
                backward,
                saved,
                op,
            )
        )

    @property
    def nodes(self):
        return self._nodes

    def record_op(self, primitive, *args, **kwargs):
        """Apply a primitive by name (the registered set only)."""
        fn = _PRIMITIVES.get(primitive)
        if fn is None:
            raise ValueError(f"unknown primitive {primitive!r}")
        return fn(self, *args, **kwargs)

    def backward(self, loss):
        """Accumulate d(loss)/d(param) for every registered parameter.

        ``loss`` must be a scalar Var produced on this tape.  The tape is
        consumed: a second backward raises.
        """
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if not isinstance(loss, Var) or loss.value.size != 1:
            raise ValueError("loss must be a scalar Var")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            grads = [o.grad for o in node.outputs]
            if all(g is None for g in grads):
                continue
            grads = tuple(
                g if g is not None else np.zeros_like(o.value)
                for g, o in zip(grads, node.outputs)
            )
            in_grads = node.backward(grads)
            for var, g in zip(node.inputs, in_grads):
                if var is None or g is None:
                    continue
                var.grad = g if var.grad is None else var.grad + g
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in self._params.items()
        }

    # -- elementwise and shape primitives -------------------------------

    def add(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av + bv)
        if self.record:
            ash, bsh = av.shape, bv.shape

            def bwd(g):
                (gy,) = g
                return _unbroadcast(gy, ash), _unbroadcast(gy, bsh)

            self._push((a, b), (out,), bwd)
        return out

    def sub(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av - bv)
        if self.record:
            ash, bsh = av.shape, bv.shape

            def bwd(g):
                (gy,) = g
                return _unbroadcast(gy, ash), _unbroadcast(-gy, bsh)

            self._push((a, b), (out,), bwd)
        return out

    def neg(self, a):
        out = Var(-_val(a))
        if self.record:
            self._push((a,), (out,), lambda g: (-g[0],))
        return out

    def mul(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av * bv)
        if self.record:

            def bwd(g):
                (gy,) = g
                return _unbroadcast(gy * bv, av.shape), _unbroadcast(gy * av, bv.shape)

            self._push((a, b), (out,), bwd)
        return out

    def div(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av / bv)
        if self.record:

            def bwd(g):
                (gy,) = g
                ga = _unbroadcast(gy / bv, av.shape)
                gb = _unbroadcast(-gy * av / (bv * bv), bv.shape)
                return ga, gb

            self._push((a, b), (out,), bwd)
        return out

    def square(self, a):
        av = _val(a)
        out = Var(av * av)
        if self.record:
            self._push((a,), (out,), lambda g: (2.0 * av * g[0],))
        return out

    def sqrt(self, a):
        av = _val(a)
        out = Var(np.sqrt(av))
        if self.record:
            ov = out.value
            self._push((a,), (out,), lambda g: (g[0] * 0.5 / ov,))
        return out

    def log2(self, a):
        av = _val(a)
        out = Var(np.log2(av))
        if self.record:
            self._push((a,), (out,), lambda g: (g[0] / (av * _LN2),))
        return out

    def sum(self, a, axis=None, keepdims=False):
        av = _val(a)
        out = Var(np.sum(av, axis=axis, keepdims=keepdims))
        if self.record:

            def bwd(g):
                (gy,) = g
                if axis is not None and not keepdims:
                    gy = np.expand_dims(gy, axis)
                return (np.broadcast_to(gy, av.shape).copy(),)

            self._push((a,), (out,), bwd)
        return out

    def mean(self, a, axis=None):
        av = _val(a)
        n = av.size if axis is None else av.shape[axis]
        out = Var(np.mean(av, axis=axis))
        if self.record:

            def bwd(g):
                (gy,) = g
                if axis is not None:
                    gy = np.expand_dims(gy, axis)
                return (np.broadcast_to(gy / n, av.shape).copy(),)

            self._push((a,), (out,), bwd)
        return out

    def reshape(self, a, shape):
        av = _val(a)
        out = Var(av.reshape(shape))
        if self.record:
            self._push((a,), (out,), lambda g: (g[0].reshape(av.shape),))
        return out

    def concat(self, parts, axis=-1):
        vals = [_val(p) for p in parts]
        out = Var(np.concatenate(vals, axis=axis))
        if self.record:
            sizes = [v.shape[axis] for v in vals]
            splits = np.cumsum(sizes)[:-1]

            def bwd(g):
                return tuple(np.split(g[0], splits, axis=axis))

            self._push(tuple(parts), (out,), bwd)
        return out

    def getitem(self, a, key):
        """Basic (slice/int) indexing; advanced indexing is unsupported."""
        av = _val(a)
        out = Var(av[key])
        if self.record:

            def bwd(g):
                ga = np.zeros_like(av)
                ga[key] = g[0]
                return (ga,)

            self._push((a,), (out,), bwd)
        return out

    # -- network primitives ---------------------------------------------

    def affine(self, x, w, b):
        """y = x W^T + b for a batch of row vectors."""
        xv, wv, bv = _val(x), _val(w), _val(b)
        if xv.shape[-1] != wv.shape[1]:
            raise ValueError(f"affine shape mismatch: x {xv.shape} vs W {wv.shape}")
        out = Var(xv @ wv.T + bv)
        if self.record:

            def bwd(g):
                (gy,) = g
                return gy @ wv, gy.T @ xv, gy.sum(axis=0)

            self._push((x, w, b), (out,), bwd)
        return out

    def relu(self, a):
        av = _val(a)
        out = Var(np.maximum(av, 0.0))
        if self.record:
            mask = av > 0.0  # subgradient at 0 is 0

            def bwd(g):
                return (g[0] * mask,)

            self._push((a,), (out,), bwd, saved={"input": av}, op="relu")
        return out

    def batchnorm(self, x, gain, shift, eps):
        """Training-mode batch normalization over axis 0.

        Returns ``(y, batch_mean, batch_var)``; the statistics are plain
        arrays (biased variance) for the caller's running-stat update,
        which happens outside the tape.
        """
        xv, gv, sv = _val(x), _val(gain), _val(shift)
        if xv.ndim != 2 or xv.shape[0] < 2:
            raise ValueError("batchnorm needs a (B, N) batch with B >= 2")
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        out = Var(gv * xhat + sv)
        if self.record:
            nb = xv.shape[0]

            def bwd(g):
                (gy,) = g
                dgain = (gy * xhat).sum(axis=0)
                dshift = gy.sum(axis=0)
                dxhat = gy * gv
                dx = (inv / nb) * (
                    nb * dxhat
                    - dxhat.sum(axis=0)
                    - xhat * (dxhat * xhat).sum(axis=0)
                )
                return dx, dgain, dshift

            self._push((x, gain, shift), (out,), bwd)
        return out, mu, var

    def scaled_softmax(self, z, p):
        """Row-wise softmax scaled to sum to the power budget p (> 0)."""
        zv = _val(z)
        pv = np.asarray(p, dtype=np.float64)
        if pv.ndim == 1:
            pv = pv[:, None]
        e = np.exp(zv - zv.max(axis=-1, keepdims=True))
        y = pv * (e / e.sum(axis=-1, keepdims=True))
        out = Var(y)
        if self.record:

            def bwd(g):
                (gy,) = g
                dot = (gy * y).sum(axis=-1, keepdims=True)
                return (y * (gy - dot / pv),)

            self._push((z,), (out,), bwd)
        return out

    # -- complex primitives (split re/im) ---------------------------------

    def hdot(self, ar, ai, br, bi):
        """a^H b contracted over the last axis; broadcasts leading axes."""
        arv, aiv, brv, biv = _val(ar), _val(ai), _val(br), _val(bi)
        sr = np.sum(arv * brv + aiv * biv, axis=-1)
        si = np.sum(arv * biv - aiv * brv, axis=-1)
        out_r, out_i = Var(sr), Var(si)
        if self.record:

            def bwd(g):
                gr = g[0][..., None]
                gi = g[1][..., None]
                gar = _unbroadcast(gr * brv + gi * biv, arv.shape)
                gai = _unbroadcast(gr * biv - gi * brv, aiv.shape)
                gbr = _unbroadcast(gr * arv - gi * aiv, brv.shape)
                gbi = _unbroadcast(gr * aiv + gi * arv, biv.shape)
                return gar, gai, gbr, gbi

            self._push((ar, ai, br, bi), (out_r, out_i), bwd)
        return out_r, out_i

    def norm2(self, ar, ai):
        arv, aiv = _val(ar), _val(ai)
        out = Var(np.sum(arv * arv + aiv * aiv, axis=-1))
        if self.record:

            def bwd(g):
                gy = g[0][..., None]
                return 2.0 * arv * gy, 2.0 * aiv * gy

            self._push((ar, ai), (out,), bwd)
        return out

    def gram(self, q, hr, hi, sigma2):
        """Split Gram matrix sigma2*I + sum_k q_k h_k h_k^H per batch entry.

        Only ``q`` may be differentiated; the channel arrays are data.
        """
        if isinstance(hr, Var) or isinstance(hi, Var):
            raise ValueError("gram does not differentiate the channel arguments")
        qv = _val(q)
        hrv = np.asarray(hr, dtype=np.float64)
        hiv = np.asarray(hi, dtype=np.float64)
        if np.any(qv < 0):
            raise ValueError("gram weights must be nonnegative")
        rr = np.einsum("...k,...km,...kn->...mn", qv, hrv, hrv)
        rr += np.einsum("...k,...km,...kn->...mn", qv, hiv, hiv)
        ri = np.einsum("...k,...km,...kn->...mn", qv, hiv, hrv)
        ri -= np.einsum("...k,...km,...kn->...mn", qv, hrv, hiv)
        m = hrv.shape[-1]
        idx = np.arange(m)
        rr[..., idx, idx] += sigma2
        out_r, out_i = Var(rr), Var(ri)
        if self.record:

            def bwd(g):
                gar, gai = g
                gq = np.einsum("...mn,...km,...kn->...k", gar, hrv, hrv)
                gq += np.einsum("...mn,...km,...kn->...k", gar, hiv, hiv)
                gq += np.einsum("...mn,...km,...kn->...k", gai, hiv, hrv)
                gq -= np.einsum("...mn,...km,...kn->...k", gai, hrv, hiv)
                return (gq,)

            self._push((q,), (out_r, out_i), bwd)
        return out_r, out_i

    def hpd_solve(self, ar, ai, br, bi):
        """Solve A x = b for a batch of HPD matrices and K stacked RHS.

        A is (B, M, M) split, b is (B, K, M) split; x matches b.  The
        forward Cholesky factor is saved on the node and reused by the
        adjoint: b_bar = A^{-1} x_bar and A_bar = -(b_bar x^H),
        Hermitian-symmetrized.
        """
        arv, aiv = _val(ar), _val(ai)
        brv, biv = _val(br), _val(bi)
        chol = cholesky_batched(arv, aiv)
        rhs = (brv + 1j * biv).transpose(0, 2, 1)
        xc = cholesky_solve_batched(chol, rhs).transpose(0, 2, 1)
        out_r, out_i = Var(np.ascontiguousarray(xc.real)), Var(
            np.ascontiguousarray(xc.imag)
        )
        saved = {"chol": chol, "x": xc}
        if self.record:

            def bwd(g):
                gxr, gxi = g
                xbar = (gxr + 1j * gxi).transpose(0, 2, 1)
                bbar = cholesky_solve_batched(chol, xbar).transpose(0, 2, 1)
                abar = -np.einsum("bkm,bkn->bmn", bbar, np.conj(xc))
                abar = 0.5 * (abar + np.conj(abar.transpose(0, 2, 1)))
                gbr = bbar.real if isinstance(br, Var) else None
                gbi = bbar.imag if isinstance(bi, Var) else None
                return (
                    np.ascontiguousarray(abar.real),
                    np.ascontiguousarray(abar.imag),
                    gbr,
                    gbi,
                )

            self._push((ar, ai, br, bi), (out_r, out_i), bwd, saved)
        return out_r, out_i


_PRIMITIVES = {
    "add": Tape.add,
    "sub": Tape.sub,
    "neg": Tape.neg,
    "mul": Tape.mul,
    "div": Tape.div,
    "square": Tape.square,
    "sqrt": Tape.sqrt,
    "log2": Tape.log2,
    "sum": Tape.sum,
    "mean": Tape.mean,
    "reshape": Tape.reshape,
    "concat": Tape.concat,
    "getitem": Tape.getitem,
    "affine": Tape.affine,
    "relu": Tape.relu,
    "batchnorm": Tape.batchnorm,
    "scaled_softmax": Tape.scaled_softmax,
    "hdot": Tape.hdot,
    "norm2": Tape.norm2,
    "gram": Tape.gram,
    "hpd_solve": Tape.hpd_solve,
}


def finite_diff_grad(f, params, step=1e-6):
    """Central-difference gradient of ``f(params)`` per coordinate.

    ``params`` maps names to arrays; ``f`` must return a finite float.
    This is the independent oracle the taped backward pass is checked
    against, so it never touches the tape machinery.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    grads = {}
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(work))
            flat[i] = orig - step
            fm = float(f(work))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(f"non-finite objective while perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads
