"""Dense-array substrate with reverse-mode autodiff on a global tape.

Tensors wrap contiguous numpy arrays. Every primitive goes through
``apply_primitive`` (or the thin wrappers below); when gradients are enabled
and an input requires grad, a tape entry is recorded. ``backward`` replays the
tape in reverse and clears it.

Reductions that appear inside causal attention (softmax denominators and
matmul contractions) are computed in fixed 64-wide blocks accumulated left to
right, so that appending exactly-zero terms (masked future positions) cannot
change the floating-point result. This is what makes prefix logits bit-exact
under sequence truncation.
"""

import numpy as np

__all__ = [
    "Tensor", "tensor", "parameter", "set_default_dtype", "default_dtype",
    "apply_primitive", "backward", "grad_check", "no_grad", "tape_size",
    "matmul", "add", "mul", "scale", "softmax", "layernorm", "gelu",
    "embedding_gather", "reshape", "transpose", "concat", "slice_",
    "cross_entropy", "conv2d", "conv2d_transpose", "mse", "l1", "tsum",
    "AdamW",
]

_DEFAULT_DTYPE = np.float64

_KBLOCK = 64  # contraction block width; keep in sync with the docstring above


def set_default_dtype(dtype):
    """Switch between 64-bit (test) and 32-bit (train) tensor construction."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Shaped real array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def tensor(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_TAPE = []          # entries appended in forward (topological) order
_GRAD_ENABLED = True


class _TapeEntry:
    __slots__ = ("inputs", "output", "bwd")

    def __init__(self, inputs, output, bwd):
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class no_grad:
    """Context manager: primitives applied inside record nothing."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def tape_size():
    return len(_TAPE)


def backward(loss):
    """Populate grads of every requires_grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not _TAPE:
        raise RuntimeError("tape is empty: run a forward pass before backward")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(_TAPE):
        g = entry.output.grad
        if g is None:
            continue
        grads = entry.bwd(g)
        for inp, gi in zip(entry.inputs, grads):
            if gi is not None and inp.requires_grad:
                inp._accumulate(gi)
    _TAPE.clear()


# --------------------------------------------------------------------------
# Deterministic blocked reductions
# --------------------------------------------------------------------------

def _blocked_matmul(a, b, row_tile=None):
    """a @ b with the contraction axis summed in fixed 64-blocks, left to right.

    Used on forward paths so that masked-out (exactly zero) contraction terms
    cannot perturb results through BLAS summation-order changes. Backward
    passes use plain matmul: gradients have no truncation-stability contract.

    ``row_tile`` additionally splits the row axis of ``a`` into fixed tiles;
    BLAS may otherwise pick a differently-rounding kernel as the row count
    grows, which would break bit-exact prefix stability under padding.
    """
    if row_tile and a.shape[-2] > row_tile:
        m = a.shape[-2]
        parts = [_blocked_matmul(a[..., m0:m0 + row_tile, :], b)
                 for m0 in range(0, m, row_tile)]
        return np.concatenate(parts, axis=-2)
    k = a.shape[-1]
    if k <= _KBLOCK:
        return a @ b
    out = None
    for k0 in range(0, k, _KBLOCK):
        part = a[..., k0:k0 + _KBLOCK] @ b[..., k0:k0 + _KBLOCK, :]
        out = part if out is None else out + part
    return out


def _blocked_lastaxis_sum(x):
    """Sum over the last axis in fixed 64-blocks, accumulated left to right."""
    n = x.shape[-1]
    out = None
    for k0 in range(0, n, _KBLOCK):
        part = np.sum(x[..., k0:k0 + _KBLOCK], axis=-1)
        out = part if out is None else out + part
    return out


# --------------------------------------------------------------------------
# Primitive registry
# --------------------------------------------------------------------------

def _shape_error(name, msg):
    raise ValueError(f"{name}: {msg}")


def _unbroadcast(g, shape):
    """Sum gradient over leading dims that were broadcast up to g.shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_leading_broadcast(name, sa, sb):
    """Allow only leading-batch-dim expansion: trailing dims must match."""
    k = min(len(sa), len(sb))
    if k and sa[len(sa) - k:] != sb[len(sb) - k:]:
        _shape_error(name, f"shapes {sa} and {sb} differ beyond leading batch dims")


def _matmul_fwd(inputs, attrs):
    a, b = inputs
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2:
        _shape_error("matmul", f"operands must be >=2-D, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        _shape_error("matmul", f"inner dims mismatch: {sa} @ {sb}")
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        _shape_error("matmul", f"batch dims mismatch: {sa} @ {sb}")
    out = _blocked_matmul(a.data, b.data, row_tile=attrs.get("row_tile"))

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if len(sb) == 2 and gb.ndim > 2:
                gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return ga, gb

    return out, bwd


def _add_fwd(inputs, attrs):
    a, b = inputs
    _check_leading_broadcast("add", a.data.shape, b.data.shape)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return out, bwd


def _mul_fwd(inputs, attrs):
    a, b = inputs
    _check_leading_broadcast("mul", a.data.shape, b.data.shape)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return out, bwd


def _scale_fwd(inputs, attrs):
    (a,) = inputs
    c = a.data.dtype.type(attrs["value"])  # keep the input dtype authoritative
    out = a.data * c
    return out, lambda g: (g * c,)


def _softmax_fwd(inputs, attrs):
    (a,) = inputs
    axis = attrs.get("axis", -1)
    x = np.moveaxis(a.data, axis, -1)
    m = np.max(x, axis=-1, keepdims=True)
    # rows that are entirely -inf (fully masked) normalise to zeros, not NaN
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    denom = _blocked_lastaxis_sum(e)[..., None]
    p = e / denom
    out = np.moveaxis(p, -1, axis)

    def bwd(g):
        gp = np.moveaxis(g, axis, -1)
        dot = _blocked_lastaxis_sum(p * gp)[..., None]
        gx = p * (gp - dot)
        return (np.ascontiguousarray(np.moveaxis(gx, -1, axis)),)

    return np.ascontiguousarray(out), bwd


def _layernorm_fwd(inputs, attrs):
    (a,) = inputs
    axis = attrs.get("axis", -1)
    eps = attrs.get("eps", 1e-5)
    x = a.data
    mean = x.mean(axis=axis, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    n = x.shape[axis]

    def bwd(g):
        # d/dx of (x - mean) * inv with mean/var both functions of x
        gm = g.mean(axis=axis, keepdims=True)
        gxc = (g * xc).mean(axis=axis, keepdims=True)
        return ((g - gm - xc * inv * inv * gxc) * inv,)

    return out, bwd


_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu_fwd(inputs, attrs):
    # tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    (a,) = inputs
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        sech2 = 1.0 - th * th
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner),)

    return out, bwd


def _embedding_gather_fwd(inputs, attrs):
    (table,) = inputs
    idx = np.asarray(attrs["indices"])
    if table.data.ndim != 2:
        _shape_error("embedding_gather", f"table must be 2-D, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        _shape_error("embedding_gather",
                     f"index out of range [0, {table.data.shape[0]}): min {idx.min()}, max {idx.max()}")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return out, bwd


def _reshape_fwd(inputs, attrs):
    (a,) = inputs
    shape = tuple(attrs["shape"])
    if int(np.prod(shape, dtype=np.int64)) != a.data.size and -1 not in shape:
        _shape_error("reshape", f"cannot reshape {a.data.shape} to {shape}")
    out = a.data.reshape(shape)
    src = a.data.shape
    return np.ascontiguousarray(out), lambda g: (g.reshape(src),)


def _transpose_fwd(inputs, attrs):
    (a,) = inputs
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(a.data.ndim)):
        _shape_error("transpose", f"axes {axes} invalid for ndim {a.data.ndim}")
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return out, lambda g: (np.ascontiguousarray(np.transpose(g, inv)),)


def _concat_fwd(inputs, attrs):
    axis = attrs.get("axis", 0)
    shapes = [t.data.shape for t in inputs]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis % len(base)):
            _shape_error("concat", f"incompatible shapes {shapes} on axis {axis}")
    out = np.concatenate([t.data for t in inputs], axis=axis)
    sizes = [s[axis] for s in shapes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return out, bwd


def _slice_fwd(inputs, attrs):
    (a,) = inputs
    begin = list(attrs["begin"])
    size = list(attrs["size"])
    if len(begin) != a.data.ndim or len(size) != a.data.ndim:
        _shape_error("slice", f"begin/size rank must match ndim {a.data.ndim}")
    sl = []
    for d, (b, s) in enumerate(zip(begin, size)):
        if b < 0 or s < 0 or b + s > a.data.shape[d]:
            _shape_error("slice", f"window [{b}, {b + s}) exceeds dim {d} of {a.data.shape}")
        sl.append(slice(b, b + s))
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[sl] = g
        return (gx,)

    return out, bwd


def _cross_entropy_fwd(inputs, attrs):
    (logits,) = inputs
    targets = np.asarray(attrs["targets"], dtype=np.int64)
    x = logits.data
    if x.ndim != 2:
        _shape_error("cross_entropy", f"logits must be (N, V), got {x.shape}")
    n, v = x.shape
    if targets.shape != (n,):
        _shape_error("cross_entropy", f"targets shape {targets.shape} != ({n},)")
    ignore = attrs.get("ignore_mask")
    keep = np.ones(n, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        _shape_error("cross_entropy", "every position is ignored; nothing to supervise")
    tclip = np.where(keep, targets, 0)
    if tclip.min() < 0 or tclip.max() >= v:
        _shape_error("cross_entropy", f"target id outside vocab of size {v}")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    logp = (x - m) - np.log(z)
    nll = -logp[np.arange(n), tclip]
    out = np.asarray((nll * keep).sum() / count, dtype=x.dtype)

    def bwd(g):
        p = e / z
        p[np.arange(n), tclip] -= 1.0
        p *= (keep / count)[:, None] * g
        return (p,)

    return out, bwd


def _pad2d(x, pad):
    if pad == 0:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = x
    return out


def _im2col(x, kh, kw, stride):
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                 # (n, ho, wo, c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n, ho, wo, kh * kw * c)


def _col2im(g, xshape, kh, kw, stride):
    n, h, w, c = xshape
    ho, wo = g.shape[1], g.shape[2]
    gc = g.reshape(n, ho, wo, kh, kw, c)
    gx = np.zeros(xshape, dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            gx[:, a:a + ho * stride:stride, b:b + wo * stride:stride, :] += gc[:, :, :, a, b, :]
    return gx


def _conv2d_fwd(inputs, attrs):
    x, w = inputs
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    if x.data.ndim != 4 or w.data.ndim != 4:
        _shape_error("conv2d", f"x must be (N,H,W,Cin), w (kh,kw,Cin,Cout); got {x.data.shape}, {w.data.shape}")
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        _shape_error("conv2d", f"channel mismatch: x has {x.data.shape[3]}, w expects {cin}")
    xp = _pad2d(x.data, pad)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        _shape_error("conv2d", f"kernel {kh}x{kw} larger than padded input {xp.shape[1:3]}")
    cols = _im2col(xp, kh, kw, stride)
    n, ho, wo, _ = cols.shape
    wm = w.data.reshape(kh * kw * cin, cout)
    out = _blocked_matmul(cols.reshape(-1, kh * kw * cin), wm).reshape(n, ho, wo, cout)

    def bwd(g):
        gm = g.reshape(-1, cout)
        gw = gx = None
        if w.requires_grad:
            gw = (cols.reshape(-1, kh * kw * cin).T @ gm).reshape(w.data.shape)
        if x.requires_grad:
            gcols = (gm @ wm.T).reshape(n, ho, wo, kh * kw * cin)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride)
            gx = gxp if pad == 0 else gxp[:, pad:-pad, pad:-pad, :]
        return gx, gw

    return out, bwd


def _conv2d_transpose_fwd(inputs, attrs):
    x, w = inputs
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    if x.data.ndim != 4 or w.data.ndim != 4:
        _shape_error("conv2d_transpose", f"x must be (N,H,W,Cin), w (kh,kw,Cin,Cout); got {x.data.shape}, {w.data.shape}")
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        _shape_error("conv2d_transpose", f"channel mismatch: x has {x.data.shape[3]}, w expects {cin}")
    n, h, wd, _ = x.data.shape
    ho = (h - 1) * stride + kh - 2 * pad
    wo = (wd - 1) * stride + kw - 2 * pad
    if ho <= 0 or wo <= 0:
        _shape_error("conv2d_transpose", f"non-positive output size {ho}x{wo}")
    # scatter: out[i*s - pad + a, j*s - pad + b] += x[i, j] @ w[a, b]
    full = np.zeros((n, (h - 1) * stride + kh, (wd - 1) * stride + kw, cout), dtype=x.data.dtype)
    xw = _blocked_matmul(x.data.reshape(-1, cin), w.data.reshape(kh * kw, cin, cout).transpose(1, 0, 2).reshape(cin, kh * kw * cout))
    xw = xw.reshape(n, h, wd, kh, kw, cout)
    for a in range(kh):
        for b in range(kw):
            full[:, a:a + (h - 1) * stride + 1:stride, b:b + (wd - 1) * stride + 1:stride, :] += xw[:, :, :, a, b, :]
    out = full if pad == 0 else full[:, pad:pad + ho, pad:pad + wo, :]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gfull = np.zeros(full.shape, dtype=g.dtype)
        if pad == 0:
            gfull[:] = g
        else:
            gfull[:, pad:pad + ho, pad:pad + wo, :] = g
        gxw = np.empty((n, h, wd, kh, kw, cout), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                gxw[:, :, :, a, b, :] = gfull[:, a:a + (h - 1) * stride + 1:stride, b:b + (wd - 1) * stride + 1:stride, :]
        gxw2 = gxw.reshape(-1, kh * kw * cout)
        wt = w.data.reshape(kh * kw, cin, cout).transpose(1, 0, 2).reshape(cin, kh * kw * cout)
        gx = gw = None
        if x.requires_grad:
            gx = (gxw2 @ wt.T).reshape(x.data.shape)
        if w.requires_grad:
            gw = (x.data.reshape(-1, cin).T @ gxw2).reshape(cin, kh * kw, cout).transpose(1, 0, 2).reshape(w.data.shape)
        return gx, gw

    return out, bwd


def _mse_fwd(inputs, attrs):
    a, b = inputs
    if a.data.shape != b.data.shape:
        _shape_error("mse", f"shape mismatch {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    out = np.asarray((d * d).mean(), dtype=a.data.dtype)
    n = d.size

    def bwd(g):
        gd = (2.0 / n) * d * g
        return gd, -gd

    return out, bwd


def _l1_fwd(inputs, attrs):
    a, b = inputs
    if a.data.shape != b.data.shape:
        _shape_error("l1", f"shape mismatch {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    out = np.asarray(np.abs(d).mean(), dtype=a.data.dtype)
    n = d.size

    def bwd(g):
        gd = np.sign(d) / n * g
        return gd, -gd

    return out, bwd


def _sum_fwd(inputs, attrs):
    (a,) = inputs
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return out, lambda g: (np.full_like(a.data, g),)


_PRIMITIVES = {
    "matmul": _matmul_fwd,
    "add": _add_fwd,
    "mul": _mul_fwd,
    "scale": _scale_fwd,
    "softmax": _softmax_fwd,
    "layernorm": _layernorm_fwd,
    "gelu": _gelu_fwd,
    "embedding_gather": _embedding_gather_fwd,
    "reshape": _reshape_fwd,
    "transpose": _transpose_fwd,
    "concat": _concat_fwd,
    "slice": _slice_fwd,
    "cross_entropy": _cross_entropy_fwd,
    "conv2d": _conv2d_fwd,
    "conv2d_transpose": _conv2d_transpose_fwd,
    "mse": _mse_fwd,
    "l1": _l1_fwd,
    "sum": _sum_fwd,
}


def apply_primitive(name, inputs, attrs=None):
    """Apply a named primitive; records a tape entry when grads are live."""
    fn = _PRIMITIVES.get(name)
    if fn is None:
        raise ValueError(f"unknown primitive '{name}'; known: {sorted(_PRIMITIVES)}")
    inputs = list(inputs)
    out_data, bwd = fn(inputs, attrs or {})
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        _TAPE.append(_TapeEntry(inputs, out, bwd))
    return out


# Thin wrappers so call sites read naturally.

def matmul(a, b, row_tile=None):
    return apply_primitive("matmul", [a, b], {"row_tile": row_tile})

def add(a, b):
    return apply_primitive("add", [a, b])

def mul(a, b):
    return apply_primitive("mul", [a, b])

def scale(a, value):
    return apply_primitive("scale", [a], {"value": value})

def softmax(a, axis=-1):
    return apply_primitive("softmax", [a], {"axis": axis})

def layernorm(a, axis=-1, eps=1e-5):
    return apply_primitive("layernorm", [a], {"axis": axis, "eps": eps})

def gelu(a):
    return apply_primitive("gelu", [a])

def embedding_gather(table, indices):
    return apply_primitive("embedding_gather", [table], {"indices": indices})

def reshape(a, shape):
    return apply_primitive("reshape", [a], {"shape": shape})

def transpose(a, axes):
    return apply_primitive("transpose", [a], {"axes": axes})

def concat(tensors, axis=0):
    return apply_primitive("concat", list(tensors), {"axis": axis})

def slice_(a, begin, size):
    return apply_primitive("slice", [a], {"begin": begin, "size": size})

def cross_entropy(logits, targets, ignore_mask=None):
    return apply_primitive("cross_entropy", [logits],
                           {"targets": targets, "ignore_mask": ignore_mask})

def conv2d(x, w, stride=1, pad=0):
    return apply_primitive("conv2d", [x, w], {"stride": stride, "pad": pad})

def conv2d_transpose(x, w, stride=1, pad=0):
    return apply_primitive("conv2d_transpose", [x, w], {"stride": stride, "pad": pad})

def mse(a, b):
    return apply_primitive("mse", [a, b])

def l1(a, b):
    return apply_primitive("l1", [a, b])

def tsum(a):
    return apply_primitive("sum", [a])


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def grad_check(f, x, eps=1e-5, tol=1e-4):
    """Compare tape gradients of scalar-valued f against central differences.

    Returns a report dict with the max relative error; passes iff <= tol.
    """
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires a 64-bit tensor")
    x.zero_grad()
    out = f(x)
    if out.data.shape != ():
        raise ValueError("grad_check requires a scalar-valued function")
    backward(out)
    g_tape = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    g_fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = float(f(x).data)
        flat[i] = orig - eps
        with no_grad():
            fm = float(f(x).data)
        flat[i] = orig
        fd_flat[i] = (fp - fm) / (2.0 * eps)

    # absolute floor: entries where both gradients are ~0 compare absolutely,
    # so FD roundoff noise on degenerate functions does not register as error
    denom = np.maximum(np.abs(g_tape) + np.abs(g_fd), 1e-3)
    rel = np.abs(g_tape - g_fd) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return {"max_rel_error": max_rel, "passed": max_rel <= tol,
            "tape_grad": g_tape, "fd_grad": g_fd}


# --------------------------------------------------------------------------
# Optimiser
# --------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decay_filter=None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter or (lambda name: True)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.weight_decay and self.decay_filter(k):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        """Flat name->array view of optimizer state for checkpointing."""
        out = {"adam.step": np.asarray([self.step_count], dtype=np.float64)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrs):
        self.step_count = int(arrs["adam.step"][0])
        for k in self.params:
            self.m[k] = np.ascontiguousarray(arrs[f"adam.m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.ascontiguousarray(arrs[f"adam.v.{k}"], dtype=self.v[k].dtype)
