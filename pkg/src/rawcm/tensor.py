"""Dense rank-3 tensors with a reverse-mode differentiation tape.

All values are laid out as (batch, channel, time) numpy arrays.  Primitive
operations record backward closures on the currently active :class:`Tape`;
``backward`` replays them in reverse to populate gradients.  A
finite-difference ``grad_check`` underwrites every backward rule in the
package.
"""

from __future__ import annotations

import weakref

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "DegenerateInputError",
    "GradCheckReport",
    "tensor_new",
    "add",
    "mul",
    "sum_all",
    "conv1d",
    "linear",
    "selu",
    "sigmoid",
    "maxpool1d",
    "global_avg_pool",
    "transpose_ct",
    "channel_slice",
    "concat_channels",
    "backward",
    "grad_check",
    "SELU_LAMBDA",
    "SELU_ALPHA",
]

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class ShapeError(ValueError):
    """Incompatible tensor shapes or layer geometry."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class DegenerateInputError(RuntimeError):
    """grad_check could not sample a point away from non-differentiabilities."""


class Tensor:
    """Immutable-by-convention rank-3 value participating in autodiff.

    ``node_id`` is a handle into the tape that last saw this tensor; it is
    only meaningful while that tape is alive.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise ShapeError(f"tensor must be rank 3, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor_new(shape, fill="zeros", *, lo=-1.0, hi=1.0, seed=0, values=None,
               requires_grad=False, dtype=np.float32):
    """Construct a tensor with zeros / ones / seeded-uniform / explicit fill."""
    b, c, l = shape
    if b < 0 or c < 0 or l < 0:
        raise ShapeError(f"negative dimension in shape {shape}")
    n = b * c * l
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "ones":
        data = np.ones(shape, dtype=dtype)
    elif fill == "uniform":
        rng = np.random.default_rng(seed)
        data = rng.uniform(lo, hi, size=shape).astype(dtype)
    elif fill == "explicit":
        vals = np.asarray(values, dtype=dtype)
        if vals.size != n:
            raise ShapeError(
                f"explicit fill needs {n} values for shape {shape}, got {vals.size}")
        data = vals.reshape(shape)
    else:
        raise ContractError(f"unknown fill kind {fill!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape

_ACTIVE_TAPE = None


class Tape:
    """Single-pass record of primitive operations, replayed by ``backward``.

    Usable as a context manager; only one tape is active at a time and a
    forward pass outside any tape records nothing (inference mode).
    """

    def __init__(self):
        self.nodes = []          # (op name, input ids, output id, backward fn)
        self.gradients = {}      # node id -> numpy array
        self._leaves = {}        # node id -> Tensor (requires_grad leaves)
        self._next_id = 0
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def ensure_id(self, t):
        """Assign ``t`` a node id on this tape (registering leaves)."""
        # the backreference is weak so discarded tapes free by refcount
        if t._tape is None or t._tape() is not self:
            t.node_id = self._next_id
            t._tape = weakref.ref(self)
            self._next_id += 1
            if t.requires_grad:
                self._leaves[t.node_id] = t
        return t.node_id

    def record(self, name, inputs, out, backward_fn):
        in_ids = [self.ensure_id(t) for t in inputs]
        out.requires_grad = True
        out_id = self.ensure_id(out)
        self.nodes.append((name, in_ids, out_id, backward_fn))
        return out

    def grad(self, t):
        """Gradient array for ``t`` after backward (zeros if untouched)."""
        if t._tape is None or t._tape() is not self or t.node_id is None:
            raise ContractError("tensor was not seen by this tape")
        g = self.gradients.get(t.node_id)
        if g is None:
            return np.zeros_like(t.data)
        return g


def _active():
    return _ACTIVE_TAPE


def _maybe_record(name, inputs, out_data, backward_fn):
    tape = _ACTIVE_TAPE
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(name, inputs, out, backward_fn)
    return out


def backward(tape, root):
    """Populate ``tape.gradients`` for every requires_grad node under ``root``.

    ``root`` must be scalar shaped (1, 1, 1).
    """
    if root.shape != (1, 1, 1):
        raise ContractError(f"backward root must be scalar (1,1,1), got {root.shape}")
    if root._tape is None or root._tape() is not tape or root.node_id is None:
        raise ContractError("root tensor does not belong to this tape")
    grads = {root.node_id: np.ones((1, 1, 1), dtype=root.dtype)}
    for name, in_ids, out_id, backward_fn in reversed(tape.nodes):
        g_out = grads.get(out_id)
        if g_out is None:
            continue
        for in_id, g_in in zip(in_ids, backward_fn(g_out)):
            if g_in is None:
                continue
            if in_id in grads:
                grads[in_id] = grads[in_id] + g_in
            else:
                grads[in_id] = g_in
    # unused requires_grad leaves get explicit zero gradients
    for nid, leaf in tape._leaves.items():
        if nid not in grads:
            grads[nid] = np.zeros_like(leaf.data)
    tape.gradients = grads
    return grads


# ---------------------------------------------------------------------------
# Primitive operations

def _broadcast_check(a, b):
    """Allow equal shapes or b as (B,C,1) against a's (B,C,L)."""
    if a.shape == b.shape:
        return False
    if b.shape == (a.shape[0], a.shape[1], 1):
        return True
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def add(a, b):
    b_bcast = _broadcast_check(a, b)

    def back(g):
        ga = g
        gb = g.sum(axis=2, keepdims=True) if b_bcast else g
        return ga, gb

    return _maybe_record("add", [a, b], a.data + b.data, back)


def mul(a, b):
    b_bcast = _broadcast_check(a, b)
    a_data, b_data = a.data, b.data

    def back(g):
        ga = g * b_data
        gb = g * a_data
        if b_bcast:
            gb = gb.sum(axis=2, keepdims=True)
        return ga, gb

    return _maybe_record("mul", [a, b], a_data * b_data, back)


def sum_all(x):
    """Reduce to a scalar-shaped (1,1,1) tensor."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        return (np.full(shape, g.reshape(()), dtype=dtype),)

    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1)
    return _maybe_record("sum_all", [x], out, back)


def conv1d(x, weight, bias=None, *, stride=1, padding=0, groups=1):
    """Grouped 1-D convolution (cross-correlation) over the time axis.

    weight: (C_out, C_in/groups, K); bias: (1, C_out, 1) or None.
    """
    B, C_in, L = x.shape
    C_out, c_in_g, K = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ContractError("stride >= 1, padding >= 0, groups >= 1 required")
    if C_in % groups or C_out % groups:
        raise ShapeError(
            f"channels ({C_in} in, {C_out} out) not divisible by groups={groups}")
    if c_in_g != C_in // groups:
        raise ShapeError(
            f"weight expects {c_in_g} in-channels per group, input has {C_in // groups}")
    Lp = L + 2 * padding
    if K > Lp:
        raise ShapeError(f"kernel {K} longer than padded input {Lp}")
    L_out = (Lp - K) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]  # B,C_in,L_out,K
    G = groups
    wing = win.reshape(B, G, c_in_g, L_out, K)
    wg = weight.data.reshape(G, C_out // G, c_in_g, K)
    out = np.einsum("bgclk,gock->bgol", wing, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(B, C_out, L_out), dtype=x.dtype)
    if bias is not None:
        out = out + bias.data

    def back(g):
        gg = g.reshape(B, G, C_out // G, L_out)
        dw = np.einsum("bgol,bgclk->gock", gg, wing, optimize=True)
        dw = dw.reshape(C_out, c_in_g, K).astype(weight.dtype)
        # grad wrt each window element, then scatter back through the stride
        dwin = np.einsum("bgol,gock->bgclk", gg, wg, optimize=True)
        dwin = dwin.reshape(B, C_in, L_out, K)
        dxp = np.zeros((B, C_in, Lp), dtype=x.dtype)
        for k in range(K):
            dxp[:, :, k:k + stride * L_out:stride] += dwin[:, :, :, k]
        dx = dxp[:, :, padding:Lp - padding] if padding else dxp
        if bias is None:
            return dx, dw
        db = g.sum(axis=(0, 2), keepdims=True).astype(bias.dtype)
        return dx, dw, db

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return _maybe_record("conv1d", inputs, out, back)


def linear(x, weight, bias=None):
    """Channel-mixing map applied pointwise over time (a K=1 convolution).

    weight: (C_out, C_in, 1); bias: (1, C_out, 1) or None.
    """
    B, C_in, L = x.shape
    C_out, c_in_w, _ = weight.shape
    if c_in_w != C_in:
        raise ShapeError(f"weight expects {c_in_w} in-channels, input has {C_in}")
    w2 = weight.data[:, :, 0]
    out = np.einsum("oc,bcl->bol", w2, x.data, optimize=True)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    if bias is not None:
        out = out + bias.data

    def back(g):
        dx = np.einsum("oc,bol->bcl", w2, g, optimize=True).astype(x.dtype)
        dw = np.einsum("bol,bcl->oc", g, x.data, optimize=True)
        dw = dw[:, :, None].astype(weight.dtype)
        if bias is None:
            return dx, dw
        db = g.sum(axis=(0, 2), keepdims=True).astype(bias.dtype)
        return dx, dw, db

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return _maybe_record("linear", inputs, out, back)


def selu(x):
    d = x.data
    pos = d > 0
    expd = np.exp(np.minimum(d, 0.0))
    out = np.where(pos, SELU_LAMBDA * d, SELU_LAMBDA * SELU_ALPHA * (expd - 1.0))
    out = out.astype(x.dtype)

    def back(g):
        deriv = np.where(pos, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * expd)
        return (g * deriv.astype(x.dtype),)

    return _maybe_record("selu", [x], out, back)


def sigmoid(x):
    d = x.data
    # stable in both tails
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = out.astype(x.dtype)

    def back(g):
        return (g * (out * (1.0 - out)),)

    return _maybe_record("sigmoid", [x], out, back)


def maxpool1d(x, kernel, stride=None, padding=0):
    """Windowed max over time; padding uses -inf so it is never selected."""
    if stride is None:
        stride = kernel
    B, C, L = x.shape
    Lp = L + 2 * padding
    if kernel > Lp:
        raise ShapeError(f"pool kernel {kernel} longer than padded input {Lp}")
    L_out = (Lp - kernel) // stride + 1
    if L_out < 1:
        raise ShapeError("empty max-pool output")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    idx = win.argmax(axis=3)                      # first max on ties
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def back(g):
        dxp = np.zeros((B, C, Lp), dtype=x.dtype)
        t0 = np.arange(L_out) * stride
        pos = t0[None, None, :] + idx              # B,C,L_out position in xp
        bb, cc = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
        np.add.at(dxp, (bb[..., None], cc[..., None], pos), g)
        return (dxp[:, :, padding:Lp - padding] if padding else dxp,)

    return _maybe_record("maxpool1d", [x], out, back)


def global_avg_pool(x):
    B, C, L = x.shape
    if L < 1:
        raise ShapeError("global average pool over empty time axis")
    out = x.data.mean(axis=2, keepdims=True).astype(x.dtype)

    def back(g):
        return (np.broadcast_to(g / L, (B, C, L)).astype(x.dtype),)

    return _maybe_record("global_avg_pool", [x], out, back)


def transpose_ct(x):
    """Swap the channel and time axes (used to convolve across channels)."""
    out = np.ascontiguousarray(x.data.transpose(0, 2, 1))

    def back(g):
        return (np.ascontiguousarray(g.transpose(0, 2, 1)),)

    return _maybe_record("transpose_ct", [x], out, back)


def channel_slice(x, c0, c1):
    B, C, L = x.shape
    if not (0 <= c0 < c1 <= C):
        raise ShapeError(f"bad channel slice [{c0}:{c1}] for C={C}")
    out = np.ascontiguousarray(x.data[:, c0:c1, :])

    def back(g):
        dx = np.zeros((B, C, L), dtype=x.dtype)
        dx[:, c0:c1, :] = g
        return (dx,)

    return _maybe_record("channel_slice", [x], out, back)


def concat_channels(parts):
    if not parts:
        raise ContractError("concat_channels needs at least one tensor")
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        grads, off = [], 0
        for c in sizes:
            grads.append(np.ascontiguousarray(g[:, off:off + c, :]))
            off += c
        return tuple(grads)

    return _maybe_record("concat_channels", list(parts), out, back)


# ---------------------------------------------------------------------------
# Gradient checking

class GradCheckReport:
    def __init__(self, op_name, max_rel_err, n_checked):
        self.op_name = op_name
        self.max_rel_err = max_rel_err
        self.n_checked = n_checked

    def __repr__(self):
        return (f"GradCheckReport({self.op_name}: max_rel_err={self.max_rel_err:.3e}"
                f" over {self.n_checked} elements)")


def _rel_err(analytic, numeric, eps_abs=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), eps_abs)
    return np.abs(analytic - numeric) / denom


def grad_check(op, input_shapes, seed=0, *, h=1e-5, degenerate=None,
               name=None, lo=-1.0, hi=1.0):
    """Compare analytic gradients of ``op`` against central finite differences.

    ``op`` maps a list of float64 tensors to one output tensor.  The output is
    reduced to a scalar with a fixed random projection so every output element
    influences the check.  ``degenerate`` may reject a sampled input (max-pool
    ties, kinks); after 10 rejected draws a DegenerateInputError is raised.
    """
    rng = np.random.default_rng(seed)
    for _ in range(10):
        inputs = [tensor_new(s, "uniform", lo=lo, hi=hi,
                             seed=rng.integers(0, 2**63),
                             requires_grad=True, dtype=np.float64)
                  for s in input_shapes]
        if degenerate is None or not degenerate(inputs):
            break
    else:
        raise DegenerateInputError(f"no non-degenerate input found for {name or op}")

    with Tape() as tape:
        out = op(inputs)
        proj = tensor_new(out.shape, "uniform", lo=-1, hi=1,
                          seed=rng.integers(0, 2**63), dtype=np.float64)
        root = sum_all(mul(out, proj))
        backward(tape, root)
        analytic = [tape.grad(t).copy() for t in inputs]

    def scalar_at():
        o = op(inputs)
        return float((o.data * proj.data).sum())

    max_err = 0.0
    n = 0
    for t, ag in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar_at()
            flat[i] = orig - h
            fm = scalar_at()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            max_err = max(max_err, float(_rel_err(aflat[i], numeric)))
            n += 1
    return GradCheckReport(name or getattr(op, "__name__", "op"), max_err, n)
