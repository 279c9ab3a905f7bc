"""Differentiable rank-4 tensor core with reverse-mode gradients.

Every feature map is a Tensor4: a (batch, channel, height, width) numpy array
plus an optional gradient buffer. Each op records a backward closure on its
output node; Tensor4.backward() replays the graph in reverse topological
order. The op set is deliberately closed: exactly the primitives the
segmentation blocks and losses need, nothing more.

Conventions fixed here, relied on throughout the package and its tests:

* convolution output size is floor((H + 2*padding - kernel) / stride) + 1,
  so kernel k with padding k//2 and stride 1 preserves resolution
* bilinear upsampling uses the half-pixel (align-corners = false) sampling
  grid with edge clamping
* max pooling routes the gradient to the first maximal element of each
  window in row-major scan order
* batch norm standardizes with population (biased) variance in train mode
  and keeps running statistics for eval mode
* no op ever mutates its inputs' data; arrays entering the graph must be
  finite, and a NaN/Inf raises NonFiniteError at node creation
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """An operand's shape (or dtype) violates an op contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf value tried to enter the graph."""


_DTYPES = {"single": np.float32, "double": np.float64}
_FLOATS = (np.float32, np.float64)


def dtype_of(name):
    """Map the 'single'/'double' precision flag to a numpy dtype."""
    try:
        return _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}, expected 'single' or 'double'")


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor4:
    """A rank-4 array node in the computation graph.

    Leaves are built directly; interior nodes are produced by ops, carry a
    backward closure, and must be treated as immutable once created.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype_of(dtype) if isinstance(dtype, str) else dtype)
        elif arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires a rank-4 array, got shape {arr.shape}")
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents):
        out = cls.__new__(cls)
        arr = np.asarray(data)
        _check_finite(arr, "op output")
        out.data = arr
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor4(self.data.copy(), requires_grad=False)

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, seed=None):
        """Accumulate gradients of a weighted sum of this node into leaves.

        seed defaults to all ones (the plain sum of the output); pass an
        array of the output's shape to weight the projection.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"backward seed shape {seed.shape} != output shape {self.data.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None and node.requires_grad:
                node._backward(node.grad)

    def __repr__(self):
        return (f"Tensor4(shape={self.data.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


class ParamTensor(Tensor4):
    """A named trainable leaf. The name doubles as the checkpoint key."""

    __slots__ = ("name",)

    def __init__(self, data, name, requires_grad=True, dtype=None):
        if not name or not isinstance(name, str):
            raise ValueError("ParamTensor needs a non-empty string name")
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype.name})"


def _require_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(
                f"mixed dtypes in op: {[str(t.dtype) for t in tensors]}")
    return dt


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

# Optional hook: when set to a list, relu() appends the smallest |x| it sees.
# grad_check uses it to confirm activations stay away from the kink.
_relu_watch = None


def relu(x):
    """Elementwise max(x, 0). Subgradient at exactly 0 is 0."""
    global _relu_watch
    if _relu_watch is not None and x.data.size:
        _relu_watch.append(float(np.min(np.abs(x.data))))
    out = Tensor4._from_op(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        mask = x.data > 0

        def backward(g):
            x._accum(g * mask)

        out._backward = backward
    return out


def sigmoid(x):
    """Elementwise logistic function, numerically stable at large |x|."""
    y = expit(x.data)
    out = Tensor4._from_op(y, (x,))
    if out.requires_grad:
        def backward(g):
            x._accum(g * (y * (1.0 - y)))

        out._backward = backward
    return out


def add(a, b):
    """Elementwise sum of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _require_same_dtype(a, b)
    out = Tensor4._from_op(a.data + b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)

        out._backward = backward
    return out


def scale(x, factor):
    """Multiply by a python scalar."""
    factor = float(factor)
    out = Tensor4._from_op(x.data * np.asarray(factor, dtype=x.dtype), (x,))
    if out.requires_grad:
        def backward(g):
            x._accum(g * np.asarray(factor, dtype=g.dtype))

        out._backward = backward
    return out


def concat_channels(tensors):
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(
                f"concat_channels: incompatible shapes {tensors[0].shape} vs {t.shape}")
    _require_same_dtype(*tensors)
    out = Tensor4._from_op(np.concatenate([t.data for t in tensors], axis=1), tensors)
    if out.requires_grad:
        splits = [t.shape[1] for t in tensors]

        def backward(g):
            offset = 0
            for t, c in zip(tensors, splits):
                if t.requires_grad:
                    t._accum(g[:, offset:offset + c])
                offset += c

        out._backward = backward
    return out


def pixel_shuffle2(x):
    """Rearrange (N, 4C, H, W) into (N, C, 2H, 2W).

    Output element (c, 2i+di, 2j+dj) is input element (4c + 2*di + dj, i, j),
    so the op is a bijection on values (multisets are preserved exactly).
    """
    n, c4, h, w = x.shape
    if c4 % 4 != 0:
        raise ShapeError(f"pixel_shuffle2: channel count {c4} not divisible by 4")
    c = c4 // 4
    y = x.data.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * h, 2 * w)
    out = Tensor4._from_op(np.ascontiguousarray(y), (x,))
    if out.requires_grad:
        def backward(g):
            gx = g.reshape(n, c, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, c4, h, w)
            x._accum(np.ascontiguousarray(gx))

        out._backward = backward
    return out


def channel_mean(x):
    """Spatial mean per channel: (N, C, H, W) -> (N, C, 1, 1)."""
    n, c, h, w = x.shape
    out = Tensor4._from_op(x.data.mean(axis=(2, 3), keepdims=True), (x,))
    if out.requires_grad:
        inv = 1.0 / (h * w)

        def backward(g):
            x._accum(np.broadcast_to(g * np.asarray(inv, dtype=g.dtype), x.shape))

        out._backward = backward
    return out


def channel_scale(x, s):
    """Scale each channel of x by the matching entry of s: (N, C, 1, 1)."""
    n, c, h, w = x.shape
    if s.shape != (n, c, 1, 1):
        raise ShapeError(
            f"channel_scale: scale shape {s.shape} must be {(n, c, 1, 1)} for input {x.shape}")
    _require_same_dtype(x, s)
    out = Tensor4._from_op(x.data * s.data, (x, s))
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                x._accum(g * s.data)
            if s.requires_grad:
                s._accum((g * x.data).sum(axis=(2, 3), keepdims=True))

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias, kernel=None, padding=None, stride=1):
    """2-D cross-correlation with per-output-channel bias.

    x       (N, Cin, H, W)
    weight  (Cout, Cin, k, k), k odd
    bias    (1, Cout, 1, 1)
    padding defaults to k // 2 (resolution preserving at stride 1)

    Output spatial size is floor((H + 2*padding - k) / stride) + 1. Gradients
    flow to x, weight and bias. Implemented as im2col + matmul so that both
    passes are single GEMM calls.
    """
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (Cout, Cin, k, k), got {weight.shape}")
    cout, cin_w, k, _ = weight.shape
    if kernel is not None and kernel != k:
        raise ShapeError(f"conv2d: kernel argument {kernel} != weight kernel {k}")
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if padding is None:
        padding = k // 2
    padding = int(padding)
    stride = int(stride)
    if padding < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid padding={padding} or stride={stride}")
    n, cin, h, w = x.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channels {cin} != weight input channels {cin_w} "
            f"(input {x.shape}, weight {weight.shape})")
    if bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be {(1, cout, 1, 1)}")
    _require_same_dtype(x, weight, bias)
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {(hp, wp)}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Cin, Ho, Wo, k, k) -> (N*Ho*Wo, Cin*k*k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out_mat = cols @ wmat.T
    out_mat += bias.data.reshape(1, cout)
    y = np.ascontiguousarray(out_mat.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    out = Tensor4._from_op(y, (x, weight, bias))

    if out.requires_grad:
        def backward(g):
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
            if weight.requires_grad:
                weight._accum((gmat.T @ cols).reshape(weight.shape))
            if bias.requires_grad:
                bias._accum(gmat.sum(axis=0).reshape(1, cout, 1, 1))
            if x.requires_grad:
                gcols = gmat @ wmat  # (N*Ho*Wo, Cin*k*k)
                gcols = gcols.reshape(n, ho, wo, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
                gx = np.zeros((n, cin, hp, wp), dtype=g.dtype)
                for ki in range(k):
                    for kj in range(k):
                        gx[:, :, ki:ki + stride * ho:stride,
                           kj:kj + stride * wo:stride] += gcols[:, :, ki, kj]
                if padding:
                    gx = gx[:, :, padding:padding + h, padding:padding + w]
                x._accum(np.ascontiguousarray(gx))

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def max_pool2(x):
    """2x2 max pooling with stride 2. H and W must be even.

    Within each window the gradient goes to the first maximal element in
    row-major order: (0,0), (0,1), (1,0), (1,1).
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial dims must be even, got {(h, w)}")
    hw, ww = h // 2, w // 2
    v = x.data.reshape(n, c, hw, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hw, ww, 4)
    idx = v.argmax(axis=-1)
    y = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    out = Tensor4._from_op(np.ascontiguousarray(y), (x,))
    if out.requires_grad:
        def backward(g):
            gv = np.zeros((n, c, hw, ww, 4), dtype=g.dtype)
            np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
            gx = gv.reshape(n, c, hw, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            x._accum(np.ascontiguousarray(gx))

        out._backward = backward
    return out


@functools.lru_cache(maxsize=None)
def _interp_matrix_cached(n_in, n_out, dtype_name):
    dtype = np.dtype(dtype_name)
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo_c), 1.0 - frac)
    np.add.at(m, (rows, hi_c), frac)
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic 1-D bilinear resampling matrix (half-pixel grid).

    Sample position for output index i is (i + 0.5) * n_in / n_out - 0.5,
    linearly interpolated between the two nearest input samples with edge
    clamping. Used for x2 upsampling in the graph and for image resizing in
    the data pipeline.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interp_matrix: sizes must be positive, got {n_in}->{n_out}")
    return _interp_matrix_cached(int(n_in), int(n_out), np.dtype(dtype).name)


def bilinear_up2(x):
    """Bilinear x2 upsampling on the half-pixel grid (align-corners = false).

    A purely linear map, applied separably: out = Mh @ x @ Mw^T. The backward
    pass is the transpose map.
    """
    n, c, h, w = x.shape
    mh = interp_matrix(h, 2 * h, x.dtype)
    mw = interp_matrix(w, 2 * w, x.dtype)
    y = np.matmul(np.matmul(mh, x.data), mw.T)
    out = Tensor4._from_op(np.ascontiguousarray(y), (x,))
    if out.requires_grad:
        def backward(g):
            x._accum(np.ascontiguousarray(np.matmul(np.matmul(mh.T, g), mw)))

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BNState:
    """Running statistics for one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        dt = dtype_of(dtype) if isinstance(dtype, str) else dtype
        return cls(running_mean=np.zeros(channels, dtype=dt),
                   running_var=np.ones(channels, dtype=dt),
                   momentum=momentum, eps=eps)

    def copy(self):
        return BNState(self.running_mean.copy(), self.running_var.copy(),
                       self.momentum, self.eps)


def batch_norm(x, gamma, beta, state, mode="train"):
    """Per-channel batch normalization.

    Train mode standardizes with the batch mean and population (biased)
    variance over (N, H, W), then updates the running statistics:
    running <- (1 - momentum) * running + momentum * batch_stat.
    Eval mode standardizes with the stored running statistics. Both modes
    apply the learned affine map gamma * xhat + beta.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} must be {(1, c, 1, 1)}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    _require_same_dtype(x, gamma, beta)
    eps = np.asarray(state.eps, dtype=x.dtype)

    if mode == "train":
        m = n * h * w
        if m <= 1:
            raise ShapeError(
                "batch_norm: train mode needs more than one element per channel "
                f"(batch*H*W = {m}); variance would be zero by construction")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # population variance
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        mom = state.momentum
        state.running_mean = ((1.0 - mom) * state.running_mean + mom * mu).astype(x.dtype)
        state.running_var = ((1.0 - mom) * state.running_var + mom * var).astype(x.dtype)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)
        xhat = ((x.data - state.running_mean.reshape(1, c, 1, 1).astype(x.dtype))
                * inv_std.reshape(1, c, 1, 1))

    y = gamma.data * xhat + beta.data
    out = Tensor4._from_op(y, (x, gamma, beta))

    if out.requires_grad:
        inv_std_b = inv_std.reshape(1, c, 1, 1)

        def backward(g):
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3), keepdims=True))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3), keepdims=True))
            if x.requires_grad:
                gxhat = g * gamma.data
                if mode == "train":
                    mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                    x._accum((gxhat - mean_g - xhat * mean_gx) * inv_std_b)
                else:
                    x._accum(gxhat * inv_std_b)

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    passed: bool
    max_rel_error: float
    tolerance: float
    worst: str = ""
    min_relu_gap: float = field(default=float("inf"))
    failures: list = field(default_factory=list)
    per_input: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        msg = (f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
               f"(tol {self.tolerance:.1e}, worst at {self.worst or 'n/a'})")
        if self.failures:
            msg += "; " + "; ".join(self.failures)
        return msg


def grad_check(op_closure, inputs, tolerance=1e-4, *, step=1e-5, rng_seed=0,
               max_full=512, samples=64, relu_gap=1e-3):
    """Compare reverse-mode gradients against central finite differences.

    op_closure(*inputs) must rebuild the forward graph on every call using
    the passed tensors (the same objects each time). All differentiable
    inputs must be double precision. A fixed random projection turns the
    output into a scalar; each checked element is perturbed by +-step in
    place (and restored), so the closure must not cache data between calls.

    Tensors above max_full elements are spot-checked at `samples` seeded
    random positions instead of exhaustively. Returns a GradCheckReport;
    passed is True iff every compared element agrees within `tolerance`
    relative error and all analytic gradients are finite.
    """
    global _relu_watch
    inputs = list(inputs)
    checked = [t for t in inputs if t.requires_grad]
    if not checked:
        raise ValueError("grad_check: no input requires a gradient")
    for i, t in enumerate(checked):
        if t.dtype != np.float64:
            raise ShapeError(
                f"grad_check: input {getattr(t, 'name', i)!r} must be double precision")

    _relu_watch = watch = []
    try:
        out = op_closure(*inputs)
    finally:
        _relu_watch = None
    rng = np.random.default_rng(rng_seed)
    seed_vec = rng.standard_normal(out.shape)

    for t in inputs:
        t.zero_grad()
    out.backward(seed_vec)

    def loss():
        return float(np.sum(op_closure(*inputs).data * seed_vec))

    report = GradCheckReport(passed=True, max_rel_error=0.0, tolerance=tolerance,
                             min_relu_gap=min(watch) if watch else float("inf"))
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        name = getattr(t, "name", None) or f"input[{i}]"
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            report.passed = False
            report.failures.append(f"non-finite gradient for {name}")
            continue
        size = t.data.size
        if size <= max_full:
            flat_idx = np.arange(size)
        else:
            flat_idx = np.sort(rng.choice(size, size=min(samples, size), replace=False))
        fd = np.empty(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            pos = np.unravel_index(fi, t.data.shape)
            orig = t.data[pos]
            t.data[pos] = orig + step
            lp = loss()
            t.data[pos] = orig - step
            lm = loss()
            t.data[pos] = orig
            fd[j] = (lp - lm) / (2.0 * step)
        ga = g.reshape(-1)[flat_idx]
        scale_i = max(float(np.max(np.abs(ga))), float(np.max(np.abs(fd))), 1e-8)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(fd)), 1e-3 * scale_i)
        rel = np.abs(ga - fd) / denom
        worst_j = int(np.argmax(rel)) if len(rel) else 0
        err = float(rel[worst_j]) if len(rel) else 0.0
        report.per_input[name] = err
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst = f"{name}[flat {int(flat_idx[worst_j])}]"
        if err > tolerance:
            report.passed = False
            report.failures.append(f"{name}: rel err {err:.3e} > {tolerance:.1e}")
    if report.min_relu_gap < relu_gap:
        report.failures.append(
            f"warning: a relu argument came within {report.min_relu_gap:.2e} of 0 "
            f"(requested gap {relu_gap:.1e}); finite differences may be unreliable")
    return report
