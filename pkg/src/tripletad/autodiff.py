"""Minimal reverse-mode autodiff for the fixed operation set the network needs.

Tensors wrap dense float arrays (row-major, 32-bit by default) and record a
tape of parent links; `Tensor.backward()` walks the tape in reverse
topological order. Only the operations below are provided: 3x3 valid
convolution, ReLU, 2x2/2 max pooling, 2-pixel border crop, elementwise add,
Euclidean distance, a two-way softmax, mean absolute error, and the Adam
update. A finite-difference harness re-runs any op in float64 to check its
analytic gradient.

Spatial tensors use (H, W, C) axis order; every spatial op also accepts a
leading batch axis (N, H, W, C) and treats it elementwise.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_EPS_DISTANCE = 1e-12  # under the sqrt; keeps the gradient finite at a == b

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional gradient tape entry.

    Values are treated as immutable once produced by an op; only leaf
    tensors (parameters, probes) are ever written in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are only transport; free them eagerly
                if node is not self:
                    node.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable leaf tensor carrying Adam moment estimates."""

    __slots__ = ("adam_m", "adam_v", "step_count", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0
        self.name = name


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make_op(out_data: np.ndarray, parents: Sequence[Tensor],
             backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _spatial(x: Tensor, min_side: int, op: str) -> tuple[int, int]:
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"{op}: expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    h, w = x.data.shape[-3], x.data.shape[-2]
    if h < min_side or w < min_side:
        raise ShapeError(f"{op}: spatial dims {h}x{w} below minimum {min_side}")
    return h, w


# ---------------------------------------------------------------------------
# convolution


def _window_cols(x: np.ndarray) -> np.ndarray:
    """(..., H, W, C) -> (rows, 9*C) matrix of flattened 3x3 windows."""
    win = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(-3, -2))
    # sliding_window_view appends the window axes; put (u, v) ahead of C so
    # the flat layout matches kernels reshaped as (9*Cin, Cout)
    win = np.moveaxis(win, (-2, -1), (-3, -2))
    cols = np.ascontiguousarray(win)
    return cols.reshape(-1, 9 * x.shape[-1])


def conv2d_valid(x, kernels, bias) -> Tensor:
    """3x3 cross-correlation, stride 1, no padding.

    x: (H, W, Cin) or (N, H, W, Cin); kernels: (3, 3, Cin, Cout);
    bias: (Cout,). Output spatial dims shrink by exactly 2.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    h, w = _spatial(x, 3, "conv2d_valid")
    if kernels.data.ndim != 4 or kernels.data.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d_valid: kernels must be (3, 3, Cin, Cout), got {kernels.shape}")
    cin, cout = kernels.data.shape[2], kernels.data.shape[3]
    if x.data.shape[-1] != cin:
        raise ShapeError(
            f"conv2d_valid: input has {x.data.shape[-1]} channels, kernels expect {cin}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d_valid: bias must be ({cout},), got {bias.shape}")

    xd, kd, bd = x.data, kernels.data, bias.data
    lead = xd.shape[:-3]
    ho, wo = h - 2, w - 2
    cols = _window_cols(xd)
    out_data = cols @ kd.reshape(9 * cin, cout)
    out_data += bd
    out_data = out_data.reshape(lead + (ho, wo, cout))

    def backward(g: np.ndarray) -> None:
        g_mat = g.reshape(-1, cout)
        if bias.requires_grad:
            _accumulate(bias, g_mat.sum(axis=0))
        if kernels.requires_grad:
            gk = _window_cols(xd).T @ g_mat
            _accumulate(kernels, gk.reshape(3, 3, cin, cout))
        if x.requires_grad:
            pad = [(0, 0)] * len(lead) + [(2, 2), (2, 2), (0, 0)]
            gp = np.pad(g, pad)
            # full correlation with spatially flipped, channel-transposed kernels
            kf = kd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
            gx = _window_cols(gp) @ kf
            _accumulate(x, gx.reshape(xd.shape))

    return _make_op(out_data, (x, kernels, bias), backward)


# ---------------------------------------------------------------------------
# elementwise and pooling ops


def relu(x) -> Tensor:
    """max(0, x); gradient is 1 where x > 0 and 0 elsewhere (0 at x == 0)."""
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (x.data > 0))

    return _make_op(out_data, (x,), backward)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd row/column dropped.

    The backward pass routes the gradient to the first maximal element in
    row-major scan order within each window.
    """
    x = _as_tensor(x)
    h, w = _spatial(x, 2, "maxpool2x2")
    xd = x.data
    lead = xd.shape[:-3]
    c = xd.shape[-1]
    h2, w2 = h // 2, w // 2
    v = xd[..., : 2 * h2, : 2 * w2, :]
    v = v.reshape(lead + (h2, 2, w2, 2, c))
    # windows last, in scan order (0,0), (0,1), (1,0), (1,1)
    win = np.moveaxis(v, (-4, -2), (-2, -1)).reshape(lead + (h2, w2, c, 4))
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        g4 = np.zeros(lead + (h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        g4 = g4.reshape(lead + (h2, w2, c, 2, 2))
        g4 = np.moveaxis(g4, (-2, -1), (-4, -2))
        gx = np.zeros_like(xd)
        gx[..., : 2 * h2, : 2 * w2, :] = g4.reshape(lead + (2 * h2, 2 * w2, c))
        _accumulate(x, gx)

    return _make_op(out_data, (x,), backward)


def crop2d(x) -> Tensor:
    """Trim 2 rows/columns from every spatial border; backward zero-pads."""
    x = _as_tensor(x)
    _spatial(x, 5, "crop2d")
    out_data = np.ascontiguousarray(x.data[..., 2:-2, 2:-2, :])

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[..., 2:-2, 2:-2, :] = g
        _accumulate(x, gx)

    return _make_op(out_data, (x,), backward)


def add(x, y) -> Tensor:
    """Elementwise sum of two identically shaped tensors."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out_data = x.data + y.data

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g)
        _accumulate(y, g)

    return _make_op(out_data, (x, y), backward)


# ---------------------------------------------------------------------------
# distances, softmax head, loss


def euclidean_distance(a, b) -> Tensor:
    """sqrt(sum_i (a_i - b_i)^2 + 1e-12) over all elements; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"euclidean_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt(np.sum(diff * diff) + _EPS_DISTANCE)
    out_data = np.asarray(d, dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        scale = g / out_data
        _accumulate(a, scale * diff)
        _accumulate(b, -scale * diff)

    return _make_op(out_data, (a, b), backward)


def pairwise_distance(a, b) -> Tensor:
    """Per-sample Euclidean distance over a leading batch axis: (N, ...) -> (N,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"pairwise_distance: shape mismatch {a.shape} vs {b.shape}")
    if a.data.ndim < 2:
        raise ShapeError("pairwise_distance: needs a leading batch axis")
    n = a.data.shape[0]
    diff = (a.data - b.data).reshape(n, -1)
    d = np.sqrt(np.sum(diff * diff, axis=1) + _EPS_DISTANCE)
    out_data = d.astype(a.data.dtype, copy=False)

    def backward(g: np.ndarray) -> None:
        scale = (g / out_data)[:, None]
        ga = (scale * diff).reshape(a.data.shape)
        _accumulate(a, ga)
        _accumulate(b, -ga)

    return _make_op(out_data, (a, b), backward)


def softmax2(v) -> Tensor:
    """Numerically stabilized softmax over a trailing axis of length 2."""
    v = _as_tensor(v)
    if v.data.shape[-1] != 2:
        raise ShapeError(f"softmax2: trailing axis must have length 2, got {v.shape}")
    shifted = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(v, (g - inner) * out_data)

    return _make_op(out_data, (v,), backward)


def mae_loss(pred, target) -> Tensor:
    """Mean absolute error over all components; subgradient 0 at equality."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mae_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out_data = np.asarray(np.mean(np.abs(diff)), dtype=pred.data.dtype)

    def backward(g: np.ndarray) -> None:
        sub = np.sign(diff) * (g / diff.size)
        _accumulate(pred, sub)
        _accumulate(target, -sub)

    return _make_op(out_data, (pred, target), backward)


def stack_pair(x, y) -> Tensor:
    """Stack two same-shape tensors along a new trailing axis of length 2."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"stack_pair: shape mismatch {x.shape} vs {y.shape}")
    out_data = np.stack([x.data, y.data], axis=-1)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g[..., 0])
        _accumulate(y, g[..., 1])

    return _make_op(out_data, (x, y), backward)


def weighted_sum(x, weights: np.ndarray) -> Tensor:
    """sum(x * weights) with fixed weights; reduces any tensor to a scalar."""
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.data.shape:
        raise ShapeError(f"weighted_sum: weight shape {w.shape} != {x.shape}")
    out_data = np.asarray(np.sum(x.data * w), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * w)

    return _make_op(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: Iterable[Parameter], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; consumes and zeroes the gradients.

    Parameters with no accumulated gradient are treated as having zero
    gradient (moments decay, value moves only if the moments are nonzero).
    """
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
        b1 = p.data.dtype.type(beta1)
        b2 = p.data.dtype.type(beta2)
        p.adam_m *= b1
        p.adam_m += (1 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1 - b2) * (g * g)
        p.step_count += 1
        m_hat = p.adam_m / (1 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1 - beta2 ** p.step_count)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return (f"[gradcheck] {self.op_name}: max rel err "
                f"{self.max_relative_error:.3e} (tol {self.tolerance:.1e}) {verdict}")


def finite_difference_check(op, probes: Sequence, tolerance: float = 1e-4,
                            step: float = 1e-4, name: str | None = None,
                            max_coords_per_input: int | None = None,
                            seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of `op` against central differences.

    The probes are copied to float64 and the whole check runs in double
    precision. Non-scalar outputs are reduced with a fixed random linear
    functional so a single backward pass covers every output component.
    The relative error uses denominator max(|analytic|, |numeric|, 1e-8);
    when `max_coords_per_input` is set, only a random coordinate subset of
    each probe is probed numerically (the analytic pass is always full).
    """
    rng = np.random.default_rng(seed)
    inputs = [Tensor(np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64),
                     requires_grad=True) for p in probes]

    out = op(*inputs)
    weights = rng.standard_normal(out.data.shape) if out.data.size != 1 else None

    def forward_value() -> float:
        with no_grad():
            o = op(*inputs)
        if weights is None:
            return float(o.data)
        return float(np.sum(o.data * weights))

    scalar = out if weights is None else weighted_sum(out, weights)
    scalar.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    max_rel = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n_coords = flat.size
        if max_coords_per_input is not None and n_coords > max_coords_per_input:
            coords = rng.choice(n_coords, size=max_coords_per_input, replace=False)
        else:
            coords = np.arange(n_coords)
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = forward_value()
            flat[i] = orig - step
            f_minus = forward_value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(a_flat[i] - numeric) / denom)

    op_name = name or getattr(op, "__name__", "op")
    return GradCheckReport(op_name=op_name, max_relative_error=float(max_rel),
                           tolerance=tolerance, passed=max_rel <= tolerance)
