"""Dense-tensor ops with hand-derived analytic backward passes.

Activations use the N x C x H x W layout. Forward functions are pure;
each backward takes the upstream gradient plus whatever forward inputs
it needs and returns exact analytic gradients. Convolutions are stride-1
"same" with odd kernels so spatial dims are preserved; the transposed
convolution is fixed at kernel 4 / stride 2 / padding 1 (exact x2
upsampling). Heavy lifting is routed through matmul on im2col buffers.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def _check_conv_args(x, w, b, weight_layout):
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D [N,C,H,W], got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError(f"weights must be 4-D, got rank {w.ndim}")
    cin_axis = 1 if weight_layout == "oikk" else 0
    cout_axis = 0 if weight_layout == "oikk" else 1
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(
            f"in_channel mismatch on axis 1: input has {x.shape[1]}, "
            f"weights expect {w.shape[cin_axis]}"
        )
    if b.shape != (w.shape[cout_axis],):
        raise ShapeError(
            f"bias length {b.shape} does not match {w.shape[cout_axis]} output channels"
        )
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernel must be square, got {w.shape[2]}x{w.shape[3]}")


def _im2col(xp, k):
    """[N,C,Hp,Wp] zero-padded input -> [N*Ho*Wo, C*k*k] patch matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # [N,C,Ho,Wo,k,k]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), (n, ho, wo)


def conv2d(x, w, b):
    """Stride-1 same-padding convolution. x: [N,Cin,H,W], w: [Cout,Cin,k,k]."""
    _check_conv_args(x, w, b, "oikk")
    k = w.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd for same padding, got {k}")
    p = (k - 1) // 2
    n, _, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols, _ = _im2col(xp, k)
    y = cols @ w.reshape(cout, -1).T
    y = y.reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    return y + b.reshape(1, -1, 1, 1)


def conv2d_backward(gy, x, w):
    """Gradients of conv2d w.r.t. (input, weights, bias)."""
    k = w.shape[2]
    p = (k - 1) // 2
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    gb = gy.sum(axis=(0, 2, 3))

    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols_x, _ = _im2col(xp, k)
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1).reshape(-1, cout))
    gw = (gy_mat.T @ cols_x).reshape(cout, cin, k, k)

    # input grad: full correlation of gy with the flipped kernel
    gyp = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p))) if p else gy
    cols_gy, _ = _im2col(gyp, k)
    wf = w[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * k * k, cin)
    gx = (cols_gy @ wf).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gx), gw, gb


def conv2d_transpose(x, w, b):
    """Transposed convolution, kernel 4 / stride 2 / padding 1.

    x: [N,Cin,H,W], w: [Cin,Cout,4,4] -> [N,Cout,2H,2W]. Exact adjoint of
    the corresponding stride-2 convolution, so spatial dims double.
    """
    _check_conv_args(x, w, b, "iokk")
    if w.shape[2] != 4:
        raise ShapeError(f"transposed conv kernel is fixed at 4, got {w.shape[2]}")
    n, _, h, wd = x.shape
    cout = w.shape[1]
    buf = np.zeros((n, cout, 2 * h + 2, 2 * wd + 2), dtype=x.dtype)
    for ky in range(4):
        for kx in range(4):
            t = np.tensordot(x, w[:, :, ky, kx], axes=([1], [0]))  # [N,H,W,Cout]
            buf[:, :, ky : ky + 2 * h : 2, kx : kx + 2 * wd : 2] += t.transpose(0, 3, 1, 2)
    return buf[:, :, 1 : 2 * h + 1, 1 : 2 * wd + 1] + b.reshape(1, -1, 1, 1)


def _deconv_windows(gy):
    """Stride-2 4x4 windows of the padded upstream gradient: [N,Co,H,W,4,4]."""
    gyp = np.pad(gy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(gyp, (4, 4), axis=(2, 3))[:, :, ::2, ::2]


def conv2d_transpose_backward(gy, x, w):
    """Gradients of conv2d_transpose w.r.t. (input, weights, bias)."""
    n, cin, h, wd = x.shape
    cout = w.shape[1]
    gb = gy.sum(axis=(0, 2, 3))
    win = _deconv_windows(gy)  # [N,Cout,H,W,4,4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, -1)
    gx = (cols @ w.reshape(cin, -1).T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
    gw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cin,Cout,4,4]
    return np.ascontiguousarray(gx), gw, gb


def maxpool2(x):
    """2x2 max pooling with stride 2. Returns (pooled, argmax offsets).

    Offsets are flat indices into each window in row-major (dy, dx) order;
    ties resolve to the first position scanned.
    """
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D [N,C,H,W], got rank {x.ndim}")
    n, c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ShapeError(f"maxpool2 needs even H,W, got {h}x{wd}; pad the input first")
    win = x.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, wd // 2, 4)
    idx = win.argmax(axis=4)
    y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return y, idx


def maxpool2_backward(gy, idx, in_shape):
    """Routes the upstream gradient to the stored argmax positions."""
    n, c, h, wd = in_shape
    z = np.zeros((n, c, h // 2, wd // 2, 4), dtype=gy.dtype)
    np.put_along_axis(z, idx[..., None], gy[..., None], axis=4)
    z = z.reshape(n, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(z.reshape(n, c, h, wd))


def fully_connected(x, w, b):
    """Affine map: [N,D] @ [D,M] + [M]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"fully_connected expects 2-D input/weights, got {x.ndim}/{w.ndim}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dims disagree: input axis 1 is {x.shape[1]}, weights axis 0 is {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias length {b.shape} does not match {w.shape[1]} outputs")
    return x @ w + b


def fully_connected_backward(gy, x, w):
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(gy, x):
    # gradient is 0 at x == 0 by convention
    return gy * (x > 0)


def sigmoid(x):
    """Numerically stable logistic; exp never sees a positive argument."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_backward(gy, y):
    return gy * y * (1.0 - y)


def softmax(x):
    """Row-wise softmax over [N,K] with max-subtraction stabilization."""
    if x.ndim != 2:
        raise ShapeError(f"softmax expects [N,K], got rank {x.ndim}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(gy, y):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def concat_channels(xs):
    """Concatenate along the channel axis; all N,H,W must agree."""
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].shape
    for i, x in enumerate(xs[1:], start=1):
        if x.shape[0] != ref[0]:
            raise ShapeError(f"batch mismatch on axis 0: input {i} has {x.shape[0]}, expected {ref[0]}")
        if x.shape[2:] != ref[2:]:
            raise ShapeError(f"spatial mismatch: input {i} is {x.shape[2:]}, expected {ref[2:]}")
    return np.concatenate(xs, axis=1)


def split_channels(y, channel_counts):
    """Inverse of concat_channels; the backward of a concat is this split."""
    if sum(channel_counts) != y.shape[1]:
        raise ShapeError(
            f"channel counts {channel_counts} do not sum to axis 1 extent {y.shape[1]}"
        )
    return np.split(y, np.cumsum(channel_counts)[:-1], axis=1)


def scale_broadcast_mul(f, g, l):
    """Attention weighting: out[n,c,h,w] = g[n] * l[n,0,h,w] * f[n,c,h,w]."""
    if f.ndim != 4 or l.ndim != 4 or l.shape[1] != 1:
        raise ShapeError(f"expected feature [N,C,H,W] and local map [N,1,H,W], got {f.shape}/{l.shape}")
    if g.shape != (f.shape[0],):
        raise ShapeError(f"global scale must be per-sample [N], got {g.shape}")
    if l.shape[2:] != f.shape[2:] or l.shape[0] != f.shape[0]:
        raise ShapeError(f"local map dims {l.shape} do not match feature {f.shape}")
    return (g.reshape(-1, 1, 1, 1) * l) * f


def scale_broadcast_mul_backward(gy, f, g, l):
    """Gradients w.r.t. (feature, global scalar, local map)."""
    gl_full = g.reshape(-1, 1, 1, 1) * l
    gf = gl_full * gy
    gg = (l * f * gy).sum(axis=(1, 2, 3))
    gl = g.reshape(-1, 1, 1, 1) * (f * gy).sum(axis=1, keepdims=True)
    return gf, gg, gl


def box_sum(m, radius):
    """Sliding window sum over [h-r, h+r) x [w-r, w+r), zero padded.

    Integral-image implementation, O(H*W) independent of radius.
    """
    if m.ndim != 2:
        raise ShapeError(f"box_sum expects a 2-D map, got rank {m.ndim}")
    if radius < 0:
        raise ShapeError(f"radius must be >= 0, got {radius}")
    h, wd = m.shape
    integ = np.zeros((h + 1, wd + 1), dtype=m.dtype)
    integ[1:, 1:] = m.cumsum(axis=0).cumsum(axis=1)
    rows = np.arange(h)
    cols = np.arange(wd)
    top = np.clip(rows - radius, 0, h)
    bot = np.clip(rows + radius, 0, h)
    left = np.clip(cols - radius, 0, wd)
    right = np.clip(cols + radius, 0, wd)
    return (
        integ[np.ix_(bot, right)]
        - integ[np.ix_(top, right)]
        - integ[np.ix_(bot, left)]
        + integ[np.ix_(top, left)]
    )
