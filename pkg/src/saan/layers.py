"""A tiny sequential-stack engine over the core ops.

Sub-networks are declared as lists of layer specs:

    ("conv0",   "conv",   k, out_channels, "relu"|"linear")
    ("pool0",   "pool")                      # 2x2 max pool, stride 2
    ("deconv0", "deconv", out_channels, "relu"|"linear")  # exact x2 up
    ("gap",     "gap")                       # global average pool -> [N,C]
    ("fc0",     "fc",     out_features, "relu"|"linear")

Parameters live in a flat name->array map under "<prefix>.<layer>.weight"
/ ".bias". Pools auto-pad odd inputs with zeros on the bottom/right edge
(the backward crops the gradient, so this is gradient-exact). The engine
returns per-layer caches that the matching backward consumes.
"""

import numpy as np

from . import ops
from .errors import ShapeError


def spec_params(prefix, spec, in_channels):
    """Walk a layer spec and yield (name, shape, fan_in) for each tensor."""
    out = []
    c = in_channels
    for entry in spec:
        name, kind = entry[0], entry[1]
        base = f"{prefix}.{name}"
        if kind == "conv":
            k, cout = entry[2], entry[3]
            out.append((f"{base}.weight", (cout, c, k, k), c * k * k))
            out.append((f"{base}.bias", (cout,), c * k * k))
            c = cout
        elif kind == "deconv":
            cout = entry[2]
            out.append((f"{base}.weight", (c, cout, 4, 4), c * 16))
            out.append((f"{base}.bias", (cout,), c * 16))
            c = cout
        elif kind == "fc":
            dout = entry[2]
            out.append((f"{base}.weight", (c, dout), c))
            out.append((f"{base}.bias", (dout,), c))
            c = dout
        elif kind in ("pool", "gap"):
            pass
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return out


def _pad_to_even(x):
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return x


def _apply_act(pre, act):
    if act == "relu":
        return ops.relu(pre)
    if act == "linear":
        return pre
    raise ValueError(f"unknown activation {act!r}")


def _act_backward(gy, pre, act):
    if act == "relu":
        return ops.relu_backward(gy, pre)
    return gy


def seq_forward(x, params, prefix, spec):
    """Run the stack; returns (output, caches) for seq_backward."""
    caches = []
    for entry in spec:
        name, kind = entry[0], entry[1]
        base = f"{prefix}.{name}"
        if kind == "conv":
            act = entry[4]
            pre = ops.conv2d(x, params[f"{base}.weight"], params[f"{base}.bias"])
            caches.append((kind, base, x, pre, act))
            x = _apply_act(pre, act)
        elif kind == "deconv":
            act = entry[3]
            pre = ops.conv2d_transpose(x, params[f"{base}.weight"], params[f"{base}.bias"])
            caches.append((kind, base, x, pre, act))
            x = _apply_act(pre, act)
        elif kind == "fc":
            act = entry[3]
            pre = ops.fully_connected(x, params[f"{base}.weight"], params[f"{base}.bias"])
            caches.append((kind, base, x, pre, act))
            x = _apply_act(pre, act)
        elif kind == "pool":
            orig_shape = x.shape
            xp = _pad_to_even(x)
            y, idx = ops.maxpool2(xp)
            caches.append((kind, base, orig_shape, xp.shape, idx))
            x = y
        elif kind == "gap":
            if x.ndim != 4:
                raise ShapeError(f"gap expects [N,C,H,W], got rank {x.ndim}")
            caches.append((kind, base, x.shape, None, None))
            x = x.mean(axis=(2, 3))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return x, caches


def seq_backward(gy, caches, params):
    """Walk the caches in reverse; returns (input grad, param grads)."""
    grads = {}
    for cache in reversed(caches):
        kind, base = cache[0], cache[1]
        if kind == "conv":
            _, _, x_in, pre, act = cache
            gpre = _act_backward(gy, pre, act)
            gy, gw, gb = ops.conv2d_backward(gpre, x_in, params[f"{base}.weight"])
            grads[f"{base}.weight"] = gw
            grads[f"{base}.bias"] = gb
        elif kind == "deconv":
            _, _, x_in, pre, act = cache
            gpre = _act_backward(gy, pre, act)
            gy, gw, gb = ops.conv2d_transpose_backward(gpre, x_in, params[f"{base}.weight"])
            grads[f"{base}.weight"] = gw
            grads[f"{base}.bias"] = gb
        elif kind == "fc":
            _, _, x_in, pre, act = cache
            gpre = _act_backward(gy, pre, act)
            gy, gw, gb = ops.fully_connected_backward(gpre, x_in, params[f"{base}.weight"])
            grads[f"{base}.weight"] = gw
            grads[f"{base}.bias"] = gb
        elif kind == "pool":
            _, _, orig_shape, padded_shape, idx = cache
            gx = ops.maxpool2_backward(gy, idx, padded_shape)
            gy = gx[:, :, : orig_shape[2], : orig_shape[3]]
        elif kind == "gap":
            _, _, in_shape, _, _ = cache
            n, c, h, w = in_shape
            gy = np.broadcast_to(gy[:, :, None, None], in_shape) / (h * w)
    return gy, grads
