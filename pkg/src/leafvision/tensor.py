"""Dense numeric kernels shared by every other module.

Tensors are plain numpy ndarrays in row-major order; float32 is the
production dtype. Reductions accumulate in float64 and cast back to the
widest input dtype, so the same kernels run at full double precision when
fed float64 arrays (the gradient-check tests rely on this).

Convolution uses cross-correlation semantics (no kernel flip), and
``conv2d_transpose`` is its exact linear adjoint with the bias omitted: for
any x, y of matching shapes, <conv(x), y> == <x, transpose(y)>. One adjoint
serves both backpropagation and feature-map projection to pixel space.
"""

import struct
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SwitchMap:
    """Argmax locations recorded by one max-pooling application.

    ``indices[k]`` is the flat coordinate, into the pre-pooling tensor, of
    the element that won pooled output ``k``. Ties break to the lowest flat
    index so switch-based reconstruction is deterministic.
    """

    output_shape: tuple
    input_shape: tuple
    indices: np.ndarray


def _require(cond, message):
    if not cond:
        raise ValueError(message)


def _im2col(x, kh, kw, stride, pad):
    """Unfold (C,H,W) into a (C*kh*kw, out_h*out_w) patch matrix."""
    c, h, w = x.shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    img = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, out_h, out_w), dtype=x.dtype)
    for dy in range(kh):
        y_end = dy + stride * out_h
        for dx in range(kw):
            x_end = dx + stride * out_w
            cols[:, dy, dx] = img[:, dy:y_end:stride, dx:x_end:stride]
    return cols.reshape(c * kh * kw, out_h * out_w), out_h, out_w


def _col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of ``_im2col``: scatter-add columns back onto a (C,H,W) canvas."""
    c, h, w = shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    img = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    cols = cols.reshape(c, kh, kw, out_h, out_w)
    for dy in range(kh):
        y_end = dy + stride * out_h
        for dx in range(kw):
            x_end = dx + stride * out_w
            img[:, dy:y_end:stride, dx:x_end:stride] += cols[:, dy, dx]
    if pad:
        img = img[:, pad:pad + h, pad:pad + w]
    return img


def _validate_conv_geometry(c_in, c_out, kc, kh, kw, stride, pad, groups, in_shape, k_shape):
    _require(stride >= 1, f"stride must be positive, got {stride}")
    _require(pad >= 0, f"pad must be non-negative, got {pad}")
    _require(groups >= 1, f"groups must be positive, got {groups}")
    _require(c_in % groups == 0 and c_out % groups == 0,
             f"groups={groups} must divide input channels {c_in} and kernel count {c_out}")
    if kc * groups != c_in:
        raise ValueError(
            f"kernel bank {k_shape} does not match input {in_shape} with "
            f"groups={groups}: expected per-kernel depth {c_in // groups}, got {kc}")


def conv2d_forward(x, kernels, bias, stride=1, pad=0, groups=1):
    """Cross-correlate ``x`` (C_in,H,W) with ``kernels`` (C_out,C_in/g,kh,kw).

    Zero padding, floor output sizing: out = (H + 2*pad - kh)//stride + 1.
    With ``groups`` > 1 the channels are partitioned into independent groups
    (as in the grouped layers whose kernels see only half the input depth).
    """
    _require(x.ndim == 3, f"input must be (C,H,W), got shape {x.shape}")
    _require(kernels.ndim == 4, f"kernels must be (C_out,C_in/g,kh,kw), got shape {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    _validate_conv_geometry(c_in, c_out, kc, kh, kw, stride, pad, groups, x.shape, kernels.shape)
    _require(h + 2 * pad >= kh and w + 2 * pad >= kw,
             f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    bias = np.asarray(bias)
    _require(bias.shape == (c_out,), f"bias shape {bias.shape} != ({c_out},)")

    cols, out_h, out_w = _im2col(x, kh, kw, stride, pad)
    cols64 = cols.astype(np.float64, copy=False)
    k64 = kernels.astype(np.float64, copy=False).reshape(c_out, kc * kh * kw)
    out = np.empty((c_out, out_h * out_w), dtype=np.float64)
    cog, rows = c_out // groups, kc * kh * kw
    for g in range(groups):
        out[g * cog:(g + 1) * cog] = k64[g * cog:(g + 1) * cog] @ cols64[g * rows:(g + 1) * rows]
    out += bias.astype(np.float64)[:, None]
    return out.reshape(c_out, out_h, out_w).astype(np.result_type(x.dtype, kernels.dtype))


def conv2d_transpose(maps, kernels, stride=1, pad=0, groups=1, output_hw=None):
    """Exact linear adjoint of ``conv2d_forward`` (bias omitted).

    ``output_hw`` pins the reconstructed spatial extent when the forward
    stride did not divide evenly; by default the minimal consistent extent
    (out_h-1)*stride + kh - 2*pad is used. Geometry that no forward call
    could have produced is rejected.
    """
    _require(maps.ndim == 3, f"maps must be (C_out,H',W'), got shape {maps.shape}")
    _require(kernels.ndim == 4, f"kernels must be (C_out,C_in/g,kh,kw), got shape {kernels.shape}")
    c_out, out_h, out_w = maps.shape
    ck, kc, kh, kw = kernels.shape
    if ck != c_out:
        raise ValueError(f"kernel bank {kernels.shape} does not match maps {maps.shape}: "
                         f"expected {c_out} kernels, got {ck}")
    c_in = kc * groups
    _validate_conv_geometry(c_in, c_out, kc, kh, kw, stride, pad, groups, (c_in,), kernels.shape)
    if output_hw is None:
        h = (out_h - 1) * stride + kh - 2 * pad
        w = (out_w - 1) * stride + kw - 2 * pad
    else:
        h, w = output_hw
    _require(h >= 1 and w >= 1, f"reconstructed extent {h}x{w} is not positive")
    if ((h + 2 * pad - kh) // stride + 1 != out_h
            or (w + 2 * pad - kw) // stride + 1 != out_w
            or h + 2 * pad < kh or w + 2 * pad < kw):
        raise ValueError(
            f"stride={stride} pad={pad} kernel {kh}x{kw} cannot map an input of "
            f"{h}x{w} onto maps of {out_h}x{out_w}")

    m64 = maps.astype(np.float64, copy=False).reshape(c_out, out_h * out_w)
    k64 = kernels.astype(np.float64, copy=False).reshape(c_out, kc * kh * kw)
    cols = np.empty((c_in * kh * kw, out_h * out_w), dtype=np.float64)
    cog, rows = c_out // groups, kc * kh * kw
    for g in range(groups):
        cols[g * rows:(g + 1) * rows] = k64[g * cog:(g + 1) * cog].T @ m64[g * cog:(g + 1) * cog]
    img = _col2im(cols, (c_in, h, w), kh, kw, stride, pad)
    return img.astype(np.result_type(maps.dtype, kernels.dtype))


def conv2d_backward(x, grad_out, kernels, stride=1, pad=0, groups=1):
    """Gradients of a conv layer: returns (d_kernels, d_bias, d_input).

    ``x`` is the layer input that produced ``grad_out`` under ``kernels``;
    d_input is computed through the same adjoint used for projection.
    """
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    _require(grad_out.shape[0] == c_out,
             f"grad shape {grad_out.shape} does not match {c_out} kernels")
    cols, out_h, out_w = _im2col(x, kh, kw, stride, pad)
    _require(grad_out.shape == (c_out, out_h, out_w),
             f"grad shape {grad_out.shape} != expected {(c_out, out_h, out_w)}")
    g64 = grad_out.astype(np.float64, copy=False).reshape(c_out, out_h * out_w)
    cols64 = cols.astype(np.float64, copy=False)
    dk = np.empty((c_out, kc * kh * kw), dtype=np.float64)
    cog, rows = c_out // groups, kc * kh * kw
    for g in range(groups):
        dk[g * cog:(g + 1) * cog] = g64[g * cog:(g + 1) * cog] @ cols64[g * rows:(g + 1) * rows].T
    dtype = np.result_type(x.dtype, kernels.dtype, grad_out.dtype)
    d_kernels = dk.reshape(kernels.shape).astype(dtype)
    d_bias = g64.sum(axis=1).astype(dtype)
    d_input = conv2d_transpose(grad_out, kernels, stride, pad, groups, output_hw=(h, w))
    return d_kernels, d_bias, d_input


def maxpool_forward(x, window, stride):
    """Max pooling with recorded switches.

    Returns the pooled (C,H',W') tensor and a SwitchMap whose flat indices
    point at each window's argmax in ``x``; ties break to the lowest flat
    index.
    """
    _require(x.ndim == 3, f"input must be (C,H,W), got shape {x.shape}")
    _require(window >= 1, f"window must be positive, got {window}")
    _require(stride >= 1, f"stride must be positive, got {stride}")
    c, h, w = x.shape
    _require(window <= h and window <= w,
             f"window {window} exceeds input extent {h}x{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    patches = np.empty((c, window * window, out_h, out_w), dtype=x.dtype)
    for dy in range(window):
        y_end = dy + stride * out_h
        for dx in range(window):
            x_end = dx + stride * out_w
            patches[:, dy * window + dx] = x[:, dy:y_end:stride, dx:x_end:stride]
    flat = patches.reshape(c, window * window, out_h * out_w)
    arg = flat.argmax(axis=1)
    pooled = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]
    pos = np.arange(out_h * out_w)
    y = (pos // out_w) * stride + arg // window
    xx = (pos % out_w) * stride + arg % window
    indices = (np.arange(c)[:, None] * (h * w) + y * w + xx).ravel().astype(np.int64)
    return pooled.reshape(c, out_h, out_w), SwitchMap((c, out_h, out_w), (c, h, w), indices)


def unpool(pooled, switches, target_shape):
    """Scatter pooled values back through their switches onto ``target_shape``.

    Positions no switch points at stay zero; when overlapping windows share
    an argmax the contributions sum (the adjoint-of-pooling convention).
    """
    _require(tuple(pooled.shape) == tuple(switches.output_shape),
             f"pooled shape {pooled.shape} != switch map shape {switches.output_shape}")
    total = int(np.prod(target_shape))
    idx = switches.indices
    _require(idx.shape == (pooled.size,),
             f"switch map holds {idx.size} indices for {pooled.size} pooled values")
    if idx.size and (idx.min() < 0 or idx.max() >= total):
        raise ValueError(f"switch index out of bounds for target shape {tuple(target_shape)}")
    out = np.zeros(total, dtype=np.float64)
    np.add.at(out, idx, pooled.ravel().astype(np.float64, copy=False))
    return out.reshape(target_shape).astype(pooled.dtype)


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def fc_forward(x, weights, bias):
    """Dense layer: weights (units, in_features) @ x + bias."""
    _require(x.ndim == 1, f"fc input must be a vector, got shape {x.shape}")
    _require(weights.ndim == 2 and weights.shape[1] == x.shape[0],
             f"weight matrix {weights.shape} does not accept input of length {x.shape[0]}")
    _require(bias.shape == (weights.shape[0],),
             f"bias shape {bias.shape} != ({weights.shape[0]},)")
    out = weights.astype(np.float64, copy=False) @ x.astype(np.float64, copy=False)
    out += bias.astype(np.float64, copy=False)
    return out.astype(np.result_type(x.dtype, weights.dtype))


def softmax(logits):
    """Numerically stable softmax (shifted by the max logit)."""
    _require(logits.ndim == 1, f"softmax input must be a vector, got shape {logits.shape}")
    z = logits.astype(np.float64, copy=False)
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(logits.dtype)


# ---------------------------------------------------------------------------
# Serialization: version byte, rank, little-endian extents, dtype code, data.
# Used inside checkpoints and feature files.

TENSOR_FORMAT_VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.int32): 1, np.dtype(np.float64): 2}


def write_tensor(fh, arr):
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported tensor dtype {arr.dtype}")
    _require(arr.ndim <= 255, "tensor rank exceeds format limit")
    fh.write(struct.pack("<BB", TENSOR_FORMAT_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", code))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated tensor data: wanted {n} bytes for {what} "
                         f"at offset {fh.tell() - len(data)}")
    return data


def read_tensor(fh):
    version, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
    if version != TENSOR_FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version} "
                         f"at offset {fh.tell() - 2}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor extents"))
    if any(s == 0 for s in shape):
        raise ValueError(f"zero extent in serialized tensor shape {shape}")
    (code,) = struct.unpack("<B", _read_exact(fh, 1, "tensor dtype"))
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise ValueError(f"unknown tensor dtype code {code} at offset {fh.tell() - 1}")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(fh, count * dtype.itemsize, "tensor payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
