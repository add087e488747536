"""Dense float64 tensors and the numeric kernels the network is built from.

A tensor is a plain ``numpy.ndarray`` of dtype float64 in row-major order.
Image-shaped kernels take ``[C, H, W]`` inputs; they also accept a leading
batch axis ``[N, C, H, W]`` so the training loop can push many images
through one call.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

Tensor = np.ndarray


def as_tensor(values) -> Tensor:
    return np.ascontiguousarray(values, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _check_image(x: Tensor, name: str) -> None:
    if x.ndim not in (3, 4):
        raise DimensionError(f"{name} must be [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent of a convolution; exact division is required."""
    if stride < 1 or pad < 0 or kernel < 1:
        raise ConfigError(f"invalid geometry kernel={kernel} stride={stride} pad={pad}")
    span = size + 2 * pad - kernel
    if span < 0:
        raise ConfigError(f"kernel {kernel} larger than padded extent {size + 2 * pad}")
    if span % stride:
        raise ConfigError(
            f"extent {size} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _pad(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths)


def _windows(xp: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    # [..., C, H', W', kh, kw] view over the padded input
    win = sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :]


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation without bias.

    ``kernels`` has shape ``[C_out, C_in, kh, kw]``; the result is
    ``[C_out, H', W']`` (or ``[N, C_out, H', W']`` for batched input).
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    _check_image(x, "conv2d input")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be [C_out,C_in,kh,kw], got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[-3] != c_in:
        raise DimensionError(
            f"input has {x.shape[-3]} channels but kernels {kernels.shape} expect {c_in}"
        )
    h_out = conv_output_size(x.shape[-2], kh, stride, pad)
    w_out = conv_output_size(x.shape[-1], kw, stride, pad)
    win = _windows(_pad(x, pad), kh, kw, stride)
    assert win.shape[-4:-2] == (h_out, w_out)
    nd = win.ndim
    out = np.tensordot(win, kernels, axes=([nd - 5, nd - 2, nd - 1], [1, 2, 3]))
    # tensordot leaves [..., H', W', C_out]
    return np.ascontiguousarray(np.moveaxis(out, -1, -3))


def conv2d_grad_input(
    grad_out: Tensor, kernels: Tensor, input_shape: tuple, stride: int = 1, pad: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input (transposed convolution)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    c_out, c_in, kh, kw = kernels.shape
    h, w = input_shape[-2:]
    h_out, w_out = grad_out.shape[-2:]
    lead = grad_out.shape[:-3]
    gp = np.zeros(lead + (c_in, h + 2 * pad, w + 2 * pad))
    # move C_out last so each tap is one matmul
    g = np.moveaxis(grad_out, -3, -1)
    h_end = stride * (h_out - 1) + 1
    w_end = stride * (w_out - 1) + 1
    for i in range(kh):
        for j in range(kw):
            contrib = g @ kernels[:, :, i, j]  # [..., H', W', C_in]
            gp[..., :, i:i + h_end:stride, j:j + w_end:stride] += np.moveaxis(contrib, -1, -3)
    if pad:
        gp = gp[..., pad:-pad, pad:-pad]
    return np.ascontiguousarray(gp)


def conv2d_grad_kernels(
    x: Tensor, grad_out: Tensor, kernel_shape: tuple, stride: int = 1, pad: int = 0
) -> Tensor:
    """Gradient of ``sum(conv2d(x, K) * grad_out)`` with respect to ``K``.

    A leading batch axis on ``x`` and ``grad_out`` is summed over.
    """
    _, _, kh, kw = kernel_shape
    win = _windows(_pad(np.asarray(x, dtype=np.float64), pad), kh, kw, stride)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if win.ndim == 6:
        # [N,C,H',W',kh,kw] x [N,O,H',W'] -> [O,C,kh,kw]
        out = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    else:
        out = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
    return np.ascontiguousarray(out)


def maxpool2d(x: Tensor, window: int, stride: int) -> tuple[Tensor, np.ndarray]:
    """Max pooling with an argmax map.

    The index map holds, per output cell, the row-major flat position
    ``row * W + col`` of the winning input pixel within its channel plane.
    Ties go to the lowest such position.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_image(x, "maxpool2d input")
    if window < 1 or stride < 1:
        raise ConfigError(f"invalid pooling window={window} stride={stride}")
    h, w = x.shape[-2:]
    for extent in (h, w):
        if extent < window or (extent - window) % stride:
            raise ConfigError(
                f"pooling window {window} stride {stride} does not tile extent {extent}"
            )
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    win = _windows(x, window, window, stride)
    flat = win.reshape(win.shape[:-2] + (window * window,))
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(h_out)[:, None] * stride + local // window
    cols = np.arange(w_out)[None, :] * stride + local % window
    return np.ascontiguousarray(out), rows * w + cols


def maxpool2d_scatter(values: Tensor, indices: np.ndarray, input_shape: tuple) -> Tensor:
    """Route each pooled value back to its winning input pixel (sums collisions)."""
    values = np.asarray(values, dtype=np.float64)
    h, w = input_shape[-2:]
    lead = values.shape[:-2]
    m = int(np.prod(lead)) if lead else 1
    flat_vals = values.reshape(m, -1)
    flat_idx = indices.reshape(m, -1)
    offsets = (np.arange(m) * (h * w))[:, None]
    out = np.bincount(
        (flat_idx + offsets).ravel(), weights=flat_vals.ravel(), minlength=m * h * w
    )
    return out.reshape(lead + (h, w))
