"""Layer-wise relevance propagation (epsilon rule) for the two-branch model.

The prediction for a pair is split across the distance head onto both
feature vectors, then pushed down each branch of the layer stack to pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import atomic_write, encode_pnm
from .errors import DimensionError, IntegrityError
from .metric import UserMetric, distance, link_probability
from .network import LayerStack, forward

RELEVANCE_SOURCES = ("probability", "neg_distance")


def _sign(z):
    # sign(0) counts as +1 so the stabilizer never vanishes
    return np.where(z >= 0, 1.0, -1.0)


def _stabilized_ratio(R_out, z, epsilon):
    denom = z + epsilon * _sign(z)
    safe = np.where(denom == 0, 1.0, denom)
    return np.where(denom == 0, 0.0, R_out / safe)


def propagate_dense(R_out, inputs, weights, epsilon: float = 0.0, bias=None):
    """Epsilon rule through ``y = W x (+ b)``; leading batch axes are allowed.

    The bias enters the denominator but receives no relevance itself.
    """
    R_out = np.asarray(R_out, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or inputs.shape[-1] != weights.shape[1] or R_out.shape[-1] != weights.shape[0] \
            or R_out.shape[:-1] != inputs.shape[:-1]:
        raise DimensionError(
            f"dense relevance shapes disagree: R_out {R_out.shape}, inputs {inputs.shape}, weights {weights.shape}"
        )
    z = inputs @ weights.T
    if bias is not None:
        z = z + bias
    s = _stabilized_ratio(R_out, z, epsilon)
    return inputs * (s @ weights)


def propagate_conv(R_out, inputs, kernels, stride: int = 1, pad: int = 0, epsilon: float = 0.0, bias=None):
    """Epsilon rule through a convolution without unrolling it.

    Uses ``R_in = x * conv_transpose(R_out / z)``, which equals the dense
    rule applied to the convolution's unrolled weight matrix.
    """
    R_out = np.asarray(R_out, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    z = T.conv2d(inputs, kernels, stride, pad)
    if z.shape != R_out.shape:
        raise DimensionError(f"conv relevance shape {R_out.shape} does not match layer output {z.shape}")
    if bias is not None:
        z = z + np.asarray(bias)[:, None, None]
    s = _stabilized_ratio(R_out, z, epsilon)
    return inputs * T.conv2d_grad_input(s, kernels, inputs.shape, stride, pad)


def propagate_relu(R_out, inputs):
    """Relevance passes where the ReLU was active and stops elsewhere."""
    if inputs is None:
        raise IntegrityError("ReLU relevance needs the layer input from the forward trace")
    return np.asarray(R_out, dtype=np.float64) * (np.asarray(inputs) > 0)


def propagate_maxpool(R_out, indices, input_shape):
    """Winner-take-all: each window's relevance goes to its argmax pixel."""
    if indices is None:
        raise IntegrityError("max-pool relevance needs the argmax map from the forward trace")
    return T.maxpool2d_scatter(R_out, indices, input_shape)


def propagate_distance_head(metric: UserMetric, xi, xj, R_total: float, epsilon: float = 0.0):
    """Split ``R_total`` over both feature vectors through ``d = delta M delta``.

    Coordinate ``a`` of ``delta = xi - xj`` gets ``z_a = delta_a (M delta)_a``
    (these sum to ``d``), normalized by ``d + epsilon``. Each coordinate's
    share then goes to ``xi_a`` and ``xj_a`` in proportion to their
    magnitudes (half each when both are zero). When ``d + epsilon`` is zero
    the relevance is spread evenly over coordinates.
    """
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    k = metric.factor.shape[1]
    if xi.shape != (k,) or xj.shape != (k,):
        raise DimensionError(f"feature vectors must have length {k}, got {xi.shape} and {xj.shape}")
    delta = xi - xj
    z = delta * (metric.factor.T @ (metric.factor @ delta))
    total = z.sum()
    denom = total + epsilon * (1.0 if total >= 0 else -1.0)
    if denom == 0:
        R_delta = np.full(k, R_total / k)
    else:
        R_delta = z / denom * R_total
    ai, aj = np.abs(xi), np.abs(xj)
    both = ai + aj
    share = np.divide(ai, both, out=np.full(k, 0.5), where=both > 0)
    return R_delta * share, R_delta * (1.0 - share)


def start_relevance(metric: UserMetric, xi, xj, source: str = "probability") -> float:
    if source == "probability":
        return link_probability(metric, xi, xj)
    if source == "neg_distance":
        return -distance(metric, xi, xj)
    raise ValueError(f"unknown relevance source {source!r}; expected one of {RELEVANCE_SOURCES}")


@dataclass
class RelevanceTrace:
    """``layers[l]`` is the relevance of the input to layer ``l`` (layer 0: pixels)."""
    layers: list
    features: np.ndarray
    epsilon: float
    prediction: float

    def sums(self) -> list:
        return [float(r.sum()) for r in self.layers] + [float(self.features.sum())]


def relevance_backward(stack: LayerStack, trace, R_features, epsilon: float = 0.0) -> list:
    """Push feature relevance down to the input; returns one tensor per layer input."""
    if len(trace.inputs) != len(stack.specs):
        raise IntegrityError("forward trace does not belong to this stack")
    R = np.asarray(R_features, dtype=np.float64)
    out = [None] * len(stack.specs)
    for idx in range(len(stack.specs) - 1, -1, -1):
        spec, p, x = stack.specs[idx], stack.params[idx], trace.inputs[idx]
        if spec.kind == "dense":
            R = propagate_dense(R, x, p["weight"], epsilon, p.get("bias"))
        elif spec.kind == "conv":
            R = propagate_conv(R, x, p["weight"], spec.stride, spec.pad, epsilon, p.get("bias"))
        elif spec.kind == "relu":
            R = propagate_relu(R, x)
        elif spec.kind == "maxpool":
            R = propagate_maxpool(R, trace.pool_indices.get(idx), x.shape)
        else:
            R = R.reshape(x.shape)
        out[idx] = R
    return out


@dataclass
class HeatmapPair:
    heatmap_i: np.ndarray  # [H, W], channel-summed
    heatmap_j: np.ndarray
    prediction: float
    ranking: np.ndarray  # [2*H*W, 3] rows of (branch, row, col), descending |relevance|
    trace_i: RelevanceTrace | None = None
    trace_j: RelevanceTrace | None = None

    @property
    def total(self) -> float:
        return float(self.heatmap_i.sum() + self.heatmap_j.sum())


def rank_pixels(heatmap_i, heatmap_j) -> np.ndarray:
    """Global ranking of both heatmaps' pixels by descending magnitude.

    Ties keep branch-i-first, row-major order.
    """
    h, w = heatmap_i.shape
    mags = np.concatenate([np.abs(heatmap_i).ravel(), np.abs(heatmap_j).ravel()])
    order = np.argsort(-mags, kind="stable")
    branch, rest = np.divmod(order, h * w)
    row, col = np.divmod(rest, w)
    return np.stack([branch, row, col], axis=1)


def explain_pair(stack: LayerStack, metric: UserMetric, image_i, image_j, epsilon: float = 0.0,
                 relevance_source: str = "probability") -> HeatmapPair:
    tr_i = forward(stack, image_i)
    tr_j = forward(stack, image_j)
    xi, xj = tr_i.features, tr_j.features
    prediction = start_relevance(metric, xi, xj, relevance_source)
    R_xi, R_xj = propagate_distance_head(metric, xi, xj, prediction, epsilon)
    layers_i = relevance_backward(stack, tr_i, R_xi, epsilon)
    layers_j = relevance_backward(stack, tr_j, R_xj, epsilon)
    hm_i = layers_i[0].sum(axis=0)
    hm_j = layers_j[0].sum(axis=0)
    return HeatmapPair(
        heatmap_i=hm_i,
        heatmap_j=hm_j,
        prediction=prediction,
        ranking=rank_pixels(hm_i, hm_j),
        trace_i=RelevanceTrace(layers_i, R_xi, epsilon, prediction),
        trace_j=RelevanceTrace(layers_j, R_xj, epsilon, prediction),
    )


# -- export ------------------------------------------------------------------

def heatmap_csv(heatmap) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(heatmap))


def save_heatmap_csv(heatmap, path) -> None:
    atomic_write(path, heatmap_csv(heatmap))


def save_heatmap_pgm(heatmap, path) -> dict:
    """8-bit PGM after the affine map ``byte = round((v - offset) * scale)``.

    The map is written to a ``.json`` sidecar next to the image and returned.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    lo, hi = float(hm.min()), float(hm.max())
    scale = 255.0 / (hi - lo) if hi > lo else 1.0
    pixels = np.clip(np.rint((hm - lo) * scale), 0, 255).astype(np.uint8)
    path = Path(path)
    atomic_write(path, encode_pnm(pixels[None]))
    sidecar = {"offset": lo, "scale": scale, "min": lo, "max": hi}
    atomic_write(path.with_suffix(".json"), json.dumps(sidecar, sort_keys=True) + "\n")
    return sidecar


def overlay(heatmap, image, alpha: float = 0.6) -> np.ndarray:
    """RGB float image: positive relevance in red, negative in blue, blended over ``image``."""
    hm = np.asarray(heatmap, dtype=np.float64)
    peak = np.abs(hm).max()
    norm = hm / peak if peak > 0 else hm
    color = np.stack([np.clip(norm, 0, 1), np.zeros_like(norm), np.clip(-norm, 0, 1)])
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return alpha * color + (1.0 - alpha) * img


def save_overlay_ppm(heatmap, image, path) -> None:
    rgb = overlay(heatmap, image)
    atomic_write(path, encode_pnm(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)))
