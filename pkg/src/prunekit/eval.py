"""Naive forward evaluator.

Exists as a correctness oracle for surgery and serialization tests, not as an
inference engine: direct convolution, inference-mode batch norm, plain pooling.
Computation runs in float64 for stable comparisons.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .graph import ModelGraph


def forward_eval(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Evaluate the graph on a single input of shape (channels, size, size)."""
    if not graph.inferred:
        raise ShapeError("run infer_shapes before forward_eval")
    x = np.asarray(x, dtype=np.float64)
    expect = (graph.input_channels, graph.input_size, graph.input_size)
    if x.shape != expect:
        raise ShapeError(f"input shape {x.shape} does not match declared {expect}")

    values: dict[str, np.ndarray] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.kind == "Input":
            values[nid] = x
            continue
        args = [values[i] for i in node.inputs]
        a = args[0]
        if node.kind == "Conv2d":
            values[nid] = _conv2d(node, a)
        elif node.kind == "Linear":
            w = node.weight().astype(np.float64)
            sel = node.in_select()
            v = a if sel is None else a[sel]
            y = w @ v
            if "bias" in node.tensors:
                y = y + node.tensors["bias"].data.astype(np.float64)
            values[nid] = y
        elif node.kind == "BatchNorm2d":
            g = node.tensors["gamma"].data.astype(np.float64)
            b = node.tensors["beta"].data.astype(np.float64)
            mu = node.tensors["running_mean"].data.astype(np.float64)
            var = node.tensors["running_var"].data.astype(np.float64)
            eps = float(node.attrs.get("epsilon", 1e-5))
            scale = g / np.sqrt(var + eps)
            values[nid] = a * scale[:, None, None] + (b - mu * scale)[:, None, None]
        elif node.kind == "ReLU":
            values[nid] = np.maximum(a, 0.0)
        elif node.kind == "Pool":
            values[nid] = _pool(node, a)
        elif node.kind == "Flatten":
            values[nid] = a.reshape(-1)  # channel-major
        elif node.kind == "Add":
            acc = args[0]
            for other in args[1:]:
                acc = acc + other
            values[nid] = acc
        elif node.kind == "Concat":
            values[nid] = np.concatenate(args, axis=0)
        elif node.kind == "Output":
            values[nid] = a
        else:
            raise ShapeError(f"{nid}: cannot evaluate kind {node.kind!r}")
    return values[graph.output_node().id]


def _conv2d(node, a: np.ndarray) -> np.ndarray:
    w = node.weight().astype(np.float64)
    sel = node.in_select()
    if sel is not None:
        a = a[sel]
    n, m, k, _ = w.shape
    stride = int(node.attrs.get("stride", 1))
    pad = int(node.attrs.get("padding", 0))
    if pad:
        a = np.pad(a, ((0, 0), (pad, pad), (pad, pad)))
    size = a.shape[1]
    o = (size - k) // stride + 1
    out = np.empty((n, o, o), dtype=np.float64)
    for oy in range(o):
        for ox in range(o):
            patch = a[:, oy * stride : oy * stride + k, ox * stride : ox * stride + k]
            out[:, oy, ox] = np.tensordot(w, patch, axes=3)
    if "bias" in node.tensors:
        out += node.tensors["bias"].data.astype(np.float64)[:, None, None]
    return out


def _pool(node, a: np.ndarray) -> np.ndarray:
    mode = node.attrs["pool"]
    if mode == "global-avg":
        return a.mean(axis=(1, 2), keepdims=True)
    k = int(node.attrs["kernel"])
    stride = int(node.attrs["stride"])
    c, size, _ = a.shape
    o = (size - k) // stride + 1
    out = np.empty((c, o, o), dtype=np.float64)
    for oy in range(o):
        for ox in range(o):
            window = a[:, oy * stride : oy * stride + k, ox * stride : ox * stride + k]
            out[:, oy, ox] = window.max(axis=(1, 2)) if mode == "max" else window.mean(axis=(1, 2))
    return out
