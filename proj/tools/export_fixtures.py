#!/usr/bin/env python3
"""Regenerate the bundled test fixtures.

Each bundle is a directory holding model.json (model-exchange format),
probes.json (inputs plus float64 reference outputs from the numpy forward
below) and provenance.json. Weights are random; nothing is trained.

    python3 tools/export_fixtures.py tests/fixtures
"""

import json
import os
import sys

import numpy as np


def dense(W, b):
    return {"kind": "dense", "W": W.tolist(), "b": b.tolist()}


def conv(K, b, stride, padding):
    return {"kind": "conv2d", "kernel": K.tolist(), "b": b.tolist(),
            "stride": list(stride), "padding": list(padding)}


def gcn(adj, W, b):
    r, c = np.nonzero(adj)
    return {"kind": "gcn",
            "adjacency": {"n": int(adj.shape[0]), "rows": r.tolist(), "cols": c.tolist(),
                          "vals": adj[r, c].tolist()},
            "W": W.tolist(), "b": b.tolist()}


# ---- numpy reference forward ----

def conv_forward(x, L):
    K = np.array(L["kernel"])
    b = np.array(L["b"])
    sy, sx = L["stride"]
    py, px = L["padding"]
    co, ci, ky, kx = K.shape
    xp = np.pad(x, ((0, 0), (py, py), (px, px)))
    Ho = (xp.shape[1] - ky) // sy + 1
    Wo = (xp.shape[2] - kx) // sx + 1
    out = np.zeros((co, Ho, Wo))
    for o in range(co):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, i * sy:i * sy + ky, j * sx:j * sx + kx]
                out[o, i, j] = np.sum(patch * K[o]) + b[o]
    return out


def forward(model, x):
    h = np.array(x, dtype=np.float64).reshape(model["input_shape"])
    for L in model["layers"]:
        k = L["kind"]
        if k == "dense":
            h = np.array(L["W"]) @ h.reshape(-1) + np.array(L["b"])
        elif k == "relu":
            h = np.maximum(h, 0.0)
        elif k == "abs":
            h = np.abs(h)
        elif k == "conv2d":
            h = conv_forward(h, L)
        elif k == "gcn":
            a = L["adjacency"]
            A = np.zeros((a["n"], a["n"]))
            A[a["rows"], a["cols"]] = a["vals"]
            h = A @ h @ np.array(L["W"]) + np.array(L["b"])
        else:
            raise ValueError(k)
    return h.reshape(-1)


def normalized_adjacency(n, rng):
    A = np.eye(n)
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = 1.0
    for _ in range(n // 2):
        i, j = rng.integers(0, n, size=2)
        if i != j:
            A[i, j] = A[j, i] = 1.0
    d = A.sum(axis=1)
    return A / np.sqrt(np.outer(d, d))


def probes(model, rng, count, first_layer=None):
    n = int(np.prod(model["input_shape"]))
    xs = []
    for k in range(count):
        x = rng.uniform(-1, 1, size=n)
        if first_layer is not None and k % 2 == 1:
            # half of the probes sit within 0.01 of a first-layer hinge
            W, b = first_layer
            i = rng.integers(0, W.shape[0])
            w = W[i]
            z = w @ x + b[i]
            x = x - (z - rng.uniform(-0.01, 0.01)) * w / (w @ w)
        xs.append(x)
    return [{"x": x.tolist(), "y": forward(model, x).tolist()} for x in xs]


def write_bundle(root, name, model, seed, first_layer=None, count=1000):
    d = os.path.join(root, name)
    os.makedirs(d, exist_ok=True)
    rng = np.random.default_rng(seed + 1)
    with open(os.path.join(d, "model.json"), "w") as f:
        json.dump(model, f)
    with open(os.path.join(d, "probes.json"), "w") as f:
        json.dump(probes(model, rng, count, first_layer), f)
    with open(os.path.join(d, "provenance.json"), "w") as f:
        json.dump({"seed": seed, "epochs": 0, "dataset": "none (random weights)",
                   "generator": "tools/export_fixtures.py", "numpy": np.__version__}, f, indent=1)


def ffn(widths, seed):
    rng = np.random.default_rng(seed)
    layers = []
    first = None
    for i in range(len(widths) - 1):
        W = rng.normal(size=(widths[i + 1], widths[i])) / np.sqrt(widths[i])
        b = rng.normal(size=widths[i + 1]) * 0.1
        if first is None:
            first = (W, b)
        layers.append(dense(W, b))
        if i + 2 < len(widths):
            layers.append({"kind": "relu"})
    return {"name": "ffn_" + "_".join(map(str, widths)), "version": "1", "input_shape": [widths[0]],
            "layers": layers}, first


def main(root):
    os.makedirs(root, exist_ok=True)

    m, first = ffn([2, 4, 2], 1)
    write_bundle(root, "ffn_2_4_2", m, 1, first)
    m, first = ffn([20, 16, 8, 4], 2025)
    write_bundle(root, "ffn_20_16_8_4", m, 2025, first)

    rng = np.random.default_rng(7)
    conv1d = {"name": "conv1d", "version": "1", "input_shape": [1, 1, 12], "layers": [
        conv(rng.normal(size=(2, 1, 1, 3)) * 0.6, rng.normal(size=2) * 0.1, (1, 1), (0, 1)),
        {"kind": "relu"},
        conv(rng.normal(size=(1, 2, 1, 3)) * 0.6, rng.normal(size=1) * 0.1, (1, 1), (0, 1)),
        {"kind": "relu"}]}
    write_bundle(root, "conv1d", conv1d, 7)

    rng = np.random.default_rng(8)
    cnn = {"name": "cnn_1x8x8", "version": "1", "input_shape": [1, 8, 8], "layers": [
        conv(rng.normal(size=(2, 1, 3, 3)) * 0.4, rng.normal(size=2) * 0.1, (1, 1), (1, 1)),
        {"kind": "relu"},
        conv(rng.normal(size=(2, 2, 3, 3)) * 0.3, rng.normal(size=2) * 0.1, (1, 1), (1, 1)),
        {"kind": "relu"}]}
    write_bundle(root, "cnn_1x8x8", cnn, 8)

    rng = np.random.default_rng(10)
    A = normalized_adjacency(10, rng)
    g = {"name": "gcn_10", "version": "1", "input_shape": [10, 3], "layers": [
        gcn(A, rng.normal(size=(3, 4)) * 0.7, rng.normal(size=4) * 0.1),
        {"kind": "relu"},
        gcn(A, rng.normal(size=(4, 2)) * 0.7, rng.normal(size=2) * 0.1)]}
    write_bundle(root, "gcn_10", g, 10)

    rng = np.random.default_rng(3)
    small, _ = ffn([2, 3, 2], 3)
    with open(os.path.join(root, "ffn_2_3_2.json"), "w") as f:
        json.dump(small, f, indent=1)
    with open(os.path.join(root, "abs1d.json"), "w") as f:
        json.dump({"name": "abs1d", "version": "1", "input_shape": [1],
                   "layers": [{"kind": "dense", "W": [[1.0]], "b": [0.0]}, {"kind": "abs"}]}, f, indent=1)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures"))
