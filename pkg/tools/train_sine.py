"""Fit the bundled sine-estimator fixture and write it as an .rmodel.

Architecture: 1 -> 16 (tanh) -> 16 (tanh) -> 1 (linear), inputs in [0, 2*pi].
Plain full-batch Adam in numpy; deterministic for a fixed seed.

    python tools/train_sine.py src/rune/data/sine.rmodel
"""
import sys

import numpy as np

from rune.pipeline import Activation, DenseModel, Layer, dump_rmodel


def train(seed=7, steps=20000, lr=3e-3, width=16):
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 2 * np.pi, 512)[:, None]
    y = np.sin(x)
    sizes = [1, width, width, 1]
    params = []
    for n_in, n_out in zip(sizes, sizes[1:]):
        w = rng.normal(0.0, np.sqrt(1.0 / n_in), (n_in, n_out))
        params += [w, np.zeros(n_out)]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, steps + 1):
        w1, c1, w2, c2, w3, c3 = params
        h1 = np.tanh(x @ w1 + c1)
        h2 = np.tanh(h1 @ w2 + c2)
        out = h2 @ w3 + c3
        g_out = 2 * (out - y) / len(x)
        g_w3 = h2.T @ g_out
        g_c3 = g_out.sum(0)
        g_h2 = g_out @ w3.T * (1 - h2 ** 2)
        g_w2 = h1.T @ g_h2
        g_c2 = g_h2.sum(0)
        g_h1 = g_h2 @ w2.T * (1 - h1 ** 2)
        g_w1 = x.T @ g_h1
        g_c1 = g_h1.sum(0)
        grads = [g_w1, g_c1, g_w2, g_c2, g_w3, g_c3]
        for i, g in enumerate(grads):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mh = m[i] / (1 - b1 ** step)
            vh = v[i] / (1 - b2 ** step)
            params[i] = params[i] - lr * mh / (np.sqrt(vh) + eps)
    w1, c1, w2, c2, w3, c3 = params
    return DenseModel([
        Layer(w1.T, c1, Activation.TANH),
        Layer(w2.T, c2, Activation.TANH),
        Layer(w3.T, c3, Activation.LINEAR),
    ])


def main(path):
    model = train()
    xs = np.linspace(0.0, 2 * np.pi, 1001)
    from rune.pipeline import infer
    from rune.tensor import Tensor
    ys = np.array([infer(model, Tensor.f32([v])).tolist()[0] for v in xs])
    print(f"max |error| on [0, 2pi]: {np.abs(ys - np.sin(xs)).max():.4f}")
    with open(path, "wb") as f:
        f.write(dump_rmodel(model))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "sine.rmodel")
