"""Fit the tone-detector used by the microspeech example rune.

Input: the 150-bin magnitude spectrum of 150 audio samples in [-1, 1].
Output: one score, ~1 when a pure tone is present, ~0 for noise.
Architecture: 150 -> 8 (tanh) -> 1 (linear).

    python tools/train_tone_detector.py runes/microspeech/tone_detector.rmodel
"""
import sys

import numpy as np

from rune.pipeline import Activation, DenseModel, Layer, dump_rmodel

N = 150


def make_data(rng, count):
    t = np.arange(N)
    noise = rng.uniform(-0.3, 0.3, (count, N))
    labels = rng.integers(0, 2, count).astype(float)
    freq = rng.uniform(3, 70, count)
    phase = rng.uniform(0, 2 * np.pi, count)
    amp = rng.uniform(0.4, 0.7, count)
    tone = amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t / N + phase[:, None])
    x = np.clip(noise + labels[:, None] * tone, -1, 1)
    spectra = np.abs(np.fft.fft(x, axis=1)) / N
    return spectra, labels[:, None]


def train(seed=3, steps=3000, lr=1e-2, width=8):
    rng = np.random.default_rng(seed)
    x, y = make_data(rng, 4000)
    w1 = rng.normal(0, np.sqrt(1 / N), (N, width))
    c1 = np.zeros(width)
    w2 = rng.normal(0, np.sqrt(1 / width), (width, 1))
    c2 = np.zeros(1)
    params = [w1, c1, w2, c2]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    for step in range(1, steps + 1):
        w1, c1, w2, c2 = params
        h = np.tanh(x @ w1 + c1)
        out = h @ w2 + c2
        g = 2 * (out - y) / len(x)
        gh = g @ w2.T * (1 - h ** 2)
        grads = [x.T @ gh, gh.sum(0), h.T @ g, g.sum(0)]
        for i, gr in enumerate(grads):
            m[i] = 0.9 * m[i] + 0.1 * gr
            v[i] = 0.999 * v[i] + 0.001 * gr * gr
            params[i] = params[i] - lr * (m[i] / (1 - 0.9 ** step)) / (
                np.sqrt(v[i] / (1 - 0.999 ** step)) + 1e-8)
    w1, c1, w2, c2 = params
    # the runtime feeds raw (unscaled) magnitudes; fold the 1/N into layer one
    return DenseModel([Layer(w1.T / N, c1, Activation.TANH), Layer(w2.T, c2, Activation.LINEAR)])


def main(path):
    model = train()
    rng = np.random.default_rng(99)
    x, y = make_data(rng, 1000)
    h = np.tanh(x * N @ model.layers[0].weights.T + model.layers[0].bias)
    score = h @ model.layers[1].weights.T + model.layers[1].bias
    print(f"held-out accuracy: {((score > 0.5) == (y > 0.5)).mean():.3f}")
    with open(path, "wb") as f:
        f.write(dump_rmodel(model))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tone_detector.rmodel")
