"""Seeded random source shared by every generator in the package.

All randomness flows through :func:`make_rng` so that a ``(seed, stream)``
pair fully determines the draws.  The bit generator is Philox, a 64-bit
counter-based generator; Gaussian variates are produced with the Box-Muller
transform on top of its uniforms rather than numpy's ziggurat sampler.
"""
import numpy as np

# Distinct streams keep e.g. the sketch draw independent of the matrix draw
# even when both use the same user seed.
STREAM_MATRIX = 0
STREAM_SKETCH = 1
STREAM_INIT = 2
STREAM_ESTIMATE = 3
STREAM_MISC = 4


def make_rng(seed, stream=STREAM_MISC):
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (seed & 0xFFFFFFFFFFFFFFFF) | (int(stream) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian(rng, shape):
    """Standard normal array of ``shape`` via Box-Muller."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    size = int(np.prod(shape, dtype=np.int64))
    half = (size + 1) // 2
    # 1 - U lies in (0, 1], so the log is always finite.
    u1 = 1.0 - rng.random(half)
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * half)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:size].reshape(shape)


def random_unit_vector(rng, n):
    x = gaussian(rng, n)
    return x / np.linalg.norm(x)
