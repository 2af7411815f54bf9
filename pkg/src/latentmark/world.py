"""The frozen environment: a class-conditional Gaussian latent world, a
fixed orthonormal linear codec between latents and images, and a frozen
seeded feature extractor.

Images live in two conventions:

* raw image: ``decode(z)`` reshaped to (c, h, w); unconstrained floats.
* unit image: ``0.25 * raw + 0.5``, clipped to [0, 1] when published
  (PPM export, post-processing attacks). ``UNIT_GAIN``/``UNIT_OFFSET``
  fix the affine map.

The codec's column space is a random rotation of a smooth (low spatial
frequency) subspace, so mild image-space filtering acts close to identity
on latents, the way a real learned autoencoder behaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Mlp, NumericsError, mlp_init, stream

UNIT_GAIN = 0.25
UNIT_OFFSET = 0.5


# ---------------------------------------------------------------------------
# Latent codec
# ---------------------------------------------------------------------------


@dataclass
class LatentCodec:
    """Linear codec: encode(x) = V.T @ flatten(x), decode(z) = reshape(V @ z)."""

    matrix: np.ndarray  # (d_img, d_z), orthonormal columns
    image_shape: tuple[int, int, int]
    seed: int

    @property
    def d_img(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    @property
    def d_z(self) -> int:
        return self.matrix.shape[1]

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = _flatten_images(x, self.image_shape)
        z = flat @ self.matrix
        return z[0] if x.ndim == 3 else z

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zz = z[None, :] if single else z
        if zz.shape[1] != self.d_z:
            raise NumericsError(f"latent dim {zz.shape[1]} != codec dim {self.d_z}")
        flat = zz @ self.matrix.T
        imgs = flat.reshape((-1,) + self.image_shape)
        return imgs[0] if single else imgs


def _flatten_images(x: np.ndarray, image_shape) -> np.ndarray:
    d = int(np.prod(image_shape))
    if x.ndim == 3:
        if x.shape != tuple(image_shape):
            raise NumericsError(f"image shape {x.shape} != codec shape {tuple(image_shape)}")
        return x.reshape(1, d)
    if x.ndim == 4 and x.shape[1:] == tuple(image_shape):
        return x.reshape(x.shape[0], d)
    raise NumericsError(f"image shape {x.shape} != codec shape {tuple(image_shape)}")


def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows indexed by frequency."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


def _smooth_basis(image_shape: tuple[int, int, int], d_z: int) -> np.ndarray:
    """First d_z smooth orthonormal image-space directions.

    Tensor products of per-channel mixing vectors with 2D DCT modes,
    ordered by spatial frequency (u+v) and then channel, so the span is
    the lowest-frequency corner of the full basis.
    """
    c, h, w = image_shape
    if c == 3:
        chan = np.array(
            [
                [1 / np.sqrt(3), 1 / np.sqrt(2), 1 / np.sqrt(6)],
                [1 / np.sqrt(3), -1 / np.sqrt(2), 1 / np.sqrt(6)],
                [1 / np.sqrt(3), 0.0, -2 / np.sqrt(6)],
            ]
        )  # col 0 is the channel-mean direction
    else:
        chan = np.eye(c)
    dct_h = _dct_matrix(h)
    dct_w = _dct_matrix(w)
    order = sorted(
        ((u + v, u, v, ci) for u in range(h) for v in range(w) for ci in range(c)),
        key=lambda t: (t[0], t[1], t[2], t[3]),
    )
    cols = np.empty((c * h * w, d_z))
    for j, (_, u, v, ci) in enumerate(order[:d_z]):
        spatial = np.outer(dct_h[u], dct_w[v])  # (h, w), unit norm
        cols[:, j] = (chan[:, ci][:, None, None] * spatial[None, :, :]).ravel()
    return cols


def build_codec(seed: int, image_shape: tuple[int, int, int] = (3, 16, 16), latent_dim: int = 64) -> LatentCodec:
    """Frozen codec from a seeded Gaussian rotation of the smooth subspace.

    A seeded Gaussian matrix is orthonormalized (QR) and used to rotate
    the low-frequency basis, so columns are orthonormal, deterministic in
    the seed, and spatially smooth.
    """
    c, h, w = image_shape
    d_img = c * h * w
    if latent_dim > d_img:
        raise NumericsError(f"latent_dim {latent_dim} exceeds image dim {d_img}")
    rng = stream(seed, "codec")
    gauss = rng.standard_normal((latent_dim, latent_dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # sign-fix for a deterministic rotation
    basis = _smooth_basis((c, h, w), latent_dim)
    return LatentCodec(matrix=basis @ q, image_shape=(c, h, w), seed=seed)


# ---------------------------------------------------------------------------
# Synthetic class-conditional world
# ---------------------------------------------------------------------------


@dataclass
class SyntheticWorld:
    """K diagonal-Gaussian latent classes with mixture weights."""

    means: np.ndarray  # (K, d_z)
    variances: np.ndarray  # (K, d_z), strictly positive
    weights: np.ndarray  # (K,), sums to 1
    seed: int

    def __post_init__(self):
        if np.any(self.variances <= 0):
            raise NumericsError("class variances must be strictly positive")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise NumericsError("mixture weights must sum to 1")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def d_z(self) -> int:
        return self.means.shape[1]


def build_world(seed: int, n_classes: int = 4, d_z: int = 64, mean_scale: float = 2.0) -> SyntheticWorld:
    """Default world: means from N(0, mean_scale^2 I), diag variances in [0.25, 1]."""
    rng = stream(seed, "world")
    means = rng.standard_normal((n_classes, d_z)) * mean_scale
    variances = rng.uniform(0.25, 1.0, size=(n_classes, d_z))
    weights = np.full(n_classes, 1.0 / n_classes)
    return SyntheticWorld(means=means, variances=variances, weights=weights, seed=seed)


def sample_world(
    world: SyntheticWorld,
    codec: LatentCodec,
    class_index: int,
    rng: np.random.Generator,
    n: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw n clean latents from one class and decode them to images."""
    if not 0 <= class_index < world.n_classes:
        raise NumericsError(f"invalid class {class_index}")
    mu = world.means[class_index]
    sd = np.sqrt(world.variances[class_index])
    z0 = mu + sd * rng.standard_normal((n, world.d_z))
    return z0, codec.decode(z0), class_index


def sample_classes(world: SyntheticWorld, rng: np.random.Generator, n: int) -> np.ndarray:
    """Class indices drawn from the mixture weights."""
    return rng.choice(world.n_classes, size=n, p=world.weights)


def sample_latents(world: SyntheticWorld, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Clean latents for the given per-item class indices."""
    mu = world.means[classes]
    sd = np.sqrt(world.variances[classes])
    return mu + sd * rng.standard_normal(mu.shape)


# ---------------------------------------------------------------------------
# Frozen perception network
# ---------------------------------------------------------------------------


class PerceptionNet:
    """Frozen 2-layer tanh MLP over flattened images -> feature vector."""

    def __init__(self, image_shape: tuple[int, int, int] = (3, 16, 16), feature_dim: int = 64, seed: int = 0):
        self.image_shape = tuple(image_shape)
        self.feature_dim = feature_dim
        self.seed = seed
        d_img = int(np.prod(image_shape))
        self._mlp = mlp_init(stream(seed, "perception"), [d_img, 128, feature_dim], ["tanh", "tanh"], "p")

    def perceive(self, x: np.ndarray):
        """Feature vector plus a closure computing the exact grad wrt x."""
        flat = _flatten_images(np.asarray(x, dtype=np.float64), self.image_shape)
        single = np.asarray(x).ndim == 3
        feat, cache = self._mlp.forward(flat)

        def backward(grad_feature: np.ndarray) -> np.ndarray:
            g = np.asarray(grad_feature, dtype=np.float64)
            if single:
                g = g[None, :]
            _, _, grad_flat = self._mlp.backward(cache, g)
            imgs = grad_flat.reshape((-1,) + self.image_shape)
            return imgs[0] if single else imgs

        return (feat[0] if single else feat), backward


# ---------------------------------------------------------------------------
# Image conventions and PPM io
# ---------------------------------------------------------------------------


def to_unit(x: np.ndarray, clip: bool = True) -> np.ndarray:
    """Raw image -> display image in [0, 1] (affine only when clip=False)."""
    u = UNIT_GAIN * np.asarray(x, dtype=np.float64) + UNIT_OFFSET
    return np.clip(u, 0.0, 1.0) if clip else u


def from_unit(u: np.ndarray) -> np.ndarray:
    """Inverse of the unit-image affine map (clipping is not undone)."""
    return (np.asarray(u, dtype=np.float64) - UNIT_OFFSET) / UNIT_GAIN


def canonicalize_image(x: np.ndarray):
    """Zero-mean / unit-std normalization of one raw image, with backward.

    Extraction runs on canonicalized images, which makes recovered bits
    invariant to global affine photometric changes (brightness/contrast
    and the publish convention itself). Returns (y, backward) where
    backward maps grad_y to grad_x exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xs = x[None] if single else x
    n = xs[0].size
    flat = xs.reshape(xs.shape[0], n)
    m = flat.mean(axis=1, keepdims=True)
    centered = flat - m
    var = np.mean(centered * centered, axis=1, keepdims=True)
    s = np.sqrt(var + 1e-12)
    y = centered / s

    def backward(grad_y: np.ndarray) -> np.ndarray:
        g = np.asarray(grad_y, dtype=np.float64)
        gf = (g[None] if single else g).reshape(xs.shape[0], n)
        gm = gf.mean(axis=1, keepdims=True)
        gy = np.mean(gf * y, axis=1, keepdims=True)
        gx = (gf - gm - y * gy) / s
        gx = gx.reshape(xs.shape)
        return gx[0] if single else gx

    out = y.reshape(xs.shape)
    return (out[0] if single else out), backward


def write_ppm(path, x_raw: np.ndarray) -> None:
    """Export one raw image as binary PPM (P6, 8-bit, unit-clamped)."""
    x = np.asarray(x_raw, dtype=np.float64)
    if x.ndim != 3:
        raise NumericsError("write_ppm expects a single (c, h, w) image")
    c, h, w = x.shape
    if c != 3:
        raise NumericsError("PPM export requires 3 channels")
    u = to_unit(x)
    pix = np.round(u * 255.0).astype(np.uint8).transpose(1, 2, 0)  # h, w, c
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM written by :func:`write_ppm`; returns a raw image."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise NumericsError("not a binary PPM file")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    pix = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    u = pix.astype(np.float64).transpose(2, 0, 1) / maxval
    return from_unit(u)
