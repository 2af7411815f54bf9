"""Forward diffusion, the small class-conditional denoiser, an analytic
posterior-mean oracle for the Gaussian world, and an ancestral sampler.

The denoiser is a tanh MLP over ``[z_t | time-embed(t) | class-embed(c)]``
whose three linear layers are all adapter-eligible. The oracle computes
the exact Bayes-optimal noise prediction for diagonal-Gaussian classes
and is what the trained denoiser is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import AdamW, NumericsError, ensure_finite, mlp_init, stream
from .world import LatentCodec, SyntheticWorld, sample_classes, sample_latents


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Linear-beta schedule; tables are indexed by t in [1..T] (index 0 pads).

    The default reaches alpha_bar_T ~ 4e-5 so that the reverse chain
    started from a standard normal matches the forward marginal; a 100-step
    schedule with betas capped at 0.02 retains ~60% signal amplitude at
    t=T and visibly biases samples.
    """

    T: int
    betas: np.ndarray  # (T+1,), betas[0] unused
    alphas: np.ndarray
    alpha_bars: np.ndarray  # alpha_bars[0] == 1.0

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> "NoiseSchedule":
        if T < 1:
            raise NumericsError("schedule needs T >= 1")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise NumericsError("betas must satisfy 0 < beta_1 <= beta_T < 1")
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        sched = cls(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)
        sched.validate()
        return sched

    def validate(self) -> None:
        if len(self.betas) != self.T + 1 or len(self.alpha_bars) != self.T + 1:
            raise NumericsError("schedule table length mismatch")
        b = self.betas[1:]
        if np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) < 0):
            raise NumericsError("betas must be nondecreasing in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0) or self.alpha_bars[-1] <= 0:
            raise NumericsError("alpha_bar must be strictly decreasing and positive")

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise NumericsError(f"timestep out of range [1, {self.T}]")
        return t


def forward_diffuse(schedule: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = schedule.check_t(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise NumericsError("forward_diffuse: z0/eps shape mismatch")
    abar = schedule.alpha_bars[t]
    if z0.ndim == 2 and np.ndim(t) == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def estimate_z0(schedule: NoiseSchedule, z_t: np.ndarray, t, eps_hat: np.ndarray) -> np.ndarray:
    """One-step clean-latent estimate (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    t = schedule.check_t(t)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    abar = schedule.alpha_bars[t]
    if np.min(abar) <= 0:
        raise NumericsError("estimate_z0: alpha_bar must be positive")
    if z_t.ndim == 2 and np.ndim(t) == 1:
        abar = abar[:, None]
    return (z_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def posterior_eps(world: SyntheticWorld, schedule: NoiseSchedule, z_t: np.ndarray, t, class_index) -> np.ndarray:
    """Bayes-optimal E[eps | z_t, c] for a diagonal-Gaussian class.

    For z_t = a z0 + b eps with z0 ~ N(mu, diag(var)) the conditional mean
    of eps is b (z_t - a mu) / (a^2 var + b^2), elementwise.
    """
    t = schedule.check_t(t)
    z_t = np.asarray(z_t, dtype=np.float64)
    single = z_t.ndim == 1
    zz = z_t[None] if single else z_t
    abar = np.atleast_1d(schedule.alpha_bars[t]).astype(np.float64)
    if np.any(abar >= 1.0):
        raise NumericsError("posterior_eps: degenerate scale alpha_bar == 1")
    c = np.atleast_1d(np.asarray(class_index, dtype=int))
    if np.any(c < 0) or np.any(c >= world.n_classes):
        raise NumericsError("posterior_eps: invalid class")
    if abar.size == 1:
        abar = np.full(zz.shape[0], abar[0])
    if c.size == 1:
        c = np.full(zz.shape[0], c[0])
    mu = world.means[c]
    var = world.variances[c]
    a = np.sqrt(abar)[:, None]
    b2 = (1.0 - abar)[:, None]
    out = np.sqrt(b2) * (zz - a * mu) / (abar[:, None] * var + b2)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


def time_embedding(t, dim: int) -> np.ndarray:
    """Fixed sinusoidal embedding of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Denoiser:
    """MLP noise predictor with learned class embeddings and a null class.

    Layer names are stable ("d0", "d1", "d2") because they key adapter
    targets; once ``frozen`` the base weights must not change.
    """

    def __init__(
        self,
        d_z: int = 64,
        n_classes: int = 4,
        width: int = 256,
        time_dim: int = 16,
        class_dim: int = 16,
        seed: int = 0,
    ):
        self.d_z = d_z
        self.n_classes = n_classes
        self.time_dim = time_dim
        self.class_dim = class_dim
        self.seed = seed
        rng = stream(seed, "denoiser")
        in_dim = d_z + time_dim + class_dim
        self.mlp = mlp_init(rng, [in_dim, width, width, d_z], ["tanh", "tanh", "identity"], "d")
        # index n_classes is the reserved null class used for guidance
        self.class_embed = rng.standard_normal((n_classes + 1, class_dim)) * 0.5
        self.frozen = False

    @property
    def null_class(self) -> int:
        return self.n_classes

    def layer_names(self) -> list[str]:
        return self.mlp.layer_names()

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {l.name: l.weight.shape for l in self.mlp.layers}

    def params(self) -> dict[str, np.ndarray]:
        tree = self.mlp.params()
        tree["class_embed"] = self.class_embed
        return tree

    def set_params(self, tree) -> None:
        if self.frozen:
            raise NumericsError("denoiser is frozen")
        self.mlp.set_params(tree)
        self.class_embed = np.asarray(tree["class_embed"], dtype=np.float64)

    def _features(self, z_t: np.ndarray, t, c) -> tuple[np.ndarray, np.ndarray]:
        z_t = np.asarray(z_t, dtype=np.float64)
        zz = z_t[None] if z_t.ndim == 1 else z_t
        n = zz.shape[0]
        tt = np.atleast_1d(np.asarray(t))
        cc = np.atleast_1d(np.asarray(c, dtype=int))
        if tt.size == 1:
            tt = np.full(n, tt[0])
        if cc.size == 1:
            cc = np.full(n, cc[0])
        if np.any(cc < 0) or np.any(cc > self.n_classes):
            raise NumericsError("class index out of range")
        feats = np.concatenate([zz, time_embedding(tt, self.time_dim), self.class_embed[cc]], axis=1)
        return feats, cc

    def predict(self, z_t: np.ndarray, t, c, adapter_terms=None):
        """Noise prediction; returns (eps_hat, cache).

        ``adapter_terms`` is a {layer: [(coeff, A, B), ...]} mapping as
        accepted by :meth:`Mlp.forward`.
        """
        single = np.asarray(z_t).ndim == 1
        feats, cc = self._features(z_t, t, c)
        y, mcache = self.mlp.forward(feats, adapter_terms)
        cache = {"mlp": mcache, "classes": cc, "single": single}
        return (y[0] if single else y), cache

    def backward(self, cache, grad_eps: np.ndarray):
        """Gradients wrt base params (incl. class embeddings), adapters, z_t."""
        g = np.asarray(grad_eps, dtype=np.float64)
        if cache["single"]:
            g = g[None]
        grad_base, grad_adapters, grad_feats = self.mlp.backward(cache["mlp"], g)
        grad_z = grad_feats[:, : self.d_z]
        grad_cemb = np.zeros_like(self.class_embed)
        np.add.at(grad_cemb, cache["classes"], grad_feats[:, self.d_z + self.time_dim :])
        grad_base["class_embed"] = grad_cemb
        if cache["single"]:
            grad_z = grad_z[0]
        return grad_base, grad_adapters, grad_z


def adapter_terms(pairs) -> dict[str, list[tuple[float, np.ndarray, np.ndarray]]]:
    """{layer: [(coeff*scale, A, B), ...]} for (adapter, coefficient) pairs.

    Adapters are duck-typed: they expose ``.scale`` and ``.layers`` mapping
    layer name to (A, B) factors. An empty pair list yields {} and the
    base prediction.
    """
    terms: dict[str, list[tuple[float, np.ndarray, np.ndarray]]] = {}
    for adapter, coeff in pairs:
        for name, (A, B) in adapter.layers.items():
            terms.setdefault(name, []).append((coeff * adapter.scale, A, B))
    return terms


def predict_eps(denoiser: Denoiser, pairs, z_t: np.ndarray, t, c):
    """Forward pass with superposed adapter contributions."""
    return denoiser.predict(z_t, t, c, adapter_terms(pairs))


# ---------------------------------------------------------------------------
# Base training
# ---------------------------------------------------------------------------


@dataclass
class BaseTrainConfig:
    steps: int = 20000
    batch: int = 64
    lr: float = 1e-3
    width: int = 256
    time_dim: int = 16
    class_dim: int = 16
    p_uncond: float = 0.1  # null-class dropout so guidance has a trained branch
    weight_decay: float = 0.0
    log_every: int = 1000


def train_base_denoiser(
    world: SyntheticWorld,
    schedule: NoiseSchedule,
    config: BaseTrainConfig,
    seed: int,
) -> tuple[Denoiser, list[dict]]:
    """Standard eps-prediction MSE training; returns a frozen denoiser.

    Raises on non-finite loss. With steps=0 the seeded init is returned
    (already frozen).
    """
    den = Denoiser(
        d_z=world.d_z,
        n_classes=world.n_classes,
        width=config.width,
        time_dim=config.time_dim,
        class_dim=config.class_dim,
        seed=seed,
    )
    rng = stream(seed, "base-train")
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    log: list[dict] = []
    params = den.params()
    for step in range(config.steps):
        c = sample_classes(world, rng, config.batch)
        z0 = sample_latents(world, c, rng)
        t = rng.integers(1, schedule.T + 1, size=config.batch)
        eps = rng.standard_normal(z0.shape)
        z_t = forward_diffuse(schedule, z0, t, eps)
        c_in = c.copy()
        drop = rng.random(config.batch) < config.p_uncond
        c_in[drop] = den.null_class
        eps_hat, cache = den.predict(z_t, t, c_in)
        diff = eps_hat - eps
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise NumericsError(f"base training diverged at step {step}")
        grad_base, _, _ = den.backward(cache, 2.0 * diff / diff.size)
        opt.step(params, grad_base)
        den.set_params(params)
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            log.append({"step": step, "loss": loss})
    den.frozen = True
    return den, log


def oracle_gap(
    den: Denoiser,
    world: SyntheticWorld,
    schedule: NoiseSchedule,
    seed: int,
    n: int = 2000,
) -> float:
    """Held-out mean ||eps_hat - eps*||^2 / d_z against the analytic oracle."""
    rng = stream(seed, "oracle-gap")
    c = sample_classes(world, rng, n)
    z0 = sample_latents(world, c, rng)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(z0.shape)
    z_t = forward_diffuse(schedule, z0, t, eps)
    eps_hat, _ = den.predict(z_t, t, c)
    eps_star = posterior_eps(world, schedule, z_t, t, c)
    return float(np.mean(np.sum((eps_hat - eps_star) ** 2, axis=1)) / world.d_z)


# ---------------------------------------------------------------------------
# Ancestral sampling
# ---------------------------------------------------------------------------


def ancestral_sample(eps_fn, schedule: NoiseSchedule, d_z: int, seed: int, n: int = 1, stream_label: str = "sample") -> np.ndarray:
    """Reverse DDPM chain from N(0, I); eps_fn(z_t, t) -> eps_hat.

    Noise for item i is drawn from stream (seed, f"{stream_label}/{i}"), so
    results are independent of batch composition and identical between
    serial and batched runs.
    """
    noises = np.empty((n, schedule.T + 1, d_z))
    for i in range(n):
        noises[i] = stream(seed, f"{stream_label}/{i}").standard_normal((schedule.T + 1, d_z))
    z = noises[:, 0, :].copy()  # z_T
    for t in range(schedule.T, 0, -1):
        eps_hat = eps_fn(z, t)
        ensure_finite(eps_hat, f"eps_hat at t={t}")
        beta = schedule.betas[t]
        abar = schedule.alpha_bars[t]
        mean = (z - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(schedule.alphas[t])
        if t > 1:
            var = (1.0 - schedule.alpha_bars[t - 1]) / (1.0 - abar) * beta
            z = mean + np.sqrt(var) * noises[:, t, :]
        else:
            z = mean
    return z


def sample(
    denoiser: Denoiser,
    pairs,
    schedule: NoiseSchedule,
    class_index: int,
    codec: LatentCodec,
    seed: int,
    n: int = 1,
    guidance: float | None = None,
    stream_label: str = "sample",
):
    """Generate latents and decoded images from the (adapter-equipped) model.

    ``guidance`` w combines predictions as (1-w)*eps_null + w*eps_cond;
    w=1 or None is plain conditional sampling.
    """
    terms = adapter_terms(pairs)

    def eps_fn(z, t):
        cond, _ = denoiser.predict(z, t, class_index, terms)
        if guidance is None or guidance == 1.0:
            return cond
        null, _ = denoiser.predict(z, t, denoiser.null_class, terms)
        return (1.0 - guidance) * null + guidance * cond

    z0 = ancestral_sample(eps_fn, schedule, denoiser.d_z, seed, n, stream_label)
    return z0, codec.decode(z0)
