"""Dense-tensor numerics: seeded RNG streams, a small MLP with closed-form
forward/backward rules (optionally carrying low-rank adapter contributions),
the training losses, an AdamW optimizer, and a finite-difference gradient
checker.

Everything computes in float64; nothing here depends on an autodiff
framework. Parameter collections are plain ``dict[str, np.ndarray]`` whose
insertion order is the deterministic declaration order, so flattening a
gradient tree to a single vector is reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ParamTree = dict[str, np.ndarray]

ACTIVATIONS = ("tanh", "relu", "identity")


class NumericsError(ValueError):
    """Shape mismatch, non-finite value, or malformed parameter structure."""


# ---------------------------------------------------------------------------
# Seeded RNG streams
# ---------------------------------------------------------------------------


def stream(seed: int, label: str) -> np.random.Generator:
    """Derive an independent, reproducible RNG stream from (seed, label).

    The same (seed, label) pair always yields a generator producing the
    same sequence; distinct labels give statistically independent streams.
    """
    digest = hashlib.blake2b(
        label.encode("utf-8"), key=int(seed).to_bytes(8, "little", signed=True)
    ).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Parameter trees
# ---------------------------------------------------------------------------


def tree_flatten(tree: ParamTree) -> np.ndarray:
    """Concatenate all leaves into one vector, in declaration order."""
    if not tree:
        return np.zeros(0)
    return np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in tree.values()])


def tree_unflatten(template: ParamTree, vec: np.ndarray) -> ParamTree:
    """Inverse of :func:`tree_flatten` given a same-structured template."""
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(v.size for v in template.values())
    if vec.size != total:
        raise NumericsError(f"flat vector has {vec.size} entries, template needs {total}")
    out: ParamTree = {}
    pos = 0
    for k, v in template.items():
        out[k] = vec[pos : pos + v.size].reshape(v.shape).copy()
        pos += v.size
    return out


def tree_map(fn, *trees: ParamTree) -> ParamTree:
    keys = list(trees[0].keys())
    for t in trees[1:]:
        if list(t.keys()) != keys:
            raise NumericsError("parameter trees have mismatched structure")
    return {k: fn(*(t[k] for t in trees)) for k in keys}


def tree_zeros_like(tree: ParamTree) -> ParamTree:
    return {k: np.zeros_like(v) for k, v in tree.items()}


def tree_add_(acc: ParamTree, other: ParamTree) -> ParamTree:
    """In-place accumulation acc += other."""
    for k in acc:
        acc[k] += other[k]
    return acc


# ---------------------------------------------------------------------------
# Vector ops
# ---------------------------------------------------------------------------


def dot(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise NumericsError("dot: length mismatch")
    return float(u @ v)


def norm(u: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(u, dtype=np.float64).ravel()))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = norm(u), norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericsError("cosine of zero-norm vector")
    return dot(u, v) / (nu * nv)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def _act_forward(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "identity":
        return pre
    raise NumericsError(f"unknown activation {name!r}")


def _act_backward(name: str, pre: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return g * (1.0 - out * out)
    if name == "relu":
        # subgradient at 0 is 0
        return g * (pre > 0.0)
    if name == "identity":
        return g
    raise NumericsError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# MLP with optional low-rank adapter contributions
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    """One affine layer: out = act(weight @ x + bias), weight is (out, in)."""

    name: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise NumericsError(f"layer {self.name!r}: weight/bias shapes inconsistent")
        if self.activation not in ACTIVATIONS:
            raise NumericsError(f"layer {self.name!r}: unknown activation {self.activation!r}")


class Mlp:
    """Sequential stack of :class:`Layer` with exact hand-rolled backward.

    Adapter contributions enter as per-layer ``(coeff, A, B)`` additions to
    the effective weight: ``W_eff = W + sum_i coeff_i * B_i @ A_i``. The
    backward pass returns exact gradients for base parameters, for every
    adapter factor, and for the input.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise NumericsError("empty layer list")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise NumericsError("duplicate layer names")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise NumericsError(
                    f"layer {nxt.name!r} input dim {nxt.weight.shape[1]} does not chain "
                    f"with {prev.name!r} output dim {prev.weight.shape[0]}"
                )
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def params(self) -> ParamTree:
        tree: ParamTree = {}
        for l in self.layers:
            tree[f"{l.name}.weight"] = l.weight
            tree[f"{l.name}.bias"] = l.bias
        return tree

    def set_params(self, tree: ParamTree) -> None:
        for l in self.layers:
            l.weight = np.asarray(tree[f"{l.name}.weight"], dtype=np.float64)
            l.bias = np.asarray(tree[f"{l.name}.bias"], dtype=np.float64)

    def forward(self, x: np.ndarray, adapters: dict[str, list[tuple[float, np.ndarray, np.ndarray]]] | None = None):
        """Run the network; returns (y, cache) where cache supports backward.

        ``adapters`` maps layer name to a list of (coeff, A, B) low-rank
        terms; unknown layer names are rejected.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise NumericsError(f"input dim {h.shape[-1]} != expected {self.in_dim}")
        if adapters:
            unknown = set(adapters) - set(self.layer_names())
            if unknown:
                raise NumericsError(f"adapter targets unknown layers: {sorted(unknown)}")
        cache = {"inputs": [], "pres": [], "outs": [], "adapters": adapters or {}, "squeeze": squeeze}
        for l in self.layers:
            cache["inputs"].append(h)
            pre = h @ l.weight.T + l.bias
            for coeff, A, B in cache["adapters"].get(l.name, ()):
                pre = pre + coeff * ((h @ A.T) @ B.T)
            out = _act_forward(l.activation, pre)
            cache["pres"].append(pre)
            cache["outs"].append(out)
            h = out
        y = h[0] if squeeze else h
        return y, cache

    def backward(self, cache, upstream: np.ndarray):
        """Exact adjoint of :meth:`forward` composed with ``upstream``.

        Returns ``(grad_params, grad_adapters, grad_x)`` where
        ``grad_adapters[layer]`` is a list of (grad_A, grad_B) aligned with
        the adapter terms passed to forward. Gradients sum over the batch.
        """
        if len(cache["inputs"]) != len(self.layers):
            raise NumericsError("stale or mismatched forward cache")
        g = np.asarray(upstream, dtype=np.float64)
        if cache["squeeze"]:
            g = g[None, :]
        if g.shape != cache["outs"][-1].shape:
            raise NumericsError("upstream gradient shape mismatch")
        grad_params: ParamTree = {}
        grad_adapters: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
        for idx in reversed(range(len(self.layers))):
            l = self.layers[idx]
            h_in = cache["inputs"][idx]
            g_pre = _act_backward(l.activation, cache["pres"][idx], cache["outs"][idx], g)
            grad_params[f"{l.name}.weight"] = g_pre.T @ h_in
            grad_params[f"{l.name}.bias"] = g_pre.sum(axis=0)
            terms = cache["adapters"].get(l.name, ())
            if terms:
                grads = []
                for coeff, A, B in terms:
                    gBA = coeff * g_pre  # gradient wrt (B @ A) @ h contribution
                    grad_B = gBA.T @ (h_in @ A.T)
                    grad_A = B.T @ (gBA.T @ h_in)
                    grads.append((grad_A, grad_B))
                grad_adapters[l.name] = grads
            w_eff = l.weight
            for coeff, A, B in terms:
                w_eff = w_eff + coeff * (B @ A)
            g = g_pre @ w_eff
        # declaration order for the flattened view
        ordered = {}
        for l in self.layers:
            ordered[f"{l.name}.weight"] = grad_params[f"{l.name}.weight"]
            ordered[f"{l.name}.bias"] = grad_params[f"{l.name}.bias"]
        grad_x = g[0] if cache["squeeze"] else g
        return ordered, grad_adapters, grad_x


def mlp_init(
    rng: np.random.Generator,
    dims: list[int],
    activations: list[str],
    name_prefix: str = "fc",
    zero_last: bool = False,
) -> Mlp:
    """Seeded Gaussian init with 1/sqrt(fan_in) scaling; optional zero final layer."""
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise NumericsError("dims/activations mismatch")
    layers = []
    for i, act in enumerate(activations):
        fan_in, fan_out = dims[i], dims[i + 1]
        if zero_last and i == len(activations) - 1:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append(Layer(f"{name_prefix}{i}", w, np.zeros(fan_out), act))
    return Mlp(layers)


# ---------------------------------------------------------------------------
# Losses (value plus exact gradient wrt the first argument)
# ---------------------------------------------------------------------------


def loss_mse(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference over all elements; grad wrt ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise NumericsError(f"loss_mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    n = a.size
    return float(np.mean(diff * diff)), 2.0 * diff / n


def loss_bce_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits, numerically stabilized.

    Uses log(1 + exp(-|x|)) + max(x, 0) - x*t per bit, which never
    overflows; grad is (sigmoid(x) - t) / N.
    """
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.shape != t.shape:
        raise NumericsError("loss_bce_logits: shape mismatch")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise NumericsError("loss_bce_logits: targets must be binary")
    per_bit = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0) - x * t
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    n = x.size
    return float(np.mean(per_bit)), (sig - t) / n


def loss_cosine_distance(f_ref: np.ndarray, f: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - cos(f_ref, f) with f_ref held constant; grad wrt ``f`` only."""
    f_ref = np.asarray(f_ref, dtype=np.float64).ravel()
    f = np.asarray(f, dtype=np.float64).ravel()
    if f_ref.shape != f.shape:
        raise NumericsError("loss_cosine_distance: length mismatch")
    nr, nf = np.linalg.norm(f_ref), np.linalg.norm(f)
    if nr == 0.0 or nf == 0.0:
        raise NumericsError("loss_cosine_distance: zero-norm input")
    c = float(f_ref @ f / (nr * nf))
    grad = -(f_ref / (nr * nf) - c * f / (nf * nf))
    return 1.0 - c, grad


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    """Decoupled-weight-decay adaptive optimizer over a parameter tree."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: ParamTree = field(default_factory=dict)
    v: ParamTree = field(default_factory=dict)

    def step(self, params: ParamTree, grads: ParamTree) -> ParamTree:
        """One update; mutates and returns ``params``."""
        if list(grads.keys()) != list(params.keys()):
            raise NumericsError("optimizer: gradient tree does not match parameters")
        if not self.m:
            self.m = tree_zeros_like(params)
            self.v = tree_zeros_like(params)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise NumericsError(f"optimizer: shape mismatch for {k!r}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)
        return params


# ---------------------------------------------------------------------------
# Finite-difference gradient checker
# ---------------------------------------------------------------------------


def grad_check(
    f,
    params: ParamTree,
    rng: np.random.Generator,
    n_samples: int = 60,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> (value, grad_tree)`` must be pure and deterministic.
    Coordinates are sampled uniformly over the flattened parameter vector;
    relative error is |analytic - cd| / max(|analytic|, |cd|, 1e-12).
    """
    value, grad_tree = f(params)
    if not np.isfinite(value):
        raise NumericsError("grad_check: non-finite function value")
    flat_grad = tree_flatten(grad_tree)
    flat_params = tree_flatten(params)
    n = flat_params.size
    idx = rng.choice(n, size=min(n_samples, n), replace=False)
    worst = 0.0
    for i in idx:
        bumped = flat_params.copy()
        bumped[i] += step
        up, _ = f(tree_unflatten(params, bumped))
        bumped[i] -= 2 * step
        down, _ = f(tree_unflatten(params, bumped))
        cd = (up - down) / (2 * step)
        a = flat_grad[i]
        rel = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
        worst = max(worst, rel)
    return worst
