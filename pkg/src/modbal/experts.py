"""Modality-specific experts: asymmetric LoRA mixtures with a regularised visual/non-visual router.

Each expert keeps one shared rank-reduction matrix ``a`` (r x d) and ``N``
rank-expansion matrices ``b[i]`` (d x r), mixed per token by
``softmax(w_gate @ x)``. A layer holds a visual, a non-visual and an omni
expert; the router turns the mean visual and non-visual token
representations into a weight ``lam`` in ``[0.5 - eps, 0.5 + eps]``.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import RoutingError, ShapeError, ValidationError
from .modality import ModalityTag
from .numerics import softmax

EXPERT_NAMES = ("e_v", "e_n", "e_o")


@dataclass(frozen=True)
class ExpertConfig:
    d: int
    r: int
    n_experts: int = 2

    def __post_init__(self):
        if not 1 <= self.r < self.d:
            raise ValueError(f"need 1 <= r < d, got r={self.r}, d={self.d}")
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")


@dataclass
class Expert:
    a: np.ndarray        # (r, d)
    b: np.ndarray        # (N, d, r)
    w_gate: np.ndarray   # (N, d)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.w_gate = np.asarray(self.w_gate, dtype=np.float64)
        r, d = self.a.shape
        n = self.w_gate.shape[0]
        if self.b.shape != (n, d, r) or self.w_gate.shape != (n, d):
            raise ShapeError(
                f"inconsistent expert shapes a={self.a.shape} b={self.b.shape} w_gate={self.w_gate.shape}"
            )

    @property
    def config(self):
        r, d = self.a.shape
        return ExpertConfig(d, r, self.b.shape[0])

    @classmethod
    def init(cls, config, rng):
        """LoRA-style start: random ``a``, zero ``b`` and zero gate."""
        d, r, n = config.d, config.r, config.n_experts
        bound = 1.0 / np.sqrt(d)
        return cls(rng.uniform(-bound, bound, (r, d)), np.zeros((n, d, r)), np.zeros((n, d)))

    @classmethod
    def random(cls, config, rng, scale=0.5):
        d, r, n = config.d, config.r, config.n_experts
        return cls(
            rng.normal(0, scale / np.sqrt(d), (r, d)),
            rng.normal(0, scale / np.sqrt(r), (n, d, r)),
            rng.normal(0, scale / np.sqrt(d), (n, d)),
        )


@dataclass
class Router:
    """Two-layer tanh perceptron on ``concat(mean_v, mean_n)`` plus the ``eps`` bound."""

    w1: np.ndarray   # (hidden, 2d)
    b1: np.ndarray   # (hidden,)
    w2: np.ndarray   # (hidden,)
    b2: float
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 0.5:
            raise ValueError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = float(self.b2)
        hidden = self.w1.shape[0]
        if self.w1.ndim != 2 or self.w1.shape[1] % 2 or self.b1.shape != (hidden,) or self.w2.shape != (hidden,):
            raise ShapeError("inconsistent router shapes")

    @classmethod
    def init(cls, d, epsilon=0.1, hidden=None):
        hidden = d if hidden is None else hidden
        return cls(np.zeros((hidden, 2 * d)), np.zeros(hidden), np.zeros(hidden), 0.0, epsilon)

    @classmethod
    def random(cls, d, rng, epsilon=0.1, hidden=None, scale=0.5):
        hidden = d if hidden is None else hidden
        return cls(
            rng.normal(0, scale / np.sqrt(2 * d), (hidden, 2 * d)),
            rng.normal(0, scale, hidden),
            rng.normal(0, scale / np.sqrt(hidden), hidden),
            float(rng.normal(0, scale)),
            epsilon,
        )


class FrozenFFN:
    """Fixed two-layer tanh MLP standing in for a frozen transformer block.

    Exposes :meth:`vjp` so token gradients can be taken through it.
    """

    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = (np.asarray(p, dtype=np.float64) for p in (w1, b1, w2, b2))

    @classmethod
    def random(cls, d, rng, hidden=None, scale=0.5):
        hidden = 2 * d if hidden is None else hidden
        return cls(
            rng.normal(0, scale / np.sqrt(d), (hidden, d)),
            rng.normal(0, scale, hidden),
            rng.normal(0, scale / np.sqrt(hidden), (d, hidden)),
            rng.normal(0, scale, d),
        )

    def __call__(self, x):
        return np.tanh(x @ self.w1.T + self.b1) @ self.w2.T + self.b2

    def vjp(self, x, g):
        h = np.tanh(x @ self.w1.T + self.b1)
        return ((g @ self.w2) * (1.0 - h * h)) @ self.w1


@dataclass
class MoSELayer:
    frozen_ffn: object
    e_v: Expert
    e_n: Expert
    e_o: Expert
    router: Router

    def __post_init__(self):
        cfgs = {self.e_v.config, self.e_n.config, self.e_o.config}
        if len(cfgs) != 1:
            raise ValidationError(f"experts disagree on configuration: {cfgs}")
        if self.router.w1.shape[1] != 2 * self.config.d:
            raise ShapeError("router input width must be 2d")

    @property
    def config(self):
        return self.e_v.config

    @classmethod
    def init(cls, config, rng, frozen_ffn, epsilon=0.1, router_hidden=None):
        experts = [Expert.init(config, rng.split(i)) for i in range(3)]
        return cls(frozen_ffn, *experts, Router.init(config.d, epsilon, router_hidden))

    @classmethod
    def random(cls, config, rng, frozen_ffn, epsilon=0.1, router_hidden=None, scale=0.5):
        experts = [Expert.random(config, rng.split(i), scale) for i in range(3)]
        router = Router.random(config.d, rng.split(3), epsilon, router_hidden, scale)
        return cls(frozen_ffn, *experts, router)

    def parameters(self):
        """Trainable arrays in checkpoint order, keyed ``<owner>.<name>``."""
        out = {}
        for name in EXPERT_NAMES:
            ex = getattr(self, name)
            out[f"{name}.a"] = ex.a
            out[f"{name}.b"] = ex.b
            out[f"{name}.w_gate"] = ex.w_gate
        r = self.router
        out["router.w1"] = r.w1
        out["router.b1"] = r.b1
        out["router.w2"] = r.w2
        out["router.b2"] = np.array(r.b2)
        return out

    def with_parameter(self, key, value):
        """Copy of the layer with one parameter array replaced."""
        owner, name = key.split(".")
        if owner == "router":
            val = float(value) if name == "b2" else value
            return replace(self, router=replace(self.router, **{name: val}))
        return replace(self, **{owner: replace(getattr(self, owner), **{name: value})})


# --- forward ---------------------------------------------------------------


def _expert_forward(expert, x):
    z = x @ expert.a.T                                     # (T, r)
    u = np.einsum("ndr,tr->tnd", expert.b, z)              # (T, N, d)
    alpha = softmax(x @ expert.w_gate.T, axis=-1)          # (T, N)
    out = np.einsum("tn,tnd->td", alpha, u)
    return out, (z, u, alpha)


def expert_forward(expert, x):
    """Gate-weighted sum of LoRA paths ``b[i] @ a @ x`` for one token or a batch."""
    x = np.asarray(x, dtype=np.float64)
    d = expert.a.shape[1]
    if x.shape[-1] != d or x.ndim not in (1, 2):
        raise ShapeError(f"expected tokens of width {d}, got shape {x.shape}")
    out, _ = _expert_forward(expert, np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def _router_forward(router, mean_v, mean_n):
    q = np.concatenate([mean_v, mean_n])
    h = np.tanh(router.w1 @ q + router.b1)
    f = float(router.w2 @ h + router.b2)
    t = np.tanh(f)
    return 0.5 + router.epsilon * t, (q, h, t)


def route_lambda(router, mean_v, mean_n):
    """Routing weight for visual tokens, bounded to ``0.5 +/- epsilon``."""
    mean_v = np.asarray(mean_v, dtype=np.float64)
    mean_n = np.asarray(mean_n, dtype=np.float64)
    if mean_v.shape != mean_n.shape or 2 * mean_v.shape[-1] != router.w1.shape[1]:
        raise ShapeError("router inputs must both have width d")
    lam, _ = _router_forward(router, mean_v, mean_n)
    return lam


def _modality_masks(layout, count):
    if count != layout.total:
        raise ShapeError(f"{count} tokens for a layout of {layout.total}")
    vis = np.asarray(layout.mask(ModalityTag.VISUAL))
    non = ~vis
    if not vis.any() or not non.any():
        raise RoutingError("routing needs at least one visual and one non-visual token")
    return vis, non


def _forward(layer, tokens, layout):
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.config.d:
        raise ShapeError(f"tokens must be (T, {layer.config.d}), got {x.shape}")
    vis, non = _modality_masks(layout, x.shape[0])
    mean_v, mean_n = x[vis].mean(axis=0), x[non].mean(axis=0)
    lam, rcache = _router_forward(layer.router, mean_v, mean_n)
    out_o, c_o = _expert_forward(layer.e_o, x)
    out_v, c_v = _expert_forward(layer.e_v, x[vis])
    out_n, c_n = _expert_forward(layer.e_n, x[non])
    y = np.asarray(layer.frozen_ffn(x), dtype=np.float64) + out_o
    y[vis] += lam * out_v
    y[non] += (1.0 - lam) * out_n
    cache = dict(x=x, vis=vis, non=non, lam=lam, rcache=rcache,
                 c_o=c_o, c_v=c_v, c_n=c_n, out_v=out_v, out_n=out_n)
    return y, cache


def mose_layer_forward(layer, tokens, layout):
    """Frozen path + omni expert + router-weighted modality expert for every token."""
    y, _ = _forward(layer, tokens, layout)
    return y


# --- backward --------------------------------------------------------------


def _expert_backward(expert, x, cache, g):
    z, u, alpha = cache
    d_b = np.einsum("tn,td,tr->ndr", alpha, g, z)
    d_z = np.einsum("tn,ndr,td->tr", alpha, expert.b, g)
    d_a = d_z.T @ x
    d_alpha = np.einsum("td,tnd->tn", g, u)
    d_logit = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
    d_w = d_logit.T @ x
    d_x = d_z @ expert.a + d_logit @ expert.w_gate
    return {"a": d_a, "b": d_b, "w_gate": d_w}, d_x


def mose_layer_backward(layer, tokens, layout, upstream):
    """Analytic gradients of ``sum(upstream * forward(tokens))``.

    Returns a dict keyed like :meth:`MoSELayer.parameters`, plus ``"tokens"``
    when ``frozen_ffn`` provides a ``vjp(x, g)`` method (the token gradient
    includes the router's dependence on the modality means).
    """
    y, c = _forward(layer, tokens, layout)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != y.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {y.shape}")
    x, vis, non, lam = c["x"], c["vis"], c["non"], c["lam"]
    grads = {}
    d_x = np.zeros_like(x)

    gr, dx = _expert_backward(layer.e_o, x, c["c_o"], g)
    d_x += dx
    grads.update({f"e_o.{k}": v for k, v in gr.items()})
    gr, dx = _expert_backward(layer.e_v, x[vis], c["c_v"], lam * g[vis])
    d_x[vis] += dx
    grads.update({f"e_v.{k}": v for k, v in gr.items()})
    gr, dx = _expert_backward(layer.e_n, x[non], c["c_n"], (1.0 - lam) * g[non])
    d_x[non] += dx
    grads.update({f"e_n.{k}": v for k, v in gr.items()})

    # lam = 1/2 + eps * tanh(w2 . tanh(w1 q + b1) + b2)
    d_lam = float((g[vis] * c["out_v"]).sum() - (g[non] * c["out_n"]).sum())
    q, h, t = c["rcache"]
    r = layer.router
    d_f = d_lam * r.epsilon * (1.0 - t * t)
    d_pre = d_f * r.w2 * (1.0 - h * h)
    grads["router.w1"] = np.outer(d_pre, q)
    grads["router.b1"] = d_pre
    grads["router.w2"] = d_f * h
    grads["router.b2"] = np.array(d_f)

    vjp = getattr(layer.frozen_ffn, "vjp", None)
    if vjp is not None:
        d_q = r.w1.T @ d_pre
        dim = x.shape[1]
        d_x[vis] += d_q[:dim] / vis.sum()
        d_x[non] += d_q[dim:] / non.sum()
        d_x += vjp(x, g)
        grads["tokens"] = d_x
    return grads


# --- parameter accounting ----------------------------------------------------


def param_count(config, symmetric=False, include_router=True, d_hidden=None):
    """Trainable parameters of one layer (three experts, optional router)."""
    d, r, n = config.d, config.r, config.n_experts
    if symmetric:
        per_expert = n * (r * d + d * r) + n * d
    else:
        per_expert = r * d + n * d * r + n * d
    total = 3 * per_expert
    if include_router:
        h = d if d_hidden is None else d_hidden
        total += 2 * d * h + h + h + 1
    return total


def expert_param_count(config, symmetric=False):
    return (param_count(config, symmetric, include_router=False)) // 3


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(layer, path):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    params = layer.parameters()
    cfg = layer.config
    manifest = {
        "format": "modbal-mose-v1",
        "config": {"d": cfg.d, "r": cfg.r, "n_experts": cfg.n_experts},
        "epsilon": layer.router.epsilon,
        "router_hidden": int(layer.router.w1.shape[0]),
        "dtype": "float64-le",
        "params": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
    }
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(blob)


def load_checkpoint(path, frozen_ffn):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "modbal-mose-v1":
        raise ValidationError(f"unknown checkpoint format {manifest.get('format')!r}")
    cfg = ExpertConfig(**manifest["config"])
    hidden = manifest["router_hidden"]
    template = MoSELayer.init(cfg, _ZeroRng(), frozen_ffn, manifest["epsilon"], hidden)
    expected = {k: list(np.shape(v)) for k, v in template.parameters().items()}
    declared = [(p["name"], p["shape"]) for p in manifest["params"]]
    if [n for n, _ in declared] != list(expected):
        raise ValidationError("checkpoint parameter names/order do not match the layer")
    for name, shape in declared:
        if shape != expected[name]:
            raise ValidationError(f"{name}: shape {shape}, expected {expected[name]}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    need = sum(int(np.prod(s)) for _, s in declared)
    if flat.size != need:
        raise ValidationError(f"binary holds {flat.size} floats, manifest declares {need}")
    layer, off = template, 0
    for name, shape in declared:
        size = int(np.prod(shape))
        layer = layer.with_parameter(name, flat[off:off + size].reshape(shape).astype(np.float64))
        off += size
    return layer


class _ZeroRng:
    def uniform(self, low, high, size):
        return np.zeros(size)

    def split(self, tag):
        return self
