"""Experiment drivers: conflict evaluation, imbalance sweep, ablations and gradcheck.

Sample evaluation is split into fixed shards whose boundaries depend only on
the sample count and sequence length. Workers, when used, process whole shards
and results are reduced in shard order. A report is therefore byte-identical
for any worker count.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .analysis import biased_head_mask, default_mid_range
from .errors import ArgumentError
from .experts import (
    ExpertConfig, FrozenFFN, MoSELayer, Router, mose_layer_backward, mose_layer_forward,
    param_count, route_lambda,
)
from .modality import ModalityTag, TokenLayout, masses
from .numerics import Rng, central_diff_grad
from .decoder import GenConfig, Scenario, ToyConfig, ToyDecoder, duplicate_audio, synth_batch
from .reallocation import PaiHook, ReallocationHook

V, A = ModalityTag.VISUAL, ModalityTag.AUDIO

# attention entries (B * H * T * T) per prefix shard, ~13 MB of float64
SHARD_BUDGET = 32 * 8 * 81 * 81


@dataclass(frozen=True)
class Intervention:
    kind: str = "none"      # none | ar | pai
    tau: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "ar", "pai"):
            raise ArgumentError(f"unknown intervention {self.kind!r}")
        if self.tau < 0:
            raise ArgumentError("tau must be non-negative")
        if self.alpha < 0:
            raise ArgumentError("alpha must be non-negative")

    def hook(self, layout):
        if self.kind == "ar":
            return ReallocationHook(layout, self.tau)
        if self.kind == "pai":
            return PaiHook(layout, self.alpha)
        return None

    def to_json(self):
        out = {"kind": self.kind}
        if self.kind == "ar":
            out["tau"] = self.tau
        elif self.kind == "pai":
            out["alpha"] = self.alpha
        return out


def _shards(n, layout, heads):
    T = layout.total
    size = max(1, SHARD_BUDGET // (heads * T * T))
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def _inputs(gen, scenario, seed, start, stop, k):
    samples = synth_batch(gen, scenario, stop - start, seed, start=start)
    if k > 1:
        samples = [duplicate_audio(s, k) for s in samples]
    return np.stack([s.embeddings for s in samples]), np.array([s.true_label for s in samples])


def _stats(decoder, x, states, intervention, stat_tau):
    """Features and attention statistics for one shard."""
    layout = decoder.config.layout
    _, weights, feats = decoder.forward_batch(x, hook=intervention.hook(layout), states=states)
    w = weights[0]                                              # (B, L, H, K), pre-hook
    uap = np.stack([masses(w, layout, V).mean(-1), masses(w, layout, A).mean(-1)], -1)
    mask, c, _ = biased_head_mask(w, layout, stat_tau)
    return {
        "features": feats,
        "uap_sum": uap.sum(axis=0),                             # (L, 2)
        "biased_sum": mask.sum(axis=(0, 2)),                     # (L,)
        "gated_sum": (c > stat_tau).sum(axis=0),                 # (L,)
    }


def _run_shard(args):
    """Worker entry point: rebuild the shard from its description and evaluate it."""
    config, gen, seed, k, scenario, start, stop, intervention, stat_tau = args
    decoder = ToyDecoder(config)
    if k > 1:
        decoder = decoder.with_layout(_dup_layout(config.layout, k))
    x, _ = _inputs(gen, scenario, seed, start, stop, k)
    return _stats(decoder, x, decoder.encode_prefix(x), intervention, stat_tau)


def _dup_layout(layout, k):
    return TokenLayout.from_counts(layout.m, k * layout.n, layout.s)


class ConflictBench:
    """Model, samples and cached prefix states for one seed.

    Parameters
    ----------
    config : ToyConfig
        Model configuration; its ``seed`` is replaced by ``seed``.
    n : int
        Samples per scenario.
    seed : int
        Seeds both the model weights and the sample streams.
    scenarios : sequence of Scenario
    gen : GenConfig, optional
    k : int
        Audio duplication factor applied to every sample.
    workers : int
        Process count; ``1`` evaluates in-process and caches prefix states.
    """

    def __init__(self, config=None, n=100, seed=0, scenarios=tuple(Scenario), gen=None, k=1, workers=1):
        if n < 1:
            raise ArgumentError("n must be positive")
        if k < 1:
            raise ArgumentError("k must be >= 1")
        if workers < 1:
            raise ArgumentError("workers must be positive")
        self.config = replace(config or ToyConfig(), seed=seed)
        self.gen = gen or GenConfig.for_model(self.config)
        self.n, self.seed, self.k, self.workers = n, seed, k, workers
        self.scenarios = tuple(Scenario(s) for s in scenarios)
        self.decoder = ToyDecoder(self.config)
        self.layout = _dup_layout(self.config.layout, k) if k > 1 else self.config.layout
        if k > 1:
            self.decoder = self.decoder.with_layout(self.layout)
        self.shards = _shards(n, self.layout, self.config.heads)
        self.labels = {
            sc: np.array([s.true_label for s in synth_batch(self.gen, sc, n, seed)]) for sc in self.scenarios
        }
        self._cache = {}

    def _local(self, sc, start, stop, intervention, stat_tau):
        key = (sc, start)
        if key not in self._cache:
            x, _ = _inputs(self.gen, sc, self.seed, start, stop, self.k)
            self._cache[key] = (x, self.decoder.encode_prefix(x))
        x, states = self._cache[key]
        return _stats(self.decoder, x, states, intervention, stat_tau)

    def evaluate(self, intervention=Intervention(), scenarios=None, stat_tau=None):
        """Per-scenario features and summed attention statistics."""
        scenarios = self.scenarios if scenarios is None else tuple(Scenario(s) for s in scenarios)
        stat_tau = intervention.tau if stat_tau is None else stat_tau
        jobs = [(sc, a, b) for sc in scenarios for a, b in self.shards]
        if self.workers == 1:
            parts = [self._local(sc, a, b, intervention, stat_tau) for sc, a, b in jobs]
        else:
            args = [(self.config, self.gen, self.seed, self.k, sc, a, b, intervention, stat_tau)
                    for sc, a, b in jobs]
            with ProcessPoolExecutor(self.workers) as pool:
                parts = list(pool.map(_run_shard, args))
        out, i = {}, 0
        for sc in scenarios:
            chunk = parts[i:i + len(self.shards)]
            i += len(self.shards)
            res = {"features": np.concatenate([p["features"] for p in chunk])}
            for key in ("uap_sum", "biased_sum", "gated_sum"):
                total = chunk[0][key]
                for p in chunk[1:]:
                    total = total + p[key]
                res[key] = total
            out[sc] = res
        return out

    def correct(self, results, sc):
        pred = self.decoder.classify(results[sc]["features"]).argmax(axis=1)
        return int(np.count_nonzero(pred == self.labels[sc]))

    def fit_head(self, steps=300, lr=0.5):
        """Refit the class head on the consistent samples (backbone frozen)."""
        res = self.evaluate(Intervention(), scenarios=[Scenario.CONSISTENT])
        self.decoder.fit_head(res[Scenario.CONSISTENT]["features"], self.labels[Scenario.CONSISTENT], steps, lr)

    def report(self, results, intervention, stat_tau):
        L = self.config.layers
        lo, hi = default_mid_range(L)
        subsets, uap_total, biased, gated, count = {}, np.zeros((L, 2)), np.zeros(L), np.zeros(L), 0
        for sc, res in results.items():
            uap = res["uap_sum"] / self.n
            subsets[sc.value] = {
                "n": self.n,
                "correct": self.correct(results, sc),
                "accuracy": self.correct(results, sc) / self.n,
                "uap_mid": {"uap_v": float(uap[lo:hi + 1, 0].mean()), "uap_a": float(uap[lo:hi + 1, 1].mean())},
            }
            uap_total += res["uap_sum"]
            biased += res["biased_sum"]
            gated += res["gated_sum"]
            count += self.n
        uap = uap_total / count
        return {
            "seed": self.seed,
            "k": self.k,
            "intervention": intervention.to_json(),
            "subsets": subsets,
            "uap": {
                "per_layer": [{"layer": l, "uap_v": float(v), "uap_a": float(a)} for l, (v, a) in enumerate(uap)],
                "mid_range": [lo, hi],
                "mid_layer": {"uap_v": float(uap[lo:hi + 1, 0].mean()), "uap_a": float(uap[lo:hi + 1, 1].mean())},
            },
            "biased_heads": {
                "tau": stat_tau,
                "mean_per_layer": [float(b) / count for b in biased],
                "gated_fraction": [float(g) / count for g in gated],
            },
        }


def run_conflict_eval(config=None, n=100, intervention=Intervention(), seed=0,
                      scenarios=tuple(Scenario), fit_head=False, workers=1):
    """Accuracy per subset, UAP summary and biased-head statistics for one intervention.

    Attention statistics come from the pre-hook weights, with the bias gate
    evaluated at the intervention's ``tau``.
    """
    scenarios = tuple(Scenario(s) for s in scenarios)
    if fit_head and Scenario.CONSISTENT not in scenarios:
        scenarios = scenarios + (Scenario.CONSISTENT,)
    bench = ConflictBench(config, n, seed, scenarios, workers=workers)
    if fit_head:
        bench.fit_head()
    res = bench.evaluate(intervention)
    out = bench.report(res, intervention, intervention.tau)
    out["n"] = n
    out["fit_head"] = fit_head
    return out


def _mean_accuracy(benches, intervention, scenarios):
    acc = {sc: [] for sc in scenarios}
    for b in benches:
        res = b.evaluate(intervention, scenarios=scenarios)
        for sc in scenarios:
            acc[sc].append(b.correct(res, sc) / b.n)
    return {sc: float(np.mean(v)) for sc, v in acc.items()}


def match_pai_alpha(benches, target, baseline, alpha_max=64.0, iters=8):
    """Smallest PAI ``alpha`` (to bisection tolerance) whose mean video-aligned
    accuracy gain over ``baseline`` reaches ``target``.

    Doubles from 0.5 to bracket the target, then bisects. Returns ``None``
    when even ``alpha_max`` falls short.
    """
    sc = [Scenario.VIDEO_ALIGNED]

    def reaches(alpha):
        return _mean_accuracy(benches, Intervention("pai", alpha=alpha), sc)[sc[0]] - baseline >= target - 1e-12

    lo, hi = 0.0, 0.5
    while not reaches(hi):
        lo, hi = hi, 2 * hi
        if hi > alpha_max:
            return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if reaches(mid):
            hi = mid
        else:
            lo = mid
    return hi


def run_conflict_trend(config=None, seeds=range(10), n=60, tau=1.0, workers=1):
    """AR against PAI at matched video-aligned gain, averaged over seeds."""
    va, aa = Scenario.VIDEO_ALIGNED, Scenario.AUDIO_ALIGNED
    benches = [ConflictBench(config, n, s, (va, aa), workers=workers) for s in seeds]
    base = _mean_accuracy(benches, Intervention(), (va, aa))
    ar = _mean_accuracy(benches, Intervention("ar", tau=tau), (va, aa))
    gain = ar[va] - base[va]
    alpha = match_pai_alpha(benches, gain, base[va]) if gain > 0 else None
    pai = _mean_accuracy(benches, Intervention("pai", alpha=alpha), (va, aa)) if alpha is not None else None

    def row(acc):
        return None if acc is None else {"video_aligned": acc[va], "audio_aligned": acc[aa]}

    return {
        "seeds": list(seeds),
        "n": n,
        "tau": tau,
        "none": row(base),
        "ar": row(ar),
        "pai": row(pai),
        "pai_alpha": alpha,
        "ar_video_gain": gain,
        "ar_audio_drop": base[aa] - ar[aa],
        "pai_audio_drop": None if pai is None else base[aa] - pai[aa],
    }


DEFAULT_KS = (1, 50, 100, 200, 256)


def run_imbalance_sweep(config=None, ks=DEFAULT_KS, n=16, seed=0, uniform=False, fit_head=False, workers=1):
    """Duplicate audio tokens ``k`` times and evaluate, optionally refitting the class head per ``k``.

    ``uniform=True`` runs the uniform-logit control where the audio share
    is exactly ``k n / (k n + m + s)``.
    """
    ks = list(ks)
    if not ks or any(k < 1 for k in ks):
        raise ArgumentError("ks must be non-empty with every k >= 1")
    config = replace(config or ToyConfig(), uniform_logits=uniform)
    rows = []
    for k in ks:
        bench = ConflictBench(config, n, seed, tuple(Scenario), k=k, workers=workers)
        if fit_head:
            bench.fit_head()
        res = bench.evaluate(Intervention(), stat_tau=1.0)
        rep = bench.report(res, Intervention(), 1.0)
        lay = bench.layout
        rows.append({
            "k": k,
            "audio_tokens": lay.n,
            "uap_a": rep["uap"]["mid_layer"]["uap_a"],
            "uap_v": rep["uap"]["mid_layer"]["uap_v"],
            "uap_a_uniform": lay.n / lay.total,
            "accuracy": {name: s["accuracy"] for name, s in rep["subsets"].items()},
        })
    return {"seed": seed, "n": n, "uniform": uniform, "fit_head": fit_head, "rows": rows}


def ablate_tau(config=None, taus=(0.0, 1.0, 2.0, 3.0), n=60, seeds=range(3), workers=1):
    """Subset accuracy and gate statistics under AR for each threshold."""
    va, aa = Scenario.VIDEO_ALIGNED, Scenario.AUDIO_ALIGNED
    benches = [ConflictBench(config, n, s, (va, aa), workers=workers) for s in seeds]
    rows = []
    for tau in taus:
        acc = {sc: [] for sc in (va, aa)}
        gated = []
        for b in benches:
            res = b.evaluate(Intervention("ar", tau=tau))
            for sc in (va, aa):
                acc[sc].append(b.correct(res, sc) / b.n)
            gated.append(sum(float(res[sc]["gated_sum"].sum()) for sc in (va, aa)) / (2 * b.n * b.config.layers))
        rows.append({"tau": tau, "video_aligned": float(np.mean(acc[va])),
                     "audio_aligned": float(np.mean(acc[aa])), "gated_fraction": float(np.mean(gated))})
    return {"n": n, "seeds": list(seeds), "rows": rows}


def ablate_epsilon(epsilons=(0.0, 0.05, 0.1, 0.2, 0.3, 0.5), d=16, samples=1000, seed=0):
    """Observed and attainable router weight range for each regularisation strength.

    The attainable endpoints come from routers whose output bias saturates
    ``tanh`` in either direction.
    """
    rng = Rng(seed)
    means = rng.split(0).normal(0, 1, (samples, 2, d))
    rows = []
    for i, eps in enumerate(epsilons):
        router = Router.random(d, rng.split(1 + i), epsilon=eps)
        lam = np.array([route_lambda(router, v, nb) for v, nb in means])
        ends = [route_lambda(replace(router, w2=np.zeros_like(router.w2), b2=sign * 40.0), means[0, 0], means[0, 1])
                for sign in (-1, 1)]
        rows.append({"epsilon": eps, "bound": [0.5 - eps, 0.5 + eps], "observed": [float(lam.min()), float(lam.max())],
                     "attained": ends})
    return {"d": d, "samples": samples, "rows": rows}


def ablate_experts(ns=(1, 2, 3, 4), d=4096, r=64, d_hidden=None):
    """Asymmetric against symmetric parameter counts for each expert count."""
    rows = []
    for n in ns:
        cfg = ExpertConfig(d, r, n)
        rows.append({
            "n_experts": n,
            "asymmetric": param_count(cfg, symmetric=False, include_router=True, d_hidden=d_hidden),
            "symmetric": param_count(cfg, symmetric=True, include_router=True, d_hidden=d_hidden),
        })
    return {"d": d, "r": r, "rows": rows}


def rel_error(analytic, numeric):
    """Largest absolute deviation relative to the larger gradient magnitude of the tensor."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(d=8, r=2, n_experts=2, h=1e-5, seed=0, epsilon=0.3, layout=None):
    """Analytic MoSE gradients against central differences for one random instance.

    The loss is ``sum(G * y)`` for a random upstream ``G``; every parameter
    tensor and the input tokens are checked.
    """
    layout = layout or TokenLayout.from_counts(3, 1, 2)
    rng = Rng(seed)
    cfg = ExpertConfig(d, r, n_experts)
    ffn = FrozenFFN.random(d, rng.split(0))
    layer = MoSELayer.random(cfg, rng.split(1), ffn, epsilon=epsilon)
    tokens = rng.split(2).normal(0, 1, (layout.total, d))
    upstream = rng.split(3).normal(0, 1, (layout.total, d))
    analytic = mose_layer_backward(layer, tokens, layout, upstream)

    errors = {}
    for key, value in layer.parameters().items():
        def loss(p, key=key):
            return float(np.sum(upstream * mose_layer_forward(layer.with_parameter(key, p), tokens, layout)))
        errors[key] = rel_error(analytic[key], central_diff_grad(loss, value, h))

    def loss_tokens(t):
        return float(np.sum(upstream * mose_layer_forward(layer, t, layout)))
    errors["tokens"] = rel_error(analytic["tokens"], central_diff_grad(loss_tokens, tokens, h))
    return {
        "config": asdict(cfg),
        "epsilon": epsilon,
        "h": h,
        "seed": seed,
        "max_rel_error": max(errors.values()),
        "errors": errors,
    }
