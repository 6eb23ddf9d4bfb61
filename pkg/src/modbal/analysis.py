"""Attention-bias diagnostics: unimodal attention proportions and audio/visual ratios."""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .modality import ModalityTag, masses

V, A = ModalityTag.VISUAL, ModalityTag.AUDIO


def ratio(s_a, s_v):
    """Audio-to-visual mass ratio with the degenerate cases pinned down.

    ``s_v == 0`` gives ``inf`` when there is audio mass and ``0`` when there
    is none. Works elementwise on arrays.
    """
    s_a = np.asarray(s_a, dtype=np.float64)
    s_v = np.asarray(s_v, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = s_a / s_v
    r = np.where(s_v > 0, r, np.where(s_a > 0, np.inf, 0.0))
    return r[()] if r.ndim == 0 else r


def _check_layer(step, layer):
    if not 0 <= layer < step.layers:
        raise IndexError(f"layer {layer} out of range for {step.layers} layers")


def uap(step, layout, layer):
    """Per-layer (UAP_v, UAP_a): head-averaged visual and audio attention mass."""
    _check_layer(step, layer)
    w = step.weights[layer]
    return float(masses(w, layout, V).mean()), float(masses(w, layout, A).mean())


def default_mid_range(num_layers):
    """Central third of the layers as an inclusive ``(lo, hi)`` pair."""
    lo = num_layers // 3
    hi = max(lo, (2 * num_layers) // 3 - 1)
    return lo, hi


def _resolve_range(dump, rng):
    lo, hi = default_mid_range(dump.num_layers) if rng is None else rng
    if lo > hi:
        raise ArgumentError(f"empty layer range {lo}:{hi}")
    if lo < 0 or hi >= dump.num_layers:
        raise ArgumentError(f"layer range {lo}:{hi} outside [0, {dump.num_layers})")
    return lo, hi


def mid_layer_uap(dump, step=0, layer_range=None):
    """Mean of per-layer UAP over the inclusive ``layer_range``."""
    lo, hi = _resolve_range(dump, layer_range)
    st = dump.steps[step]
    pairs = np.array([uap(st, dump.layout, l) for l in range(lo, hi + 1)])
    return float(pairs[:, 0].mean()), float(pairs[:, 1].mean())


def per_token_profile(dump, step=0, layer_range=None):
    """Attention per key position, averaged over the layer range and all heads."""
    lo, hi = _resolve_range(dump, layer_range)
    return dump.steps[step].weights[lo:hi + 1].mean(axis=(0, 1))


def head_ratio(step, layer, head, layout):
    _check_layer(step, layer)
    row = step.weights[layer, head]
    return float(ratio(masses(row, layout, A), masses(row, layout, V)))


def layer_ratio(step, layer, layout):
    _check_layer(step, layer)
    w = step.weights[layer]
    return float(ratio(masses(w, layout, A).sum(), masses(w, layout, V).sum()))


def biased_head_mask(weights, layout, tau):
    """Biased-head mask for weights shaped ``(..., heads, keys)``.

    A head is biased when its layer passes the gate ``c > tau`` and its own
    ratio strictly exceeds the layer ratio. Returns ``(mask, c, c_h)``.
    """
    s_a = masses(weights, layout, A)
    s_v = masses(weights, layout, V)
    c = ratio(s_a.sum(axis=-1), s_v.sum(axis=-1))
    c_h = ratio(s_a, s_v)
    c_b = np.expand_dims(c, -1)
    mask = (c_b > tau) & (c_h > c_b)
    return mask, c, c_h


def biased_heads(step, layer, layout, tau):
    if tau < 0:
        raise ArgumentError("tau must be non-negative")
    _check_layer(step, layer)
    mask, _, _ = biased_head_mask(step.weights[layer], layout, tau)
    return set(np.flatnonzero(mask).tolist())


@dataclass
class UapReport:
    per_layer: list
    mid_layer_avg: tuple
    mid_range: tuple


@dataclass
class RatioReport:
    layer: list
    head: list
    tau: float


def _json_float(x):
    return "inf" if np.isinf(x) else float(x)


def analyze(dump, step=0, layer_range=None, tau=1.0):
    """Full diagnostic report for one step of a dump, as a JSON-ready dict."""
    lo, hi = _resolve_range(dump, layer_range)
    st = dump.steps[step]
    per_layer = [uap(st, dump.layout, l) for l in range(dump.num_layers)]
    uap_rep = UapReport(per_layer, mid_layer_uap(dump, step, (lo, hi)), (lo, hi))
    ratios = RatioReport(
        [layer_ratio(st, l, dump.layout) for l in range(dump.num_layers)],
        [[head_ratio(st, l, h, dump.layout) for h in range(dump.num_heads)]
         for l in range(dump.num_layers)],
        tau,
    )
    biased = {str(l): sorted(biased_heads(st, l, dump.layout, tau)) for l in range(dump.num_layers)}
    return {
        "step": step,
        "uap": {
            "per_layer": [{"layer": l, "uap_v": v, "uap_a": a} for l, (v, a) in enumerate(uap_rep.per_layer)],
            "mid_range": list(uap_rep.mid_range),
            "mid_layer_avg": {"uap_v": uap_rep.mid_layer_avg[0], "uap_a": uap_rep.mid_layer_avg[1]},
            "per_token_profile": per_token_profile(dump, step, (lo, hi)).tolist(),
        },
        "ratios": {
            "tau": tau,
            "layer": [_json_float(c) for c in ratios.layer],
            "head": [[_json_float(c) for c in row] for row in ratios.head],
        },
        "biased_heads": biased,
    }
