"""Attention reallocation: move attention mass from audio to visual tokens in biased heads.

For a biased head the transferred mass is chosen so that the head's
audio/visual ratio drops to its layer's ratio, total audio+visual mass is
conserved, and the split inside each modality keeps its original shape.
"""

from dataclasses import dataclass, field

import numpy as np

from .analysis import biased_head_mask, ratio
from .errors import ArgumentError, OracleError, ReallocationError
from .modality import AttentionDump, ModalityTag, StepAttention, masses

V, A = ModalityTag.VISUAL, ModalityTag.AUDIO


def delta(s_a, s_v, c):
    """Audio mass to move so that ``(s_a - d) / (s_v + d) == c``."""
    return (s_a - c * s_v) / (1.0 + c)


@dataclass
class HeadAdjustment:
    layer: int
    head: int
    delta: float
    audio_scale: float
    visual_scale: float


@dataclass
class ReallocationPlan:
    tau: float
    step: int = 0
    layers: list = field(default_factory=list)   # (layer, c, gate_passed)
    heads: list = field(default_factory=list)    # HeadAdjustment

    @property
    def empty(self):
        return not self.heads

    def to_json(self):
        return {
            "tau": self.tau,
            "step": self.step,
            "layers": [
                {"layer": l, "layer_ratio": "inf" if np.isinf(c) else c, "gate_passed": g}
                for l, c, g in self.layers
            ],
            "heads": [
                {"layer": h.layer, "head": h.head, "delta": h.delta,
                 "audio_scale": h.audio_scale, "visual_scale": h.visual_scale}
                for h in self.heads
            ],
        }


def _scale_rows(rows, a_mask, v_mask, a_scale, v_scale):
    """Multiply audio/visual positions of ``rows`` by per-row factors; text untouched."""
    out = rows.copy()
    out[..., a_mask] = rows[..., a_mask] * a_scale[..., None]
    out[..., v_mask] = rows[..., v_mask] * v_scale[..., None]
    return out


def reallocate_head(row, layout, c):
    """Closed-form reallocation of one attention row towards ratio ``c``.

    Rows already at or below ratio ``c`` are returned unchanged.
    """
    row = np.asarray(row, dtype=np.float64)
    a_mask, v_mask = layout.mask(A, row.shape[-1]), layout.mask(V, row.shape[-1])
    s_a, s_v = row[a_mask].sum(), row[v_mask].sum()
    if s_a == 0:
        return row.copy()
    d = delta(s_a, s_v, c)
    if d <= 0:
        return row.copy()
    if s_v == 0:
        raise ReallocationError("head has no visual mass to receive reallocated attention")
    return _scale_rows(row, a_mask, v_mask, np.array(1.0 - d / s_a), np.array(1.0 + d / s_v))


def reallocate_weights(weights, layout, tau):
    """Apply the gated reallocation to weights shaped ``(..., heads, keys)``.

    The second-to-last axis is the head axis of one layer; any leading axes
    (layers, batch) are independent layers. Returns ``(new, mask, d, c)``
    where ``mask`` flags the reallocated heads and ``d`` their transfers.
    Unflagged rows are returned bit-identical.
    """
    w = np.asarray(weights, dtype=np.float64)
    mask, c, _ = biased_head_mask(w, layout, tau)
    gate = c > tau
    if np.any(gate & np.isinf(c)):
        raise ReallocationError("layer passes the gate with no visual mass (layer ratio is infinite)")
    if not mask.any():
        return w.copy(), mask, np.zeros(mask.shape), c
    a_mask, v_mask = layout.mask(A, w.shape[-1]), layout.mask(V, w.shape[-1])
    s_a = masses(w, layout, A)
    s_v = masses(w, layout, V)
    if np.any(mask & (s_v == 0)):
        raise ReallocationError("biased head has no visual mass to receive reallocated attention")
    c_b = np.broadcast_to(np.expand_dims(c, -1), s_a.shape)
    d = np.where(mask, delta(s_a, s_v, c_b), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a_scale = np.where(mask, 1.0 - d / s_a, 1.0)
        v_scale = np.where(mask, 1.0 + d / s_v, 1.0)
    scaled = _scale_rows(w, a_mask, v_mask, a_scale, v_scale)
    out = np.where(mask[..., None], scaled, w)
    return out, mask, d, c


def reallocate_layer(step, layer, layout, tau):
    """Reallocated ``(heads, keys)`` slice for one layer of ``step``."""
    out, _, _, _ = reallocate_weights(step.weights[layer], layout, tau)
    return out


def reallocate_step(step, layout, tau, step_index=0):
    """Reallocate every layer of one step; returns the new step and its plan."""
    w = step.weights
    out, mask, d, c = reallocate_weights(w, layout, tau)
    plan = ReallocationPlan(tau=tau, step=step_index)
    s_a, s_v = masses(w, layout, A), masses(w, layout, V)
    for l in range(w.shape[0]):
        plan.layers.append((l, float(c[l]), bool(c[l] > tau)))
        for h in np.flatnonzero(mask[l]):
            plan.heads.append(HeadAdjustment(
                l, int(h), float(d[l, h]),
                float(1.0 - d[l, h] / s_a[l, h]), float(1.0 + d[l, h] / s_v[l, h]),
            ))
    return StepAttention(out), plan


def reallocate_dump(dump, tau=1.0, step=None):
    """Reallocate all steps (or only ``step``) of a dump.

    Returns the adjusted dump and one plan per processed step.
    """
    indices = range(len(dump.steps)) if step is None else [step]
    steps = list(dump.steps)
    plans = []
    for i in indices:
        steps[i], plan = reallocate_step(dump.steps[i], dump.layout, tau, step_index=i)
        plans.append(plan)
    new = AttentionDump(dump.model, dump.layout, dump.num_layers, dump.num_heads, tuple(steps))
    return new, plans


def oracle_reallocate(row, layout, c, max_iter=4000):
    """Solve the reallocation constraints numerically.

    Bisects on the transferred mass ``t`` for ``(S_A - t) = c (S_V + t)``,
    then rebuilds the row from the proportional-change conditions
    ``w'(x) - w(x) = (w(x) / S) * (S' - S)`` for each modality.
    """
    row = np.asarray(row, dtype=np.float64)
    tags = layout.tags(row.shape[-1])
    s_a = sum(x for x, t in zip(row, tags) if t is A)
    s_v = sum(x for x, t in zip(row, tags) if t is V)

    def g(t):
        return (s_a - t) - c * (s_v + t)

    g0 = g(0.0)
    if g0 == 0 or s_a == 0:
        return row.copy()
    if g0 < 0:
        raise OracleError("head ratio already below target; no audio-to-visual transfer exists")
    if s_v == 0:
        raise OracleError("no visual mass: proportional visual update is undefined")
    lo, hi = 0.0, s_a
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    t = lo if abs(g(lo)) <= abs(g(hi)) else hi
    out = row.copy()
    for j, tag in enumerate(tags):
        if tag is A:
            out[j] = row[j] + (row[j] / s_a) * (-t)
        elif tag is V:
            out[j] = row[j] + (row[j] / s_v) * t
    return out


def pai_baseline(weights, layout, alpha):
    """Static visual amplification: scale visual weights by ``1 + alpha`` and renormalise."""
    if alpha < 0:
        raise ArgumentError("alpha must be non-negative")
    w = np.asarray(weights, dtype=np.float64)
    if alpha == 0:
        return w.copy()
    v_mask = layout.mask(V, w.shape[-1])
    out = w.copy()
    out[..., v_mask] *= 1.0 + alpha
    return out / out.sum(axis=-1, keepdims=True)


class ReallocationHook:
    """Decoder hook applying gated reallocation to every layer it sees.

    Counts gated layers and reallocated heads across calls.
    """

    def __init__(self, layout, tau=1.0):
        self.layout = layout
        self.tau = tau
        self.layer_calls = 0
        self.gated_layers = 0
        self.biased_heads = 0

    def __call__(self, layer, weights):
        out, mask, _, c = reallocate_weights(weights, self.layout, self.tau)
        self.layer_calls += int(np.size(c))
        self.gated_layers += int(np.count_nonzero(c > self.tau))
        self.biased_heads += int(np.count_nonzero(mask))
        return out


class PaiHook:
    def __init__(self, layout, alpha):
        self.layout = layout
        self.alpha = alpha

    def __call__(self, layer, weights):
        return pai_baseline(weights, self.layout, self.alpha)
