import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modbal.analysis import biased_head_mask, head_ratio, layer_ratio
from modbal.errors import ArgumentError, OracleError, ReallocationError
from modbal.modality import AttentionDump, ModalityTag, StepAttention, TokenLayout, masses, write_dump
from modbal.reallocation import (
    PaiHook, ReallocationHook, delta, oracle_reallocate, pai_baseline, reallocate_dump, reallocate_head,
    reallocate_layer, reallocate_step, reallocate_weights,
)

from conftest import random_step

V, A, T = ModalityTag.VISUAL, ModalityTag.AUDIO, ModalityTag.TEXT
TINY = TokenLayout.from_counts(1, 1, 1)


def test_delta_examples():
    assert delta(0.6, 0.2, 1.0) == pytest.approx(0.2)
    assert delta(0.4, 0.2, 2.0) == 0.0
    assert delta(0.7, 0.1, 0.0) == 0.7


def test_reallocate_head_example():
    out = reallocate_head(np.array([0.2, 0.6, 0.2]), TINY, 1.0)
    assert np.allclose(out, [0.4, 0.4, 0.2], atol=1e-15)
    assert out[2] == 0.2
    assert np.allclose(out, oracle_reallocate(np.array([0.2, 0.6, 0.2]), TINY, 1.0), atol=1e-9)


def test_reallocate_head_at_ratio_is_identity():
    row = np.array([0.2, 0.4, 0.4])
    assert np.array_equal(reallocate_head(row, TINY, 2.0), row)
    assert np.array_equal(oracle_reallocate(row, TINY, 2.0), row)


def test_intra_modality_shape_preserved():
    lay = TokenLayout.from_counts(1, 2, 1)
    row = np.array([0.2, 0.4, 0.2, 0.2])   # S_A = 0.6, S_V = 0.2
    out = reallocate_head(row, lay, 1.0)   # delta = 0.2
    assert out[1] == pytest.approx(4 / 15) and out[2] == pytest.approx(2 / 15)
    assert out[1] / out[2] == pytest.approx(2.0)


def test_no_visual_mass_raises():
    with pytest.raises(ReallocationError):
        reallocate_head(np.array([0.0, 0.6, 0.4]), TINY, 1.0)
    with pytest.raises(OracleError):
        oracle_reallocate(np.array([0.0, 0.6, 0.4]), TINY, 1.0)


def test_no_audio_mass_is_identity():
    row = np.array([0.6, 0.0, 0.4])
    assert np.array_equal(reallocate_head(row, TINY, 1.0), row)


def test_oracle_infeasible_below_target():
    with pytest.raises(OracleError):
        oracle_reallocate(np.array([0.5, 0.1, 0.4]), TINY, 1.0)


def layer(*heads):
    return StepAttention(np.array([heads], dtype=np.float64))


def test_gate_fails_layer_identical():
    step = layer([0.5, 0.3, 0.2], [0.5, 0.5, 0.0])   # c = 0.8
    assert layer_ratio(step, 0, TINY) == pytest.approx(0.8)
    out = reallocate_layer(step, 0, TINY, 1.0)
    assert out.tobytes() == step.weights[0].tobytes()


def test_gate_passes_biased_head_only():
    step = layer([0.2, 0.6, 0.2], [0.2, 0.2, 0.6])   # c = 2, c_h = [3, 1]
    out = reallocate_layer(step, 0, TINY, 1.0)
    assert out[1].tobytes() == step.weights[0, 1].tobytes()
    assert out[0, 1] / out[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_tau_zero_gates_every_layer(layout):
    step = random_step(np.random.default_rng(0), layout=layout, audio_boost=0.0)
    _, plan = reallocate_step(step, layout, 0.0)
    assert all(g for _, _, g in plan.layers)
    assert not plan.empty


def test_infinite_layer_ratio_raises():
    step = layer([0.0, 0.5, 0.5], [0.0, 0.2, 0.8])
    with pytest.raises(ReallocationError):
        reallocate_layer(step, 0, TINY, 1.0)


def test_unbiased_dump_unchanged(layout):
    # visual-heavy rows never pass the gate
    step = random_step(np.random.default_rng(1), layout=layout, audio_boost=0.0)
    d = AttentionDump("t", layout, 8, 8, (step,))
    new, plans = reallocate_dump(d, tau=1.0)
    assert write_dump(new) == write_dump(d)
    assert plans[0].empty


def check_constraints(before, after, layout, tau):
    """Per-head constraint suite; returns the number of reallocated heads."""
    mask, c, _ = biased_head_mask(before, layout, tau)
    keys = before.shape[-1]
    am, vm, tm = (layout.mask(t, keys) for t in (A, V, T))
    count = 0
    for idx in np.ndindex(mask.shape):
        w0, w1 = before[idx], after[idx]
        if not mask[idx]:
            assert w1.tobytes() == w0.tobytes()
            continue
        count += 1
        s_a, s_v = w1[am].sum(), w1[vm].sum()
        assert abs(s_a / s_v - c[idx[:-1]]) <= 1e-9
        assert abs((s_a + s_v) - (w0[am].sum() + w0[vm].sum())) <= 1e-12
        ra, rv = w1[am] / w0[am], w1[vm] / w0[vm]
        assert np.ptp(ra) <= 1e-12 and np.ptp(rv) <= 1e-12
        assert w1[tm].tobytes() == w0[tm].tobytes()
        assert np.all(w1 >= 0)
        assert abs(w1.sum() - w0.sum()) <= 1e-12
    return count


def test_constraint_suite_random(layout):
    rng = np.random.default_rng(2)
    total = 0
    for _ in range(20):
        step = random_step(rng, layout=layout)
        new, _ = reallocate_step(step, layout, 1.0)
        total += check_constraints(step.weights, new.weights, layout, 1.0)
    assert total > 0


def test_plan_fields(layout):
    step = random_step(np.random.default_rng(3), layout=layout)
    _, plan = reallocate_step(step, layout, 1.0)
    assert not plan.empty
    s_a, s_v = masses(step.weights, layout, A), masses(step.weights, layout, V)
    for h in plan.heads:
        assert h.delta > 0
        assert 0 <= h.audio_scale <= 1 and h.visual_scale >= 1
        assert h.audio_scale == pytest.approx(1 - h.delta / s_a[h.layer, h.head])
        assert h.visual_scale == pytest.approx(1 + h.delta / s_v[h.layer, h.head])
    doc = plan.to_json()
    assert len(doc["layers"]) == 8 and len(doc["heads"]) == len(plan.heads)


def test_second_pass_does_not_raise_ratio(layout):
    step = random_step(np.random.default_rng(4), layout=layout)
    once, _ = reallocate_step(step, layout, 1.0)
    twice, _ = reallocate_step(once, layout, 1.0)
    for l in range(8):
        assert layer_ratio(once, l, layout) <= layer_ratio(step, l, layout) + 1e-12
        assert layer_ratio(twice, l, layout) <= layer_ratio(once, l, layout) + 1e-12


def test_dump_step_restriction(layout):
    rng = np.random.default_rng(5)
    d = AttentionDump("t", layout, 8, 8, (random_step(rng, layout=layout), random_step(rng, layout=layout)))
    new, plans = reallocate_dump(d, 1.0, step=1)
    assert len(plans) == 1 and plans[0].step == 1
    assert new.steps[0] is d.steps[0]
    assert not np.array_equal(new.steps[1].weights, d.steps[1].weights)


@settings(max_examples=60)
@given(st.integers(0, 2 ** 32))
def test_closed_form_matches_oracle(seed):
    lay = TokenLayout.from_counts(5, 3, 2)
    step = random_step(np.random.default_rng(seed), 2, 4, lay)
    mask, c, _ = biased_head_mask(step.weights, lay, 0.0)
    for l, h in zip(*np.nonzero(mask)):
        row = step.weights[l, h]
        assert np.max(np.abs(reallocate_head(row, lay, c[l]) - oracle_reallocate(row, lay, c[l]))) <= 1e-9


def test_weights_vectorised_matches_per_head(layout):
    step = random_step(np.random.default_rng(6), layout=layout)
    out, mask, d, c = reallocate_weights(step.weights, layout, 1.0)
    for l, h in zip(*np.nonzero(mask)):
        assert np.allclose(out[l, h], reallocate_head(step.weights[l, h], layout, c[l]), atol=1e-15)


def test_pai_examples():
    row = np.array([0.2, 0.6, 0.2])
    assert np.array_equal(pai_baseline(row, TINY, 0.0), row)
    out = pai_baseline(row, TINY, 1.0)
    assert out[0] == pytest.approx(1 / 3)
    assert out[2] != row[2]
    assert out.sum() == pytest.approx(1.0)
    with pytest.raises(ArgumentError):
        pai_baseline(row, TINY, -1.0)


def test_hooks_count(layout):
    w = random_step(np.random.default_rng(7), layout=layout).weights[:, None]   # (L, B=1, H, K)
    hook = ReallocationHook(layout, 1.0)
    for l in range(8):
        hook(l, w[l])
    assert hook.layer_calls == 8 and hook.biased_heads > 0
    assert np.allclose(PaiHook(layout, 0.5)(0, w[0]).sum(-1), 1.0)


def test_head_ratio_hits_layer_ratio(layout):
    step = random_step(np.random.default_rng(8), layout=layout)
    new, plan = reallocate_step(step, layout, 1.0)
    c = {l: ci for l, ci, _ in plan.layers}
    for h in plan.heads:
        assert head_ratio(new, h.layer, h.head, layout) == pytest.approx(c[h.layer], abs=1e-9)
