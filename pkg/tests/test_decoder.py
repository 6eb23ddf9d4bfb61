import math

import numpy as np
import pytest

from modbal.decoder import (
    QUERY_FLAG, SALIENCE, SIG0, TYPE_CHANNELS, GenConfig, Scenario, ToyConfig, ToyDecoder, duplicate_audio,
    parse_samples, synth_batch, synth_sample, write_samples,
)
from modbal.errors import ParseError, ShapeError
from modbal.modality import ModalityTag, TokenLayout

V, A, T = ModalityTag.VISUAL, ModalityTag.AUDIO, ModalityTag.TEXT
SMALL = ToyConfig(layers=3, heads=2, d=32, n_classes=4, layout=TokenLayout.from_counts(5, 2, 3), seed=11,
                  audio_heads=1)


def reference_forward(model, x):
    """Full causal self-attention over every position, no caching; returns last-position weights."""
    c = model.config
    h = np.array(x, dtype=np.float64)
    T_, dh = h.shape[0], c.head_dim
    last = []
    for l in range(c.layers):
        upd = np.zeros_like(h)
        rows = np.zeros((c.heads, T_))
        for hd in range(c.heads):
            q = h @ model.wq[l, hd].T
            k = h @ model.wk[l, hd].T
            v = h @ model.wv[l, hd].T
            for t in range(T_):
                if c.uniform_logits:
                    s = np.zeros(t + 1)
                else:
                    s = np.array([q[t] @ k[j] for j in range(t + 1)]) / math.sqrt(dh)
                e = np.exp(s - s.max())
                w = e / e.sum()
                upd[t] += model.wo[l, hd] @ (w @ v[: t + 1])
                if t == T_ - 1:
                    rows[hd] = w
        last.append(rows)
        h = h + upd
    return model.classify(h[-1]), np.array(last), h[-1]


def sample_for(cfg, scenario="consistent", seed=0):
    return synth_sample(GenConfig.for_model(cfg), scenario, seed)


def test_single_layer_single_head_by_hand():
    cfg = ToyConfig(layers=1, heads=1, d=16, n_classes=2, layout=TokenLayout.from_counts(1, 1, 1), seed=3,
                    audio_heads=1)
    model = ToyDecoder(cfg)
    x = sample_for(cfg, seed=4).embeddings
    q = model.wq[0, 0] @ x[2]
    s = np.array([q @ (model.wk[0, 0] @ x[j]) for j in range(3)]) / math.sqrt(16)
    w = np.exp(s - s.max())
    w /= w.sum()
    res = model.forward(sample_for(cfg, seed=4))
    assert np.allclose(res.dump.steps[0].weights[0, 0], w, atol=1e-14)
    out = x[2] + model.wo[0, 0] @ (w @ (x @ model.wv[0, 0].T))
    assert np.allclose(res.features, out, atol=1e-12)


@pytest.mark.parametrize("uniform", [False, True])
def test_cached_decode_matches_reference(uniform):
    cfg = ToyConfig(**{**SMALL.__dict__, "uniform_logits": uniform})
    model = ToyDecoder(cfg)
    s = sample_for(cfg, "video_aligned", 7)
    logits, w, feats = reference_forward(model, s.embeddings)
    res = model.forward(s)
    assert np.allclose(res.logits, logits, atol=1e-10)
    assert np.allclose(res.features, feats, atol=1e-10)
    assert np.allclose(res.dump.steps[0].weights, w, atol=1e-12)


def test_identity_hook_bit_identical():
    model = ToyDecoder(SMALL)
    s = sample_for(SMALL, seed=1)
    a = model.forward(s)
    b = model.forward(s, hook=lambda l, w: w)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert a.dump.steps[0].weights.tobytes() == b.dump.steps[0].weights.tobytes()


def test_hook_sees_layers_in_order_and_record_modes():
    model = ToyDecoder(SMALL)
    s = sample_for(SMALL, seed=2)
    seen = []

    def hook(l, w):
        seen.append((l, w.shape))
        out = np.zeros_like(w)
        out[..., 0] = 1.0
        return out

    pre = model.forward(s, hook=hook, record="pre")
    assert seen == [(l, (1, 2, SMALL.layout.total)) for l in range(3)]
    post = model.forward(s, hook=hook, record="post")
    assert np.all(post.dump.steps[0].weights[..., 0] == 1.0)
    assert not np.all(pre.dump.steps[0].weights[..., 0] == 1.0)


def test_determinism_across_instances():
    s = sample_for(SMALL, seed=3)
    a = ToyDecoder(SMALL).forward(s, steps=3)
    b = ToyDecoder(SMALL).forward(s, steps=3)
    assert a.logits.tobytes() == b.logits.tobytes()
    for x, y in zip(a.dump.steps, b.dump.steps):
        assert x.weights.tobytes() == y.weights.tobytes()


def test_generation_steps_extend_keys():
    model = ToyDecoder(SMALL)
    res = model.forward(sample_for(SMALL, seed=4), steps=3)
    keys = [st.keys for st in res.dump.steps]
    assert keys == [10, 11, 12]
    for st in res.dump.steps:
        st.validate(SMALL.layout)


def test_dump_rows_valid_default_model():
    cfg = ToyConfig()
    res = ToyDecoder(cfg).forward(sample_for(cfg, "audio_aligned", 5))
    w = res.dump.steps[0].weights
    assert w.shape == (8, 8, 82)
    assert np.all(w >= 0) and np.allclose(w.sum(-1), 1.0, atol=1e-12)


def test_layout_mismatch_raises():
    model = ToyDecoder(SMALL)
    other = ToyConfig(**{**SMALL.__dict__, "layout": TokenLayout.from_counts(4, 2, 3)})
    with pytest.raises(ShapeError):
        model.forward(sample_for(other))


def test_with_layout_shares_weights():
    model = ToyDecoder(SMALL)
    lay = TokenLayout.from_counts(5, 4, 3)
    m2 = model.with_layout(lay)
    assert m2.config.layout == lay and m2.wq is model.wq
    assert model.config.layout == SMALL.layout


def test_planted_heads_count():
    model = ToyDecoder(ToyConfig())
    assert np.all(model.audio_heads.sum(axis=1) == 6)
    assert not ToyDecoder(ToyConfig.unbiased()).audio_heads.any()


def test_config_validation():
    with pytest.raises(ValueError):
        ToyConfig(d=30, heads=4)
    with pytest.raises(ValueError):
        ToyConfig(audio_heads=9)


def test_scenario_invariants():
    gen = GenConfig()
    E = gen.n_classes
    for sc in Scenario:
        for s in synth_batch(gen, sc, 1000 // 3 + 1, seed=0):
            x = s.embeddings
            vis, aud = x[s.layout.mask(V)], x[s.layout.mask(A)]
            v_sig, a_sig = vis[0, SIG0:SIG0 + E], aud[0, SIG0:SIG0 + E]
            assert np.argmax(v_sig) == s.visual_label and np.argmax(a_sig) == s.audio_label
            assert np.count_nonzero(v_sig) == 1 and np.count_nonzero(a_sig) == 1
            if sc is Scenario.VIDEO_ALIGNED:
                assert s.visual_label == s.true_label != s.audio_label
                assert v_sig.max() > a_sig.max()
            elif sc is Scenario.AUDIO_ALIGNED:
                assert s.audio_label == s.true_label != s.visual_label
                assert a_sig.max() > v_sig.max()
            else:
                assert s.visual_label == s.audio_label == s.true_label
            assert np.all(x[:, TYPE_CHANNELS[T]][s.layout.mask(T)] == 1)
            assert x[-1, QUERY_FLAG] == 1 and x[:-1, QUERY_FLAG].sum() == 0
            assert np.all(vis[:, SALIENCE] == v_sig.max())


def test_synth_batch_slices_are_consistent():
    gen = GenConfig()
    full = synth_batch(gen, "consistent", 6, seed=2)
    part = synth_batch(gen, "consistent", 3, seed=2, start=3)
    for a, b in zip(full[3:], part):
        assert np.array_equal(a.embeddings, b.embeddings)


def test_fixed_probe_reads_signatures():
    cfg = ToyConfig()
    model = ToyDecoder(cfg)
    samples = synth_batch(GenConfig.for_model(cfg), "consistent", 40, seed=1)
    x = np.stack([s.embeddings for s in samples])
    logits, _, _ = model.forward_batch(x)
    assert np.mean(logits.argmax(1) == [s.true_label for s in samples]) == 1.0


def test_fit_head_separable():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 120)
    f = np.eye(3)[y] * 2 + rng.normal(0, 0.1, (120, 3))
    cfg = ToyConfig(layers=1, heads=2, d=32, n_classes=3, audio_heads=1)
    model = ToyDecoder(cfg)
    f_full = np.zeros((120, 32))
    f_full[:, :3] = f
    model.fit_head(f_full, y)
    assert np.mean(model.classify(f_full).argmax(1) == y) == 1.0


def test_duplicate_audio():
    s = sample_for(ToyConfig(), "audio_aligned", 0)
    assert duplicate_audio(s, 1) is s
    with pytest.raises(ValueError):
        duplicate_audio(s, 0)
    d = duplicate_audio(s, 3)
    assert (d.layout.m, d.layout.n, d.layout.s) == (64, 6, 16)
    aud = d.embeddings[d.layout.mask(A)]
    assert {r.tobytes() for r in aud} == {r.tobytes() for r in s.embeddings[s.layout.mask(A)]}
    assert np.array_equal(d.embeddings[d.layout.mask(V)], s.embeddings[s.layout.mask(V)])


def test_duplicate_single_audio_token_256():
    cfg = ToyConfig(layout=TokenLayout.from_counts(64, 1, 16))
    d = duplicate_audio(sample_for(cfg), 256)
    assert d.layout.n == 256 and d.layout.total == 336
    assert len({r.tobytes() for r in d.embeddings[d.layout.mask(A)]}) == 1


def test_samples_roundtrip():
    samples = synth_batch(GenConfig.for_model(SMALL), "audio_aligned", 3, seed=0)
    back = parse_samples(write_samples(samples))
    for a, b in zip(samples, back):
        assert np.array_equal(a.embeddings, b.embeddings) and a.layout == b.layout
        assert (a.true_label, a.scenario, a.visual_label, a.audio_label) == \
               (b.true_label, b.scenario, b.visual_label, b.audio_label)


@pytest.mark.parametrize("doc, path", [
    (b"{", "$"),
    (b"{}", "$"),
    (b'[{"layout": []}]', "[0]"),
])
def test_parse_samples_errors(doc, path):
    with pytest.raises(ParseError) as exc:
        parse_samples(doc)
    assert exc.value.path == path
