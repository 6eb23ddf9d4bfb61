"""Small causal multi-head decoder over modality-tagged tokens, plus synthetic conflict samples.

Embedding channels (``d`` wide)::

    0, 1, 2         modality type (visual, audio, text)
    3               response-slot flag (the querying position)
    4               salience: the token's signature amplitude
    5 .. 5+E-1      class signature (amplitude * one-hot label)
    5+E ..          Gaussian noise

Attention weights are random on the noise channels. On top of that a model
can carry *planted* structure. For the response slot, in every layer a subset
of heads adds a fixed logit offset to audio keys (audio-biased heads) and the
remaining heads attend in proportion to key salience. Prompt tokens attend
within their own modality, so only the response slot mixes modalities. Value/output projections copy the
signature channels so the class head can read modality evidence, and never
write into the type or salience channels.
"""

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, ShapeError
from .modality import AttentionDump, ModalityTag, StepAttention, TokenLayout, parse_layout
from .numerics import Rng, softmax

TYPE_CHANNELS = {ModalityTag.VISUAL: 0, ModalityTag.AUDIO: 1, ModalityTag.TEXT: 2}
QUERY_FLAG = 3
SALIENCE = 4
SIG0 = 5


class Scenario(enum.Enum):
    VIDEO_ALIGNED = "video_aligned"
    AUDIO_ALIGNED = "audio_aligned"
    CONSISTENT = "consistent"


@dataclass(frozen=True)
class ToyConfig:
    layers: int = 8
    heads: int = 8
    d: int = 128
    n_classes: int = 9
    layout: TokenLayout = field(default_factory=lambda: TokenLayout.from_counts(64, 2, 16))
    seed: int = 0
    # planted structure
    audio_heads: int = 6          # audio-biased heads per layer
    audio_bias: float = 7.0       # mean logit offset on audio keys in those heads
    bias_spread: float = 0.25     # relative jitter of the offset across heads
    salience: float = 10.0        # logit gain on key salience in the other heads
    locality: float = 8.0         # prompt tokens attend within their own modality
    logit_noise: float = 0.5      # std of the random logit component
    value_gain: float = 1.0
    uniform_logits: bool = False  # control: every attention row uniform over its keys

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if SIG0 + self.n_classes >= self.d:
            raise ValueError("d too small for the reserved channels")
        if self.n_classes > self.head_dim or self.head_dim < 5:
            raise ValueError("head_dim must hold the class signature")
        if not 0 <= self.audio_heads <= self.heads:
            raise ValueError("audio_heads out of range")

    @property
    def head_dim(self):
        return self.d // self.heads

    @property
    def noise_channels(self):
        return slice(SIG0 + self.n_classes, self.d)

    @classmethod
    def unbiased(cls, **kw):
        """Model with no planted attention structure (random attention only)."""
        return cls(audio_heads=0, audio_bias=0.0, salience=0.0, locality=0.0, **kw)


@dataclass
class ConflictSample:
    embeddings: np.ndarray
    layout: TokenLayout
    true_label: int
    scenario: Scenario
    visual_label: int
    audio_label: int

    def to_json(self):
        return {
            "scenario": self.scenario.value,
            "true_label": self.true_label,
            "visual_label": self.visual_label,
            "audio_label": self.audio_label,
            "layout": self.layout.to_json(),
            "embeddings": self.embeddings.tolist(),
        }


@dataclass(frozen=True)
class GenConfig:
    d: int = 128
    n_classes: int = 9
    layout: TokenLayout = field(default_factory=lambda: TokenLayout.from_counts(64, 2, 16))
    strong: tuple = (1.0, 1.3)    # amplitude range of a modality that carries the true label
    weak: tuple = (0.6, 0.9)      # amplitude range of the conflicting modality
    noise: float = 1.0

    @classmethod
    def for_model(cls, config, **kw):
        return cls(d=config.d, n_classes=config.n_classes, layout=config.layout, **kw)


def synth_sample(gen, scenario, seed):
    """One synthetic sample with planted visual and audio signatures.

    The modality agreeing with the true label gets an amplitude drawn from
    ``gen.strong``; in conflict scenarios the other modality is drawn from
    ``gen.weak`` and carries a different label.
    """
    scenario = Scenario(scenario)
    rng = Rng(seed)
    E = gen.n_classes
    true = rng.integers(E)
    other = rng.choice_excluding(E, true)
    amp_strong = rng.uniform(*gen.strong)
    amp_other = rng.uniform(*gen.weak)
    if scenario is Scenario.VIDEO_ALIGNED:
        v_lab, a_lab, amp_v, amp_a = true, other, amp_strong, amp_other
    elif scenario is Scenario.AUDIO_ALIGNED:
        v_lab, a_lab, amp_v, amp_a = other, true, amp_other, amp_strong
    else:
        v_lab = a_lab = true
        amp_v, amp_a = amp_strong, rng.uniform(*gen.strong)

    layout = gen.layout
    x = np.zeros((layout.total, gen.d))
    x[:, SIG0 + E:] = rng.normal(0.0, gen.noise, (layout.total, gen.d - SIG0 - E))
    for sp in layout.spans:
        rows = slice(sp.start, sp.stop)
        x[rows, TYPE_CHANNELS[sp.tag]] = 1.0
        if sp.tag is ModalityTag.VISUAL:
            x[rows, SALIENCE] = amp_v
            x[rows, SIG0 + v_lab] = amp_v
        elif sp.tag is ModalityTag.AUDIO:
            x[rows, SALIENCE] = amp_a
            x[rows, SIG0 + a_lab] = amp_a
    x[-1, QUERY_FLAG] = 1.0
    return ConflictSample(x, layout, true, scenario, v_lab, a_lab)


def synth_batch(gen, scenario, count, seed, start=0):
    """Samples ``start .. start+count-1`` of the seeded stream for ``scenario``.

    Each sample has its own derived seed, so any slice of the stream can be
    generated independently.
    """
    base = Rng(seed).split(list(Scenario).index(Scenario(scenario)))
    return [synth_sample(gen, scenario, int(base.split(i).bits())) for i in range(start, start + count)]


def write_samples(samples):
    """Serialise samples as a JSON array of embedding matrices with layout and labels."""
    return (json.dumps([s.to_json() for s in samples]) + "\n").encode("utf-8")


def parse_samples(data):
    """Inverse of :func:`write_samples`."""
    try:
        docs = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError("$", f"invalid JSON: {exc}") from None
    if not isinstance(docs, list):
        raise ParseError("$", "expected an array of samples")
    out = []
    for i, doc in enumerate(docs):
        p = f"[{i}]"
        if not isinstance(doc, dict):
            raise ParseError(p, "expected an object")
        try:
            layout = parse_layout(doc["layout"], f"{p}.layout")
            x = np.array(doc["embeddings"], dtype=np.float64)
            sample = ConflictSample(x, layout, int(doc["true_label"]), Scenario(doc["scenario"]),
                                    int(doc["visual_label"]), int(doc["audio_label"]))
        except ParseError:
            raise
        except KeyError as exc:
            raise ParseError(p, f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ParseError(p, str(exc)) from None
        if x.ndim != 2 or x.shape[0] != layout.total:
            raise ParseError(f"{p}.embeddings", f"shape {x.shape} does not match the layout")
        out.append(sample)
    return out


def duplicate_audio(sample, k):
    """Repeat every audio token ``k`` times in place; no new audio content is added."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return sample
    rows, spans, pos = [], [], 0
    for sp in sample.layout.spans:
        block = sample.embeddings[sp.start:sp.stop]
        if sp.tag is ModalityTag.AUDIO:
            block = np.repeat(block, k, axis=0)
        rows.append(block)
        spans.append(type(sp)(sp.tag, pos, block.shape[0]))
        pos += block.shape[0]
    return replace(sample, embeddings=np.concatenate(rows), layout=TokenLayout(tuple(spans)))


@dataclass
class ForwardResult:
    logits: np.ndarray
    dump: AttentionDump
    features: np.ndarray


class ToyDecoder:
    """Attention-only residual decoder with a linear class head on the last position.

    Parameters are drawn from ``config.seed``; the planted structure is
    written into the query/key projections of head dimensions 0-3.
    """

    def __init__(self, config):
        self.config = config
        c = config
        H, d, dh, E = c.heads, c.d, c.head_dim, c.n_classes
        rng = Rng(c.seed)
        noise = c.noise_channels
        n_noise = d - noise.start
        s = np.sqrt(c.logit_noise / (n_noise * np.sqrt((dh - 4) / dh))) if c.logit_noise > 0 else 0.0

        self.wq = np.zeros((c.layers, H, dh, d))
        self.wk = np.zeros((c.layers, H, dh, d))
        self.wv = np.zeros((c.layers, H, dh, d))
        self.wo = np.zeros((c.layers, H, d, dh))
        self.audio_heads = np.zeros((c.layers, H), dtype=bool)
        for l in range(c.layers):
            lr = rng.split(l)
            self.wq[l, :, 4:, noise] = lr.normal(0, s, (H, dh - 4, n_noise))
            self.wk[l, :, 4:, noise] = lr.normal(0, s, (H, dh - 4, n_noise))
            self.wv[l, :, E:, noise] = lr.normal(0, 1.0 / np.sqrt(n_noise), (H, dh - E, n_noise))
            self.wo[l, :, noise, E:] = lr.normal(0, 0.5 / np.sqrt(H * (dh - E)), (H, n_noise, dh - E))
            for h in range(H):
                self.wv[l, h, np.arange(E), SIG0 + np.arange(E)] = 1.0
                self.wo[l, h, SIG0 + np.arange(E), np.arange(E)] = c.value_gain / H
            # head dims 1-3: prompt tokens attend within their own modality
            for i, tag in enumerate((ModalityTag.VISUAL, ModalityTag.AUDIO, ModalityTag.TEXT)):
                ch = TYPE_CHANNELS[tag]
                self.wq[l, :, 1 + i, ch] = np.sqrt(dh)
                self.wk[l, :, 1 + i, ch] = c.locality
            self.wq[l, :, 3, QUERY_FLAG] = -np.sqrt(dh)
            # head dim 0: planted structure seen by the response slot
            self.wq[l, :, 0, QUERY_FLAG] = np.sqrt(dh)
            chosen = lr.permutation(H)[: c.audio_heads]
            self.audio_heads[l, chosen] = True
            jitter = lr.uniform(1 - c.bias_spread, 1 + c.bias_spread, H)
            for h in range(H):
                if self.audio_heads[l, h]:
                    self.wk[l, h, 0, TYPE_CHANNELS[ModalityTag.AUDIO]] = c.audio_bias * jitter[h]
                else:
                    self.wk[l, h, 0, SALIENCE] = c.salience
        # fixed probe reading the signature block; fit_head may replace it
        self.w_cls = np.zeros((E, d))
        self.w_cls[np.arange(E), SIG0 + np.arange(E)] = 1.0
        self.b_cls = np.zeros(E)

    def with_layout(self, layout):
        """Same weights, different token layout."""
        new = object.__new__(ToyDecoder)
        new.__dict__.update(self.__dict__)
        new.config = replace(self.config, layout=layout)
        return new

    # -- attention ----------------------------------------------------------

    def _heads(self, x, w):
        """Project (B, T, d) through per-head weights (H, e, d) -> (B, H, T, e)."""
        H, e, d = w.shape
        y = x @ w.reshape(H * e, d).T
        return y.reshape(x.shape[0], x.shape[1], H, e).transpose(0, 2, 1, 3)

    def _logits(self, l, q_x, k_x):
        """Scaled dot-product logits; ``q_x`` (B, Tq, d), ``k_x`` (B, Tk, d) -> (B, H, Tq, Tk)."""
        if self.config.uniform_logits:
            return np.zeros((q_x.shape[0], self.config.heads, q_x.shape[1], k_x.shape[1]))
        q = self._heads(q_x, self.wq[l])
        k = self._heads(k_x, self.wk[l])
        return (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(self.config.head_dim)

    def _mix(self, l, w, v_x):
        """Weighted value mixing: ``w`` (B, H, Tq, Tk) -> residual update (B, Tq, d)."""
        v = self._heads(v_x, self.wv[l])
        o = w @ v                                            # (B, H, Tq, e)
        B, H, Tq, e = o.shape
        wo = self.wo[l].transpose(0, 2, 1).reshape(H * e, -1)  # (H*e, d)
        return o.transpose(0, 2, 1, 3).reshape(B, Tq, H * e) @ wo

    def encode_prefix(self, x):
        """Per-layer inputs of every position but the last, shape (L, B, T-1, d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        pre = x[:, :-1]
        T = pre.shape[1]
        causal = np.where(np.triu(np.ones((T, T), dtype=bool), k=1), -np.inf, 0.0)
        states = []
        for l in range(self.config.layers):
            states.append(pre)
            if T == 0:
                continue
            logits = self._logits(l, pre, pre)
            logits += causal
            pre = pre + self._mix(l, softmax(logits, axis=-1), pre)
        return np.stack(states)

    def _decode(self, states, query, hook, record):
        """Run one query position through all layers against cached ``states``.

        Returns the final representation (B, d), per-layer weights (B, L, H, K)
        and the query's per-layer inputs (L, B, 1, d).
        """
        h = query[:, None, :]
        rows, inputs = [], []
        for l in range(self.config.layers):
            inputs.append(h)
            keys = np.concatenate([states[l], h], axis=1)
            w = softmax(self._logits(l, h, keys), axis=-1)[:, :, 0, :]   # (B, H, K)
            used = w if hook is None else np.asarray(hook(l, w))
            rows.append(used if record == "post" else w)
            h = h + self._mix(l, used[:, :, None, :], keys)
        return h[:, 0], np.stack(rows, axis=1), np.stack(inputs)

    def classify(self, features):
        return features @ self.w_cls.T + self.b_cls

    def forward_batch(self, x, hook=None, record="pre", steps=1, states=None):
        """Batched forward over embeddings ``x`` (B, T, d).

        The hook sees the last position's post-softmax weights for one layer,
        shaped (B, H, K), and returns replacements. Logits come from the first
        decoding step; ``steps > 1`` appends generated tokens (text-typed,
        carrying the predicted class signature) and records their attention.
        Returns ``(logits, weights_per_step, features)`` where
        ``weights_per_step[j]`` has shape (B, L, H, K_j).
        """
        if record not in ("pre", "post"):
            raise ValueError("record must be 'pre' or 'post'")
        x = np.asarray(x, dtype=np.float64)
        if states is None:
            states = self.encode_prefix(x)
        feats, w, inputs = self._decode(states, x[:, -1], hook, record)
        logits = self.classify(feats)
        weights = [w]
        pred = logits.argmax(axis=1)
        for _ in range(1, steps):
            states = np.concatenate([states, inputs], axis=2)
            tok = np.zeros((x.shape[0], self.config.d))
            tok[:, TYPE_CHANNELS[ModalityTag.TEXT]] = 1.0
            tok[:, QUERY_FLAG] = 1.0
            tok[np.arange(x.shape[0]), SIG0 + pred] = 1.0
            f, w, inputs = self._decode(states, tok, hook, record)
            weights.append(w)
            pred = self.classify(f).argmax(axis=1)
        return logits, weights, feats

    def forward(self, sample, hook=None, record="pre", steps=1):
        """Logits and attention dump for one sample."""
        if sample.layout != self.config.layout:
            raise ShapeError("sample layout does not match the model configuration")
        if sample.embeddings.shape != (self.config.layout.total, self.config.d):
            raise ShapeError(f"embeddings shape {sample.embeddings.shape} does not match config")
        logits, weights, feats = self.forward_batch(sample.embeddings[None], hook, record, steps)
        dump = AttentionDump(
            model=f"toy-decoder-L{self.config.layers}-H{self.config.heads}-d{self.config.d}-seed{self.config.seed}",
            layout=self.config.layout,
            num_layers=self.config.layers,
            num_heads=self.config.heads,
            steps=tuple(StepAttention(w[0]) for w in weights),
        )
        return ForwardResult(logits[0], dump, feats[0])

    # -- class head ---------------------------------------------------------

    def fit_head(self, features, labels, steps=300, lr=0.5):
        """Full-batch gradient descent on softmax cross-entropy; backbone frozen."""
        f = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels)
        mu = f.mean(axis=0)
        scale = f.std(axis=0) + 1e-8
        z = (f - mu) / scale
        E = self.config.n_classes
        onehot = np.eye(E)[y]
        w = np.zeros((E, f.shape[1]))
        b = np.zeros(E)
        for _ in range(steps):
            p = softmax(z @ w.T + b, axis=1)
            g = (p - onehot) / len(y)
            w -= lr * (g.T @ z)
            b -= lr * g.sum(axis=0)
        # fold the standardisation into the head
        self.w_cls = w / scale
        self.b_cls = b - (w / scale) @ mu
        return self
