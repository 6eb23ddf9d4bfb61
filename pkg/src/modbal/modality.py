"""Token layouts, per-step attention records and the JSON attention-dump format."""

import enum
import functools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError, ValidationError

ROW_SUM_TOL = 1e-9


class ModalityTag(enum.Enum):
    VISUAL = "visual"
    AUDIO = "audio"
    TEXT = "text"


@dataclass(frozen=True)
class Span:
    tag: ModalityTag
    start: int
    length: int

    @property
    def stop(self):
        return self.start + self.length


@dataclass(frozen=True)
class TokenLayout:
    """Ordered modality spans covering ``[0, total)``.

    Key positions at or beyond ``total`` (generated response tokens) are
    treated as text.
    """

    spans: tuple

    def __post_init__(self):
        spans = tuple(self.spans)
        object.__setattr__(self, "spans", spans)
        pos = 0
        for i, sp in enumerate(spans):
            if not isinstance(sp.tag, ModalityTag):
                raise ValidationError(f"span {i}: bad tag {sp.tag!r}")
            if sp.length < 0:
                raise ValidationError(f"span {i}: negative length")
            if sp.start != pos:
                kind = "overlapping" if sp.start < pos else "non-contiguous"
                raise ValidationError(f"span {i}: {kind} spans (start {sp.start}, expected {pos})")
            pos = sp.stop
        if self.count(ModalityTag.TEXT) < 1:
            raise ValidationError("layout needs at least one text token")

    @classmethod
    def from_counts(cls, m, n, s):
        """Visual, then audio, then text spans."""
        spans = []
        pos = 0
        for tag, length in ((ModalityTag.VISUAL, m), (ModalityTag.AUDIO, n), (ModalityTag.TEXT, s)):
            spans.append(Span(tag, pos, length))
            pos += length
        return cls(tuple(spans))

    @property
    def total(self):
        return self.spans[-1].stop if self.spans else 0

    def count(self, tag):
        return sum(sp.length for sp in self.spans if sp.tag is tag)

    @property
    def m(self):
        return self.count(ModalityTag.VISUAL)

    @property
    def n(self):
        return self.count(ModalityTag.AUDIO)

    @property
    def s(self):
        return self.count(ModalityTag.TEXT)

    def tags(self, keys=None):
        """Per-position tags for ``keys`` key positions (default ``total``)."""
        keys = self.total if keys is None else keys
        if keys < self.total:
            raise ShapeError(f"{keys} keys cannot cover a layout of {self.total} tokens")
        out = [ModalityTag.TEXT] * keys
        for sp in self.spans:
            out[sp.start:sp.stop] = [sp.tag] * sp.length
        return out

    def mask(self, tag, keys=None):
        """Boolean mask of key positions carrying ``tag`` (read-only)."""
        return _cached_mask(self, tag, self.total if keys is None else keys)

    def positions(self, tag):
        return np.flatnonzero(self.mask(tag))

    def to_json(self):
        return [{"tag": sp.tag.value, "start": sp.start, "length": sp.length} for sp in self.spans]


@dataclass(frozen=True)
class StepAttention:
    """Attention of one generated token over ``keys`` earlier positions.

    ``weights`` has shape ``(layers, heads, keys)``.
    """

    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3:
            raise ShapeError(f"step weights must be 3-D (layer, head, key), got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def layers(self):
        return self.weights.shape[0]

    @property
    def heads(self):
        return self.weights.shape[1]

    @property
    def keys(self):
        return self.weights.shape[2]

    def validate(self, layout=None, where="step"):
        w = self.weights
        if not np.all(np.isfinite(w)):
            raise ValidationError(f"{where}: non-finite attention weight")
        neg = np.argwhere(w < 0)
        if neg.size:
            l, h, k = neg[0]
            raise ValidationError(f"{where}: negative weight at layer {l}, head {h}, key {k}")
        dev = np.abs(w.sum(axis=-1) - 1.0)
        bad = np.argwhere(dev > ROW_SUM_TOL)
        if bad.size:
            l, h = bad[0]
            raise ValidationError(
                f"{where}: row for layer {l}, head {h} sums to {w[l, h].sum():.17g}"
            )
        if layout is not None and self.keys < layout.total:
            raise ValidationError(f"{where}: {self.keys} keys but layout has {layout.total} tokens")


@dataclass(frozen=True)
class AttentionDump:
    model: str
    layout: TokenLayout
    num_layers: int
    num_heads: int
    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def validate(self):
        for i, st in enumerate(self.steps):
            if st.layers != self.num_layers or st.heads != self.num_heads:
                raise ValidationError(
                    f"steps[{i}]: shape {st.weights.shape[:2]} does not match "
                    f"({self.num_layers}, {self.num_heads})"
                )
            st.validate(self.layout, where=f"steps[{i}]")
        return self


@functools.lru_cache(maxsize=256)
def _cached_mask(layout, tag, keys):
    m = np.array([t is tag for t in layout.tags(keys)], dtype=bool)
    m.setflags(write=False)
    return m


def modality_mass(step, layer, head, layout, tag):
    """Total attention a single head puts on the tokens tagged ``tag``."""
    if not (0 <= layer < step.layers) or not (0 <= head < step.heads):
        raise IndexError(f"(layer {layer}, head {head}) out of range for {step.weights.shape[:2]}")
    row = step.weights[layer, head]
    return float(row[layout.mask(tag, step.keys)].sum())


def masses(weights, layout, tag):
    """Vectorised modality mass over the last axis of ``weights``."""
    w = np.asarray(weights)
    return w[..., layout.mask(tag, w.shape[-1])].sum(axis=-1)


# --- serialisation --------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def write_dump(dump):
    """Serialise to the JSON dump format (floats with 17 significant digits)."""
    meta = json.dumps(
        {
            "model": dump.model,
            "layout": dump.layout.to_json(),
            "num_layers": dump.num_layers,
            "num_heads": dump.num_heads,
        },
        sort_keys=False,
    )
    step_docs = []
    for st in dump.steps:
        layers = []
        for layer in st.weights:
            heads = ["[" + ",".join(_fmt(x) for x in row) + "]" for row in layer]
            layers.append("[" + ",".join(heads) + "]")
        step_docs.append('{"keys":%d,"weights":[%s]}' % (st.keys, ",".join(layers)))
    return ('{"meta":%s,"steps":[%s]}\n' % (meta, ",".join(step_docs))).encode("utf-8")


def _require(obj, key, typ, path):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(path, f"missing field {key!r}")
    val = obj[key]
    if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ParseError(f"{path}.{key}", "expected an integer")
    if typ is not int and not isinstance(val, typ):
        raise ParseError(f"{path}.{key}", f"expected {typ.__name__}")
    return val


def parse_layout(items, path="meta.layout"):
    if not isinstance(items, list):
        raise ParseError(path, "expected a list of spans")
    spans = []
    for i, it in enumerate(items):
        p = f"{path}[{i}]"
        tag = _require(it, "tag", str, p)
        try:
            tag = ModalityTag(tag)
        except ValueError:
            raise ParseError(f"{p}.tag", f"unknown modality {tag!r}") from None
        spans.append(Span(tag, _require(it, "start", int, p), _require(it, "length", int, p)))
    return TokenLayout(tuple(spans))


def parse_dump(data):
    """Parse and validate a dump document (``bytes`` or ``str``)."""
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError("$", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("$", "expected an object")
    meta = _require(doc, "meta", dict, "$")
    model = _require(meta, "model", str, "meta")
    layout = parse_layout(_require(meta, "layout", list, "meta"))
    L = _require(meta, "num_layers", int, "meta")
    H = _require(meta, "num_heads", int, "meta")
    steps = []
    for i, st in enumerate(_require(doc, "steps", list, "$")):
        p = f"steps[{i}]"
        keys = _require(st, "keys", int, p)
        raw = _require(st, "weights", list, p)
        try:
            w = np.array(raw, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"{p}.weights", "ragged or non-numeric weights") from None
        if w.shape != (L, H, keys):
            raise ParseError(f"{p}.weights", f"shape {w.shape}, expected {(L, H, keys)}")
        steps.append(StepAttention(w))
    return AttentionDump(model, layout, L, H, tuple(steps)).validate()
