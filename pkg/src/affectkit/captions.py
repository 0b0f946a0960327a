"""Structured five-sentence emotion captions.

A caption is a global summary, three emotional stimuli and a closing
assessment that names exactly one emotion from the 27-label taxonomy.

Sentence rule: a sentence ends at a run of ``.``, ``!`` or ``?`` followed by
whitespace or the end of the text. Terminators inside double quotes never end
a sentence, and a period between digits (``3.5``) is not followed by
whitespace, so it never does either.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

EMOTIONS: tuple[str, ...] = (
    "admiration", "amusement", "approval", "caring", "desire", "excitement",
    "gratitude", "joy", "love", "optimism", "pride", "relief",
    "anger", "annoyance", "disappointment", "disapproval", "disgust", "embarrassment",
    "fear", "nervousness", "grief", "remorse", "sadness",
    "confusion", "curiosity", "realization", "surprise",
)  # fmt: skip

CONTEXTS = ("facial", "natural", "urban", "object")
TERMINATORS = ".!?"

_EMOTION_RE = re.compile(r"\b(" + "|".join(EMOTIONS) + r")\b", re.IGNORECASE)


class CaptionError(ValueError):
    pass


def split_sentences(text: str) -> list[str]:
    """Split ``text`` into stripped sentences under the module's boundary rule."""
    out, start, quoted, i, n = [], 0, False, 0, len(text)
    while i < n:
        ch = text[i]
        if ch == '"':
            quoted = not quoted
        elif ch in TERMINATORS and not quoted:
            j = i
            while j < n and text[j] in TERMINATORS:
                j += 1
            if j == n or text[j].isspace():
                out.append(text[start:j].strip())
                start = j
            i = j
            continue
        i += 1
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


def _check_sentence(s: str, role: str) -> str:
    if not isinstance(s, str) or not s.strip():
        raise CaptionError(f"{role} sentence is empty")
    if s != s.strip() or split_sentences(s) != [s]:
        raise CaptionError(f"{role} must be exactly one sentence: {s!r}")
    if s[-1] not in TERMINATORS:
        raise CaptionError(f"{role} must end with '.', '!' or '?': {s!r}")
    return s


def extract_emotion(assessment: str) -> str:
    """The single taxonomy label named in ``assessment`` (case-insensitive, whole words)."""
    found = sorted({m.group(1).lower() for m in _EMOTION_RE.finditer(assessment)}, key=EMOTIONS.index)
    if not found:
        raise CaptionError(f"no taxonomy emotion in assessment: {assessment!r}")
    if len(found) > 1:
        raise CaptionError(f"assessment names several emotions ({', '.join(found)}): {assessment!r}")
    return found[0]


@dataclass(frozen=True)
class CaptionRecord:
    summary: str
    stimuli: tuple[str, str, str]
    assessment: str
    emotion: str
    image_id: str = ""
    context: str | None = None  # optional scene tag, not validated against content

    def __post_init__(self):
        object.__setattr__(self, "stimuli", tuple(self.stimuli))
        if len(self.stimuli) != 3:
            raise CaptionError(f"need exactly 3 stimuli, got {len(self.stimuli)}")
        _check_sentence(self.summary, "summary")
        for k, s in enumerate(self.stimuli, 1):
            _check_sentence(s, f"stimulus {k}")
        _check_sentence(self.assessment, "assessment")
        if self.emotion not in EMOTIONS:
            raise CaptionError(f"unknown emotion {self.emotion!r}")
        if extract_emotion(self.assessment) != self.emotion:
            raise CaptionError(f"assessment does not name {self.emotion!r}")
        if self.context is not None and self.context not in CONTEXTS:
            raise CaptionError(f"context must be one of {CONTEXTS}, got {self.context!r}")

    @property
    def sentences(self) -> list[str]:
        return [self.summary, *self.stimuli, self.assessment]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stimuli"] = list(self.stimuli)
        if d["context"] is None:
            del d["context"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionRecord":
        keys = {"image_id", "summary", "stimuli", "assessment", "emotion", "context"}
        unknown = set(d) - keys
        if unknown:
            raise CaptionError(f"unknown record keys: {sorted(unknown)}")
        try:
            return cls(d["summary"], tuple(d["stimuli"]), d["assessment"], d["emotion"], d.get("image_id", ""), d.get("context"))
        except KeyError as exc:
            raise CaptionError(f"record is missing {exc.args[0]!r}") from None


def parse_caption(text: str, image_id: str = "", context: str | None = None) -> CaptionRecord:
    sentences = split_sentences(text)
    if len(sentences) != 5:
        raise CaptionError(f"caption must have 5 sentences, found {len(sentences)}")
    summary, *stimuli, assessment = sentences
    return CaptionRecord(summary, tuple(stimuli), assessment, extract_emotion(assessment), image_id, context)


def serialize_caption(record: CaptionRecord) -> str:
    return " ".join(record.sentences)


def split_views(record: CaptionRecord) -> tuple[str, str]:
    """``(full_text, summary_text)``: all five sentences, and the first plus the last."""
    return serialize_caption(record), f"{record.summary} {record.assessment}"


# ---------------------------------------------------------------------------
# taxonomy and filtering


@dataclass
class TaxonomyReport:
    ok: bool
    count: int
    missing: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)
    duplicates: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def validate_taxonomy(labels) -> TaxonomyReport:
    labels = list(labels)
    seen, dups = set(), []
    for lab in labels:
        if lab in seen and lab not in dups:
            dups.append(lab)
        seen.add(lab)
    missing = [e for e in EMOTIONS if e not in seen]
    extra = sorted(seen - set(EMOTIONS))
    ok = not (missing or extra or dups) and len(labels) == len(EMOTIONS)
    return TaxonomyReport(ok, len(labels), missing, extra, dups)


def n_dropped(n: int, q: float) -> int:
    """``floor(q * n)`` computed on the decimal value of ``q`` (so 0.29 * 100 gives 29)."""
    return math.floor(Fraction(repr(float(q))) * n)


def filter_bottom_quantile(scores, q: float = 0.2) -> list[str]:
    """Drop the ``floor(q * n)`` lowest scores and return the remaining ids in input order.

    Ties at the cut drop the lexicographically smaller id first.
    """
    scores = [(str(i), float(s)) for i, s in scores]
    if not 0 <= q < 1:
        raise CaptionError(f"q must lie in [0, 1), got {q}")
    bad = [i for i, s in scores if not math.isfinite(s)]
    if bad:
        raise CaptionError(f"non-finite scores for ids {bad}")
    k = n_dropped(len(scores), q)
    order = sorted(range(len(scores)), key=lambda j: (scores[j][1], scores[j][0]))
    drop = set(order[:k])
    return [i for j, (i, _) in enumerate(scores) if j not in drop]


# ---------------------------------------------------------------------------
# JSONL files


def read_jsonl(path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CaptionError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(row, dict):
            raise CaptionError(f"{path}:{lineno}: expected a JSON object")
        rows.append(row)
    return rows


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def parse_caption_rows(rows) -> tuple[list[CaptionRecord], list[dict]]:
    """Parse ``{image_id, caption_text}`` rows; returns records and per-row rejections."""
    records, rejected = [], []
    for k, row in enumerate(rows):
        image_id = str(row.get("image_id", k))
        try:
            if "caption_text" not in row:
                raise CaptionError("row has no caption_text")
            records.append(parse_caption(row["caption_text"], image_id, row.get("context")))
        except CaptionError as exc:
            rejected.append({"image_id": image_id, "error": str(exc)})
    return records, rejected


def save_records(path, records) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def load_records(path) -> list[CaptionRecord]:
    return [CaptionRecord.from_dict(r) for r in read_jsonl(path)]
