"""Benchmark ingestion: ICEWS/YAGO15K parsing, vocabulary construction,
reciprocal augmentation, the evaluation filter index, and the encoded on-disk
dataset container.

Container layout (all little-endian):

    magic           8 bytes  b"TKGDSET1"
    version         u32      (currently 1)
    flags           u32      bit0 = reciprocal, bit1 = has reserved no-time slot
    n_entities      u32
    n_relations     u32
    n_timestamps    u32
    n_train/valid/test  u64 each
    train/valid/test    int32 arrays, one (n, 4) block per split, row-major
    vocabulary      entities, relations, timestamps; each string is
                    u32 byte length + UTF-8 bytes

Parsing and encoding are pure functions of their inputs, so re-running the
ingest pipeline on the same files produces byte-identical containers.
"""

from __future__ import annotations

import datetime
import hashlib
import re
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .core import (
    NO_TIME_INDEX,
    NO_TIME_LABEL,
    DatasetSplits,
    Vocabulary,
    inverse_relation,
)

DATASET_MAGIC = b"TKGDSET1"
DATASET_VERSION = 1

YAGO_MODIFIERS = ("occursSince", "occursUntil")

# Suffix marking the inverse copy of a relation after reciprocal augmentation.
INVERSE_SUFFIX = "^-1"


class ParseError(ValueError):
    """Raised for malformed benchmark lines; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DatasetFormatError(ValueError):
    """Raised when an encoded dataset container is malformed or incompatible."""


@dataclass(frozen=True)
class RawFact:
    """One parsed benchmark line before encoding.

    ``time`` is the raw date string (None for undated YAGO facts) and
    ``temporal_modifier`` is the occursSince/occursUntil tag when present.
    """

    subject: str
    relation: str
    object: str
    time: Optional[str] = None
    temporal_modifier: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.subject or not self.relation or not self.object:
            raise ValueError("subject/relation/object must be non-empty")


_YEAR_ONLY = re.compile(r"^-?\d{1,4}$")
_MASKED_DATE = re.compile(r"^(-?\d{1,4})-(\d{2}|##)-(\d{2}|##)$")


def normalize_date(raw: str) -> str:
    """Canonical ISO date used for chronological ordering.

    Masked fields ("##") and bare years resolve to the earliest matching day,
    e.g. "2001-##-##" -> "2001-01-01".
    """
    s = raw.strip()
    if _YEAR_ONLY.match(s):
        s = f"{s}-01-01"
    else:
        m = _MASKED_DATE.match(s)
        if not m:
            raise ValueError(f"unparseable date {raw!r}")
        year, month, day = m.groups()
        month = "01" if month == "##" else month
        day = "01" if day == "##" else day
        s = f"{year}-{month}-{day}"
    sign = ""
    if s.startswith("-"):
        sign, s = "-", s[1:]
    year, month, day = s.split("-")
    try:
        datetime.date(int(year), int(month), int(day))
    except ValueError as exc:
        raise ValueError(f"unparseable date {raw!r}: {exc}") from None
    return f"{sign}{int(year):04d}-{month}-{day}"


def parse_icews(lines: Iterable[str]) -> list[RawFact]:
    """Parse ICEWS-style lines: subject, relation, object, date (tab-separated)."""
    facts = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(
                f"expected 4 tab-separated fields, got {len(fields)}", lineno
            )
        subject, relation, obj, date = (f.strip() for f in fields)
        try:
            normalize_date(date)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        try:
            facts.append(RawFact(subject, relation, obj, time=date))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return facts


def _strip_angle(token: str) -> str:
    token = token.strip()
    if token.startswith("<") and token.endswith(">"):
        return token[1:-1]
    return token


def _strip_date_token(token: str) -> str:
    token = token.strip()
    if "^^" in token:
        token = token.split("^^", 1)[0]
    if len(token) >= 2 and token[0] == '"' and token[-1] == '"':
        token = token[1:-1]
    return token


def parse_yago15k(lines: Iterable[str]) -> list[RawFact]:
    """Parse YAGO15K-style lines.

    Lines are either (subject, relation, object) or
    (subject, relation, object, modifier, date) where the modifier is
    <occursSince> or <occursUntil> and the date may be masked ("1939-##-##").
    """
    facts = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        fields = [f for f in line.split("\t") if f.strip()]
        try:
            if len(fields) == 3:
                facts.append(RawFact(*(f.strip() for f in fields)))
            elif len(fields) == 5:
                subject, relation, obj = (f.strip() for f in fields[:3])
                modifier = _strip_angle(fields[3])
                if modifier not in YAGO_MODIFIERS:
                    raise ParseError(
                        f"unknown temporal modifier {modifier!r}", lineno
                    )
                date = _strip_date_token(fields[4])
                normalize_date(date)
                facts.append(
                    RawFact(subject, relation, obj, time=date,
                            temporal_modifier=modifier)
                )
            else:
                raise ParseError(
                    f"expected 3 or 5 tab-separated fields, got {len(fields)}",
                    lineno,
                )
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return facts


def group_yago_relations(facts: list[RawFact]) -> list[RawFact]:
    """Fold temporal modifiers into the relation name.

    A fact tagged occursSince/occursUntil gets the relation
    "<relation>@<modifier>", so each base temporal relation contributes up to
    two grouped relations; untagged facts pass through unchanged.
    """
    out = []
    for fact in facts:
        if fact.temporal_modifier is None:
            out.append(fact)
        else:
            out.append(
                replace(
                    fact,
                    relation=f"{fact.relation}@{fact.temporal_modifier}",
                    temporal_modifier=None,
                )
            )
    return out


def build_dataset(
    train: list[RawFact],
    valid: list[RawFact],
    test: list[RawFact],
) -> DatasetSplits:
    """Encode raw splits against a shared vocabulary.

    Entity and relation ids are assigned in first-seen order over
    train, valid, test; timestamp ids are assigned chronologically.  Facts
    without a date map to the reserved no-time slot (index 0), which exists
    only when at least one undated fact is present.
    """
    splits = [train, valid, test]
    if any(len(s) == 0 for s in splits):
        raise ValueError("all three splits must be non-empty")

    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    dates = set()
    has_no_time = False
    for facts in splits:
        for fact in facts:
            if fact.subject not in entities:
                entities[fact.subject] = len(entities)
            if fact.object not in entities:
                entities[fact.object] = len(entities)
            if fact.relation not in relations:
                relations[fact.relation] = len(relations)
            if fact.time is None:
                has_no_time = True
            else:
                dates.add(normalize_date(fact.time))

    timestamps = sorted(dates)
    if has_no_time:
        timestamps = [NO_TIME_LABEL] + timestamps
    vocab = Vocabulary(
        entities=list(entities),
        relations=list(relations),
        timestamps=timestamps,
        has_no_time=has_no_time,
    )

    def encode(facts: list[RawFact]) -> np.ndarray:
        arr = np.empty((len(facts), 4), dtype=np.int32)
        for row, fact in enumerate(facts):
            time_id = (
                NO_TIME_INDEX
                if fact.time is None
                else vocab.timestamp_id(normalize_date(fact.time))
            )
            arr[row] = (
                entities[fact.subject],
                relations[fact.relation],
                entities[fact.object],
                time_id,
            )
        return arr

    return DatasetSplits(
        train=encode(train), valid=encode(valid), test=encode(test),
        vocabulary=vocab,
    )


def augment_reciprocal(splits: DatasetSplits) -> DatasetSplits:
    """Double the relation space with inverse relations.

    Every training fact (i, j, k, l) gains its reciprocal (k, j^-1, i, l);
    valid/test rows are left as-is (evaluation forms the inverse queries
    itself).  Augmenting twice is an error.
    """
    if splits.reciprocal:
        raise ValueError("dataset is already reciprocal-augmented")
    vocab = splits.vocabulary
    half = vocab.n_relations
    relations = list(vocab.relations) + [r + INVERSE_SUFFIX for r in vocab.relations]
    new_vocab = Vocabulary(
        entities=list(vocab.entities),
        relations=relations,
        timestamps=list(vocab.timestamps),
        has_no_time=vocab.has_no_time,
    )
    flipped = splits.train[:, [2, 1, 0, 3]].copy()
    flipped[:, 1] += half
    return DatasetSplits(
        train=np.concatenate([splits.train, flipped], axis=0),
        valid=splits.valid.copy(),
        test=splits.test.copy(),
        vocabulary=new_vocab,
        reciprocal=True,
    )


class FilterIndex:
    """Known true objects per (subject, relation, timestamp) query key.

    Built over train + valid + test so that evaluation can discount every
    other answer that is true at the same timestamp.
    """

    def __init__(self, objects_by_key: dict[tuple[int, int, int], np.ndarray]):
        self._objects = objects_by_key

    def objects(self, subject: int, relation: int, timestamp: int) -> np.ndarray:
        return self._objects[(subject, relation, timestamp)]

    def __contains__(self, key: tuple[int, int, int]) -> bool:
        return key in self._objects

    def __len__(self) -> int:
        return len(self._objects)


def build_filter_index(splits: DatasetSplits) -> FilterIndex:
    """Collect all true objects per (subject, relation, timestamp) key.

    When the splits are reciprocal-augmented the index also covers inverse
    keys (object, relation^-1, timestamp), which evaluation uses for
    left-hand queries.
    """
    sets: dict[tuple[int, int, int], set[int]] = {}
    n_rel = splits.vocabulary.n_relations
    for arr in splits.splits().values():
        for subject, relation, obj, timestamp in arr.tolist():
            sets.setdefault((subject, relation, timestamp), set()).add(obj)
            if splits.reciprocal:
                inv = inverse_relation(relation, n_rel)
                sets.setdefault((obj, inv, timestamp), set()).add(subject)
    return FilterIndex(
        {key: np.array(sorted(vals), dtype=np.int64) for key, vals in sets.items()}
    )


# ---------------------------------------------------------------------------
# Encoded container I/O.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIIIQQQ")


def save_dataset(splits: DatasetSplits, path) -> None:
    vocab = splits.vocabulary
    flags = (1 if splits.reciprocal else 0) | (2 if vocab.has_no_time else 0)
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                DATASET_MAGIC,
                DATASET_VERSION,
                flags,
                vocab.n_entities,
                vocab.n_relations,
                vocab.n_timestamps,
                splits.train.shape[0],
                splits.valid.shape[0],
                splits.test.shape[0],
            )
        )
        for arr in (splits.train, splits.valid, splits.test):
            fh.write(np.ascontiguousarray(arr, dtype="<i4").tobytes())
        for part in (vocab.entities, vocab.relations, vocab.timestamps):
            for s in part:
                raw = s.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)


def load_dataset(path) -> DatasetSplits:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size or data[:8] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not an encoded dataset container")
    (_, version, flags, n_ent, n_rel, n_ts, n_train, n_valid, n_test) = (
        _HEADER.unpack_from(data)
    )
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported container version {version}")
    offset = _HEADER.size
    arrays = []
    for count in (n_train, n_valid, n_test):
        nbytes = count * 4 * 4
        arr = np.frombuffer(data, dtype="<i4", count=count * 4, offset=offset)
        arrays.append(arr.reshape(count, 4).astype(np.int32))
        offset += nbytes

    def read_strings(count: int, at: int) -> tuple[list[str], int]:
        out = []
        for _ in range(count):
            (length,) = struct.unpack_from("<I", data, at)
            at += 4
            out.append(data[at: at + length].decode("utf-8"))
            at += length
        return out, at

    entities, offset = read_strings(n_ent, offset)
    relations, offset = read_strings(n_rel, offset)
    timestamps, offset = read_strings(n_ts, offset)
    if offset != len(data):
        raise DatasetFormatError(f"{path}: trailing bytes in container")
    vocab = Vocabulary(
        entities=entities,
        relations=relations,
        timestamps=timestamps,
        has_no_time=bool(flags & 2),
    )
    return DatasetSplits(
        train=arrays[0], valid=arrays[1], test=arrays[2],
        vocabulary=vocab, reciprocal=bool(flags & 1),
    )


def dataset_hash(path) -> str:
    """SHA-256 of the container bytes; recorded in manifests and checkpoints."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_stats(splits: DatasetSplits) -> dict[str, int]:
    """Summary counts; ``timestamps_chronological`` excludes the reserved
    no-time slot so the figure stays comparable to published statistics,
    which count dated timestamps only."""
    vocab = splits.vocabulary
    stats = {
        "entities": vocab.n_entities,
        "relations": vocab.n_relations,
        "timestamps": vocab.n_timestamps,
    }
    if vocab.has_no_time:
        stats["timestamps_chronological"] = vocab.n_timestamps - 1
    stats.update({
        "train": int(splits.train.shape[0]),
        "valid": int(splits.valid.shape[0]),
        "test": int(splits.test.shape[0]),
        "facts": int(
            splits.train.shape[0] + splits.valid.shape[0] + splits.test.shape[0]
        ),
    })
    return stats
