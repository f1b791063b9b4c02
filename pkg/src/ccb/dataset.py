"""Synthetic VQA-like data with a changing answer prior between splits.

Every question type owns a small pool of answers. Training answers follow a
skewed prior (one majority answer per type); the test split either moves the
majority to a different answer (``inverted``) or flattens it (``uniform``).
The answer is always readable from the images: one region carries the
answer's codeword plus a marker direction, the remaining regions carry
codewords of random answers from the same pool. Each region draws its
codeword from one of ``n_views`` rotated copies of an orthonormal codebook,
so an exhaustive decoder recovers the answer exactly while a small model
has to learn many patterns per answer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetParseError, SchemaVersionError, ValidationError

SCHEMA_VERSION = 1
CATEGORIES = ("yesno", "number", "other")
SOFT_SCORES = (0.0, 0.3, 0.6, 0.9, 1.0)
# feature values are stored rounded so that the text format round-trips exactly
FEATURE_DECIMALS = 5


@dataclass(frozen=True)
class AnswerSpace:
    answers: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        if len(self.answers) < 2:
            raise ValidationError("answer_space: need at least 2 answers")
        if len(set(self.answers)) != len(self.answers):
            raise ValidationError("answer_space: answer identifiers must be unique")

    @property
    def size(self) -> int:
        return len(self.answers)

    def index(self, answer: str) -> int:
        return self.answers.index(answer)


@dataclass(frozen=True)
class QuestionTypeTable:
    type_names: tuple[str, ...]
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "type_names", tuple(self.type_names))
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.type_names:
            raise ValidationError("qtype_table: need at least one question type")
        if len(self.categories) != len(self.type_names):
            raise ValidationError("qtype_table: every type needs exactly one category")
        bad = [c for c in self.categories if c not in CATEGORIES]
        if bad:
            raise ValidationError(f"qtype_table: unknown categories {bad}")

    @property
    def n_types(self) -> int:
        return len(self.type_names)

    def category_of(self, qtype: int) -> str:
        return self.categories[qtype]


@dataclass(eq=False)
class Instance:
    image_features: np.ndarray  # [R, d_v]
    question_tokens: tuple[int, ...]
    qtype: int
    labels: np.ndarray  # [|A|], entries in [0, 1]

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.qtype == other.qtype
            and tuple(self.question_tokens) == tuple(other.question_tokens)
            and np.array_equal(self.image_features, other.image_features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def answer(self) -> int:
        """Index of the max-label answer."""
        return int(np.argmax(self.labels))


@dataclass(eq=False)
class Split:
    instances: list[Instance]
    answer_space: AnswerSpace
    qtype_table: QuestionTypeTable
    split_name: str
    vocab_size: int | None = None
    _arrays: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.instances:
            raise ValidationError(f"split {self.split_name!r} must be non-empty")
        n_a, n_t = self.answer_space.size, self.qtype_table.n_types
        shape = self.instances[0].image_features.shape
        for k, inst in enumerate(self.instances):
            if not 0 <= inst.qtype < n_t:
                raise ValidationError(f"instance {k}: qtype {inst.qtype} out of range")
            if inst.labels.shape != (n_a,):
                raise ValidationError(f"instance {k}: labels must have length {n_a}")
            if inst.labels.min() < 0 or inst.labels.max() > 1 or inst.labels.max() <= 0:
                raise ValidationError(f"instance {k}: labels must lie in [0,1] with one positive entry")
            if inst.image_features.shape != shape or not np.all(np.isfinite(inst.image_features)):
                raise ValidationError(f"instance {k}: image features must be finite with shape {shape}")
            if len(inst.question_tokens) == 0:
                raise ValidationError(f"instance {k}: empty question")
            if self.vocab_size is not None and max(inst.question_tokens) >= self.vocab_size:
                raise ValidationError(f"instance {k}: token id beyond vocab_size {self.vocab_size}")

    def __len__(self):
        return len(self.instances)

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return (
            self.split_name == other.split_name
            and self.vocab_size == other.vocab_size
            and self.answer_space == other.answer_space
            and self.qtype_table == other.qtype_table
            and len(self.instances) == len(other.instances)
            and all(a == b for a, b in zip(self.instances, other.instances))
        )

    def arrays(self) -> dict:
        """Stacked views used by training and evaluation (cached)."""
        if self._arrays is None:
            self._arrays = {
                "features": np.stack([i.image_features for i in self.instances]),
                "labels": np.stack([i.labels for i in self.instances]),
                "qtypes": np.array([i.qtype for i in self.instances], dtype=np.int64),
                "tokens": [tuple(i.question_tokens) for i in self.instances],
            }
        return self._arrays


@dataclass(frozen=True)
class ShiftSpec:
    n_train: int = 5000
    n_test: int = 1000
    n_qtypes: int = 8
    n_answers_per_type: int = 4
    skew: float = 0.9
    shift_mode: str = "inverted"
    n_regions: int = 6
    d_v: int = 40
    vocab_size: int = 48
    question_len: tuple[int, int] = (4, 8)
    soft_labels: bool = False
    signal_amp: float = 1.0
    marker_amp: float = 1.0
    noise: float = 0.3
    n_views: int = 6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "question_len", tuple(self.question_len))
        self.validate()

    @property
    def n_answers(self) -> int:
        return self.n_qtypes * self.n_answers_per_type

    def validate(self) -> None:
        def bad(name, why):
            raise ValidationError(f"{name}: {why}")

        for name in ("n_train", "n_test", "n_qtypes", "n_regions", "d_v", "vocab_size"):
            if int(getattr(self, name)) <= 0:
                bad(name, "must be > 0")
        if self.n_answers_per_type < 2:
            bad("n_answers_per_type", "must be >= 2")
        if not (1.0 / self.n_answers_per_type - 1e-12 <= self.skew <= 1.0):
            bad("skew", f"must lie in [1/n_answers_per_type, 1], got {self.skew}")
        if self.shift_mode not in ("inverted", "uniform"):
            bad("shift_mode", f"must be 'inverted' or 'uniform', got {self.shift_mode!r}")
        if self.d_v < self.n_answers + 1:
            bad("d_v", f"must be >= number of answers + 1 ({self.n_answers + 1})")
        if self.vocab_size < 2 * self.n_qtypes + 2:
            bad("vocab_size", f"must be >= 2*n_qtypes + 2 ({2 * self.n_qtypes + 2})")
        lo, hi = self.question_len
        if not (2 <= lo <= hi):
            bad("question_len", "need 2 <= min <= max")
        if self.n_views < 1:
            bad("n_views", "must be >= 1")
        if self.noise < 0 or self.signal_amp <= 0 or self.marker_amp <= 0:
            bad("noise", "amplitudes must be positive and noise non-negative")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["question_len"] = list(self.question_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(**d)


@dataclass(frozen=True)
class World:
    """The hidden generative structure shared by every split of one seed."""

    answer_space: AnswerSpace
    qtype_table: QuestionTypeTable
    codebook: np.ndarray  # [n_views, |A|, d_v]; rows of each view orthonormal
    marker: np.ndarray  # [d_v], orthogonal to every codeword of view 0
    train_majority: np.ndarray  # [T] global answer ids
    test_majority: np.ndarray  # [T]

    def pool(self, qtype: int, k: int) -> np.ndarray:
        return np.arange(qtype * k, (qtype + 1) * k)


def _seed_streams(seed: int):
    world, train, test, iid = np.random.SeedSequence(seed).spawn(4)
    return world, train, test, iid


def build_world(spec: ShiftSpec) -> World:
    ss_world = _seed_streams(spec.seed)[0]
    rng = np.random.default_rng(ss_world)
    k, n_t = spec.n_answers_per_type, spec.n_qtypes
    answers = tuple(f"q{t}_a{j}" for t in range(n_t) for j in range(k))
    table = QuestionTypeTable(
        tuple(f"q{t}" for t in range(n_t)),
        tuple(CATEGORIES[t % len(CATEGORIES)] for t in range(n_t)),
    )
    basis, _ = np.linalg.qr(rng.standard_normal((spec.d_v, spec.n_answers + 1)))
    views = [basis[:, : spec.n_answers].T]
    for _ in range(spec.n_views - 1):
        rot, _ = np.linalg.qr(rng.standard_normal((spec.d_v, spec.d_v)))
        views.append(views[0] @ rot)
    local_train = rng.integers(0, k, size=n_t)
    local_test = (local_train + 1 + rng.integers(0, k - 1, size=n_t)) % k
    offs = np.arange(n_t) * k
    return World(
        AnswerSpace(answers),
        table,
        np.stack(views),
        basis[:, spec.n_answers].copy(),
        offs + local_train,
        offs + local_test,
    )


def answer_prior(spec: ShiftSpec, world: World, qtype: int, mode: str) -> np.ndarray:
    """Generative answer distribution over the type's pool (length k)."""
    k = spec.n_answers_per_type
    if mode == "uniform":
        return np.full(k, 1.0 / k)
    major = world.train_majority[qtype] if mode == "train" else world.test_majority[qtype]
    p = np.full(k, (1.0 - spec.skew) / (k - 1))
    p[major - qtype * k] = spec.skew
    return p


def _sample_split(spec: ShiftSpec, world: World, n: int, mode: str, name: str, ss) -> Split:
    rng = np.random.default_rng(ss)
    k, n_t, R, d = spec.n_answers_per_type, spec.n_qtypes, spec.n_regions, spec.d_v
    priors = np.stack([answer_prior(spec, world, t, mode) for t in range(n_t)])
    fillers = np.arange(2 * n_t, spec.vocab_size)
    qtypes = rng.integers(0, n_t, size=n)
    instances = []
    for i in range(n):
        t = int(qtypes[i])
        local = int(rng.choice(k, p=priors[t]))
        a = t * k + local

        length = int(rng.integers(spec.question_len[0], spec.question_len[1] + 1))
        toks = np.concatenate([[2 * t, 2 * t + 1], rng.choice(fillers, size=length - 2)])
        toks = tuple(int(x) for x in rng.permutation(toks))

        confusers = t * k + rng.integers(0, k, size=R)
        views = rng.integers(0, spec.n_views, size=R)
        feats = spec.signal_amp * world.codebook[views, confusers]
        pos = int(rng.integers(0, R))
        feats[pos] = spec.signal_amp * world.codebook[views[pos], a] + spec.marker_amp * world.marker
        feats = feats + rng.normal(0.0, spec.noise / math.sqrt(d), size=(R, d))
        feats = np.round(feats, FEATURE_DECIMALS)

        y = np.zeros(spec.n_answers)
        if spec.soft_labels:
            y[a] = rng.choice(SOFT_SCORES[3:])
            if rng.random() < 0.5:
                other = t * k + (local + 1 + int(rng.integers(0, k - 1))) % k
                y[other] = rng.choice(SOFT_SCORES[1:3])
        else:
            y[a] = 1.0
        instances.append(Instance(feats, toks, t, y))
    return Split(instances, world.answer_space, world.qtype_table, name, spec.vocab_size)


def generate_toy_dataset(spec: ShiftSpec) -> tuple[Split, Split]:
    """Return (train, test) splits; a pure function of ``spec``."""
    spec.validate()
    world = build_world(spec)
    _, ss_train, ss_test, _ = _seed_streams(spec.seed)
    train = _sample_split(spec, world, spec.n_train, "train", "train", ss_train)
    test_mode = "test" if spec.shift_mode == "inverted" else "uniform"
    test = _sample_split(spec, world, spec.n_test, test_mode, "test", ss_test)
    return train, test


def generate_iid_split(spec: ShiftSpec, n: int, name: str = "val") -> Split:
    """Held-out split drawn from the *training* prior (in-distribution reference)."""
    world = build_world(spec)
    return _sample_split(spec, world, n, "train", name, _seed_streams(spec.seed)[3])


# ---------------------------------------------------------------------------
# line-delimited file format
# ---------------------------------------------------------------------------

def _header(split: Split) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "header",
        "split_name": split.split_name,
        "vocab_size": split.vocab_size,
        "answer_space": list(split.answer_space.answers),
        "qtype_table": {
            "type_names": list(split.qtype_table.type_names),
            "categories": list(split.qtype_table.categories),
        },
    }


def _record(split: Split, inst: Instance) -> dict:
    nz = np.flatnonzero(inst.labels)
    return {
        "schema_version": SCHEMA_VERSION,
        "split_name": split.split_name,
        "qtype": inst.qtype,
        "qtype_category": split.qtype_table.category_of(inst.qtype),
        "question_tokens": list(inst.question_tokens),
        "image_features": [float(x) for x in inst.image_features.ravel()],
        "n_regions": int(inst.image_features.shape[0]),
        "labels": {str(int(j)): float(inst.labels[j]) for j in nz},
    }


def dumps_split(split: Split) -> str:
    lines = [json.dumps(_header(split), separators=(",", ":"))]
    lines += [json.dumps(_record(split, i), separators=(",", ":")) for i in split.instances]
    return "\n".join(lines) + "\n"


def save_split(split: Split, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_split(split), encoding="utf-8")
    return path


def _check_version(obj: dict, lineno: int):
    if "schema_version" not in obj:
        raise DatasetParseError("missing field 'schema_version'", lineno)
    if obj["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"line {lineno}: schema_version {obj['schema_version']!r}, expected {SCHEMA_VERSION}"
        )


_REQUIRED = ("split_name", "qtype", "question_tokens", "image_features", "n_regions", "labels")


def parse_split(lines: Iterable[str]) -> Split:
    header = None
    instances: list[Instance] = []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise DatasetParseError("record must be a JSON object", lineno)
        _check_version(obj, lineno)
        if header is None:
            if obj.get("kind") != "header":
                raise DatasetParseError("first record must be the header", lineno)
            try:
                answers = AnswerSpace(tuple(obj["answer_space"]))
                qt = QuestionTypeTable(
                    tuple(obj["qtype_table"]["type_names"]),
                    tuple(obj["qtype_table"]["categories"]),
                )
                header = (obj["split_name"], answers, qt, obj.get("vocab_size"))
            except KeyError as exc:
                raise DatasetParseError(f"missing header field {exc.args[0]!r}", lineno) from None
            continue
        for key in _REQUIRED:
            if key not in obj:
                raise DatasetParseError(f"missing field {key!r}", lineno)
        name, answers, qt, _ = header
        try:
            feats = np.asarray(obj["image_features"], dtype=np.float64)
            feats = feats.reshape(int(obj["n_regions"]), -1)
            y = np.zeros(answers.size)
            for j, score in obj["labels"].items():
                y[int(j)] = float(score)
            inst = Instance(feats, tuple(int(t) for t in obj["question_tokens"]), int(obj["qtype"]), y)
        except (ValueError, TypeError, IndexError) as exc:
            raise DatasetParseError(f"bad record ({exc})", lineno) from None
        if obj["split_name"] != name:
            raise DatasetParseError(f"split_name {obj['split_name']!r} != header {name!r}", lineno)
        instances.append(inst)
    if header is None:
        raise ValidationError("dataset file is empty: a split must be non-empty")
    return Split(instances, header[1], header[2], header[0], header[3])


def load_split(path) -> Split:
    with open(path, encoding="utf-8") as fh:
        return parse_split(fh)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class DatasetStats:
    histogram: np.ndarray  # [T, |A|] counts of max-label answers
    type_counts: np.ndarray  # [T]
    category_counts: dict[str, int]

    def majority(self) -> np.ndarray:
        return self.histogram.argmax(axis=1)

    def as_dict(self, split: Split) -> dict:
        ans = split.answer_space.answers
        rows = {}
        for t, name in enumerate(split.qtype_table.type_names):
            rows[name] = {ans[j]: int(c) for j, c in enumerate(self.histogram[t]) if c}
        return {"histogram": rows, "category_counts": dict(self.category_counts)}


def dataset_stats(split: Split) -> DatasetStats:
    arr = split.arrays()
    n_t = split.qtype_table.n_types
    hist = np.zeros((n_t, split.answer_space.size), dtype=np.int64)
    np.add.at(hist, (arr["qtypes"], arr["labels"].argmax(axis=1)), 1)
    cats = {c: 0 for c in CATEGORIES}
    for t in arr["qtypes"]:
        cats[split.qtype_table.category_of(int(t))] += 1
    return DatasetStats(hist, np.bincount(arr["qtypes"], minlength=n_t), cats)


def split_sha256(split: Split) -> str:
    import hashlib

    return hashlib.sha256(dumps_split(split).encode("utf-8")).hexdigest()


def subset(split: Split, indices: Sequence[int], name: str | None = None) -> Split:
    return Split(
        [split.instances[i] for i in indices],
        split.answer_space,
        split.qtype_table,
        name or split.split_name,
        split.vocab_size,
    )
