"""Per-question-type answer priors and the quantities derived from them."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .dataset import Split
from .errors import CCBError, DatasetParseError, SchemaVersionError, ValidationError

BIAS_SCHEMA_VERSION = 1
# threshold for "b_ij > 0"; absorbs float noise from normalisation
POSITIVE_TAU = 1e-12


@dataclass(frozen=True, eq=False)
class BiasTable:
    table: np.ndarray  # [n_qtypes, |A|], rows sum to 1
    source_split_name: str
    smoothing_epsilon: float = 0.0

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        if t.ndim != 2 or t.shape[1] < 1:
            raise ValidationError("bias table must be a 2-D matrix")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValidationError("bias table entries must be finite and non-negative")
        if np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-9:
            raise ValidationError("bias table rows must sum to 1")

    def __eq__(self, other):
        return (
            isinstance(other, BiasTable)
            and self.source_split_name == other.source_split_name
            and self.smoothing_epsilon == other.smoothing_epsilon
            and np.array_equal(self.table, other.table)
        )

    @property
    def n_qtypes(self) -> int:
        return self.table.shape[0]

    def rows(self, qtypes: np.ndarray) -> np.ndarray:
        """Batched lookup, shape [len(qtypes), |A|]."""
        return self.table[np.asarray(qtypes, dtype=np.int64)]


def estimate_bias(train: Split, smoothing_epsilon: float = 0.0) -> BiasTable:
    """Normalised soft-label mass per question type; unseen types get a flat row."""
    if smoothing_epsilon < 0:
        raise ValidationError("smoothing_epsilon must be >= 0")
    arr = train.arrays()
    mass = kernels.type_label_mass(arr["qtypes"], arr["labels"], train.qtype_table.n_types)
    mass = mass + smoothing_epsilon
    totals = mass.sum(axis=1, keepdims=True)
    n_a = mass.shape[1]
    table = np.where(totals > 0, mass / np.where(totals > 0, totals, 1.0), 1.0 / n_a)
    return BiasTable(table, train.split_name, smoothing_epsilon)


def bias_for(table: BiasTable, qtype: int) -> np.ndarray:
    if not isinstance(qtype, (int, np.integer)) or not 0 <= qtype < table.n_qtypes:
        raise CCBError(f"unknown qtype {qtype!r}")
    return table.table[int(qtype)]


def binarize(b: np.ndarray) -> np.ndarray:
    return (np.asarray(b, dtype=np.float64) > POSITIVE_TAU).astype(np.float64)


def reweight(b: np.ndarray, r: float, mode: str = "per_answer", y: np.ndarray | None = None) -> np.ndarray:
    """Down-weighting factors (1 - b)^r, broadcast to the shape of ``b``.

    ``per_answer``: each answer's term gets (1 - b_j)^r.
    ``per_instance_max``: every term of an instance gets (1 - max_j b_j)^r.
    ``per_instance_label``: every term gets (1 - <y, b> / sum(y))^r, i.e. the
    prior mass of the instance's own answer (needs ``y``).
    """
    if r < 0:
        raise ValidationError(f"r must be >= 0, got {r}")
    b = np.asarray(b, dtype=np.float64)
    if mode == "per_answer":
        base = 1.0 - b
    elif mode == "per_instance_max":
        base = np.broadcast_to(1.0 - b.max(axis=-1, keepdims=True), b.shape)
    elif mode == "per_instance_label":
        if y is None:
            raise ValidationError("per_instance_label weighting needs the labels y")
        y = np.asarray(y, dtype=np.float64)
        prior = (y * b).sum(axis=-1, keepdims=True) / np.maximum(y.sum(axis=-1, keepdims=True), 1e-300)
        base = np.broadcast_to(1.0 - prior, b.shape)
    else:
        raise ValidationError(f"unknown reweight mode {mode!r}")
    if r == 0:
        return np.ones_like(b)
    return np.power(np.clip(base, 0.0, None), r)


# ---------------------------------------------------------------------------
# text matrix file
# ---------------------------------------------------------------------------

def save_bias_table(table: BiasTable, path, answers, type_names) -> Path:
    path = Path(path)
    lines = [
        f"# ccb-bias-table schema_version={BIAS_SCHEMA_VERSION}",
        f"# source_split_name={table.source_split_name}",
        f"# smoothing_epsilon={table.smoothing_epsilon!r}",
        "qtype\t" + "\t".join(answers),
    ]
    for name, row in zip(type_names, table.table):
        lines.append(name + "\t" + "\t".join(repr(float(x)) for x in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_bias_table(path) -> tuple[BiasTable, list[str], list[str]]:
    meta = {}
    rows, names, answers = [], [], None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.startswith("#"):
            for part in line[1:].split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k] = v
            continue
        cells = line.split("\t")
        if answers is None:
            answers = cells[1:]
            continue
        try:
            rows.append([float(x) for x in cells[1:]])
        except ValueError:
            raise DatasetParseError("non-numeric bias entry", lineno) from None
        names.append(cells[0])
    if meta.get("schema_version") != str(BIAS_SCHEMA_VERSION):
        raise SchemaVersionError(f"bias table schema_version {meta.get('schema_version')!r}")
    table = BiasTable(
        np.array(rows), meta.get("source_split_name", ""), float(meta.get("smoothing_epsilon", 0.0))
    )
    return table, answers or [], names
