"""Datasets on disk, preprocessing, and a synthetic multityped corpus.

On-disk layout (all paths in the manifest are relative to it)::

    manifest.json   {"format": "mtdbn/1", "instance_count": n,
                     "views":   [{"name", "unit_type", "dim", "path"}, ...],
                     "targets": [{"name", "kind", "path", "labels"?}, ...],
                     "splits":  {"train": [ids], "calibrate": [ids], "test": [ids]}}
    <view>.csv      headerless, one instance per row
    <target>.jsonl  one {"id", "kind", "y"} object per line; missing ids = no target

Error messages name the file and the 1-based line.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .heads import KINDS, STRUCTURED
from .rbm import UnitType

__all__ = [
    "FORMAT",
    "TargetColumn",
    "Dataset",
    "NormalizationStats",
    "load_dataset",
    "write_dataset",
    "normalize_real_view",
    "transform_counts",
    "fit_preprocess",
    "apply_preprocess",
    "SyntheticSpec",
    "generate_synthetic",
]

FORMAT = "mtdbn/1"


@dataclass
class TargetColumn:
    kind: str
    values: list  # one payload per instance, None where absent
    labels: list = field(default_factory=list)

    def label_sets(self) -> list:
        """Label sets per instance (multilabel/multiclass/ranking payloads)."""
        out = []
        for v in self.values:
            if v is None:
                out.append(frozenset())
            elif self.kind == "multiclass":
                out.append(frozenset([v]))
            else:
                out.append(frozenset(v))
        return out

    def indicator(self) -> np.ndarray:
        index = {l: i for i, l in enumerate(self.labels)}
        out = np.zeros((len(self.values), len(self.labels)), dtype=bool)
        for r, s in enumerate(self.label_sets()):
            for l in s:
                out[r, index[l]] = True
        return out


@dataclass
class Dataset:
    view_types: dict  # name -> UnitType, declaration order
    views: dict       # name -> (n, dim) float64
    targets: dict = field(default_factory=dict)  # name -> TargetColumn
    splits: dict = field(default_factory=dict)   # name -> int array of row ids

    def __post_init__(self):
        self.view_types = {k: UnitType(v) for k, v in self.view_types.items()}
        if list(self.view_types) != list(self.views):
            raise DataError("view types and matrices disagree")
        counts = {np.shape(x)[0] for x in self.views.values()}
        if len(counts) > 1:
            raise DataError(f"views disagree on instance count: {sorted(counts)}")

    @property
    def n(self) -> int:
        return next(iter(self.views.values())).shape[0] if self.views else 0

    def split_ids(self, name: str) -> np.ndarray:
        if name not in self.splits:
            return np.arange(self.n) if not self.splits else np.zeros(0, dtype=int)
        return np.asarray(self.splits[name], dtype=int)

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids, dtype=int)
        views = {k: v[ids] for k, v in self.views.items()}
        targets = {k: TargetColumn(t.kind, [t.values[i] for i in ids], list(t.labels))
                   for k, t in self.targets.items()}
        return Dataset(dict(self.view_types), views, targets, {})

    def split(self, name: str) -> "Dataset":
        return self.subset(self.split_ids(name))


# -- reading -----------------------------------------------------------------------

def _read_view(path: Path, unit: UnitType, dim: int, n: int) -> np.ndarray:
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read view file ({exc.strerror})", path) from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError:
            raise DataError("non-numeric entry", path, lineno) from None
        if len(row) != dim:
            raise DataError(f"{len(row)} columns, expected {dim}", path, lineno)
        bad = _domain_problem(unit, row)
        if bad:
            raise DataError(bad, path, lineno)
        rows.append(row)
    if len(rows) != n:
        raise DataError(f"{len(rows)} rows, manifest declares {n}", path)
    return np.array(rows, dtype=np.float64).reshape(n, dim)


def _domain_problem(unit: UnitType, row) -> str | None:
    if not all(math.isfinite(x) for x in row):
        return "non-finite entry"
    if unit is UnitType.BINARY and any(x not in (0.0, 1.0) for x in row):
        return "binary entries must be 0 or 1"
    if unit is UnitType.COUNT and any(x < 0 or x != int(x) for x in row):
        return "count entries must be non-negative integers"
    return None


def _check_payload(kind: str, y, labels: list):
    if kind == "regression":
        if not isinstance(y, (int, float)) or isinstance(y, bool) or not math.isfinite(y):
            return "regression target must be a finite number"
    elif kind == "logistic":
        if y not in (-1, 1) or isinstance(y, bool):
            return "logistic target must be -1 or 1"
    elif kind == "poisson":
        if not isinstance(y, int) or isinstance(y, bool) or y < 0:
            return "poisson target must be a non-negative integer"
    elif kind == "multiclass":
        if y not in labels:
            return f"unknown label {y!r}"
    else:
        if not isinstance(y, list) or not y:
            return f"{kind} target must be a non-empty list of labels"
        unknown = [l for l in y if l not in labels]
        if unknown:
            return f"unknown labels {unknown!r}"
        if len(set(y)) != len(y):
            return "duplicate labels"
    return None


def _read_target(path: Path, kind: str, labels: list, n: int) -> list:
    values = [None] * n
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read target file ({exc.strerror})", path) from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            i, y = rec["id"], rec["y"]
        except (ValueError, KeyError, TypeError):
            raise DataError("malformed target record", path, lineno) from None
        if rec.get("kind", kind) != kind:
            raise DataError(f"record kind {rec.get('kind')!r} != declared {kind!r}", path, lineno)
        if not isinstance(i, int) or not 0 <= i < n:
            raise DataError(f"instance id {i!r} out of range", path, lineno)
        if values[i] is not None:
            raise DataError(f"duplicate target for instance {i}", path, lineno)
        problem = _check_payload(kind, y, labels)
        if problem:
            raise DataError(problem, path, lineno)
        values[i] = y
    return values


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest ({exc.strerror})", path) from None
    except ValueError:
        raise DataError("manifest is not valid JSON", path) from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"unsupported format {manifest.get('format')!r}", path)
    root = path.parent
    try:
        n = int(manifest["instance_count"])
        view_entries = manifest["views"]
    except (KeyError, TypeError, ValueError):
        raise DataError("manifest needs instance_count and views", path) from None
    view_types, views = {}, {}
    for e in view_entries:
        name = e.get("name")
        if not name or name in views:
            raise DataError(f"missing or duplicate view name {name!r}", path)
        try:
            unit = UnitType(e.get("unit_type"))
        except ValueError:
            raise DataError(f"view {name!r}: unknown unit type {e.get('unit_type')!r}", path) from None
        view_types[name] = unit
        views[name] = _read_view(root / e["path"], unit, int(e["dim"]), n)
    targets = {}
    for e in manifest.get("targets", []):
        name, kind = e.get("name"), e.get("kind")
        if kind not in KINDS:
            raise DataError(f"target {name!r}: unknown kind {kind!r}", path)
        labels = [str(l) for l in e.get("labels", [])]
        if kind in STRUCTURED and len(labels) < 2:
            raise DataError(f"target {name!r}: structured kinds need >= 2 labels", path)
        targets[name] = TargetColumn(kind, _read_target(root / e["path"], kind, labels, n), labels)
    splits = {}
    for k, ids in manifest.get("splits", {}).items():
        ids = [int(i) for i in ids]
        if any(not 0 <= i < n for i in ids):
            raise DataError(f"split {k!r} references ids outside [0, {n})", path)
        splits[k] = np.array(ids, dtype=int)
    return Dataset(view_types, views, targets, splits)


def _fmt_row(unit: UnitType, row) -> str:
    if unit is UnitType.REAL:
        return ",".join(repr(float(x)) for x in row)
    return ",".join(str(int(x)) for x in row)


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write manifest, view CSVs and target JSON-lines; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for name, unit in ds.view_types.items():
        fname = f"{name}.csv"
        x = ds.views[name]
        (out / fname).write_text("".join(_fmt_row(unit, r) + "\n" for r in x))
        views.append({"name": name, "unit_type": unit.value, "dim": int(x.shape[1]), "path": fname})
    targets = []
    for name, col in ds.targets.items():
        fname = f"{name}.jsonl"
        lines = [json.dumps({"id": i, "kind": col.kind, "y": y}, sort_keys=True)
                 for i, y in enumerate(col.values) if y is not None]
        (out / fname).write_text("".join(l + "\n" for l in lines))
        entry = {"name": name, "kind": col.kind, "path": fname}
        if col.labels:
            entry["labels"] = list(col.labels)
        targets.append(entry)
    manifest = {"format": FORMAT, "instance_count": ds.n, "views": views, "targets": targets,
                "splits": {k: [int(i) for i in v] for k, v in ds.splits.items()}}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


# -- preprocessing -------------------------------------------------------------------

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    recipe: str = "unit-l2+zscore"

    def to_dict(self) -> dict:
        return {"recipe": self.recipe, "mean": [float(x) for x in self.mean],
                "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   d.get("recipe", "unit-l2+zscore"))


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def normalize_real_view(x, stats: NormalizationStats | None = None):
    """Scale rows to unit L2 norm, then z-score each column.

    Without ``stats`` the column statistics are fitted on ``x`` (pass the
    training rows); with ``stats`` they are reused. Returns ``(x, stats)``.
    """
    u = _unit_rows(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if stats is None:
        if u.shape[0] == 0:
            raise DataError("cannot fit normalization on zero rows")
        mean = u.mean(axis=0)
        std = u.std(axis=0)
        flat = ~(std > 1e-12)
        if flat.any():
            warnings.warn(f"{int(flat.sum())} zero-variance column(s); using std=1", stacklevel=2)
            std = np.where(flat, 1.0, std)
        stats = NormalizationStats(mean, std)
    return (u - stats.mean) / stats.std, stats


def transform_counts(x, mode: str = "round") -> np.ndarray:
    """``log(1 + count)``, brought back to integers by ``round``/``floor``.

    ``mode="none"`` returns the raw log values, which are no longer counts.
    """
    y = np.log1p(np.asarray(x, dtype=np.float64))
    if mode == "round":
        return np.floor(y + 0.5)
    if mode == "floor":
        return np.floor(y)
    if mode == "none":
        return y
    raise DataError(f"unknown count transform {mode!r}")


def fit_preprocess(ds: Dataset, fit_ids=None, count_mode: str = "round") -> dict:
    """Per-view preprocessing recipe, with real-view statistics fitted on ``fit_ids``."""
    fit_ids = np.arange(ds.n) if fit_ids is None else np.asarray(fit_ids, dtype=int)
    out = {}
    for name, unit in ds.view_types.items():
        if unit is UnitType.REAL:
            _, stats = normalize_real_view(ds.views[name][fit_ids])
            out[name] = stats.to_dict()
        elif unit is UnitType.COUNT:
            out[name] = {"recipe": f"log1p-{count_mode}"}
        else:
            out[name] = {"recipe": "identity"}
    return out


def apply_preprocess(ds: Dataset, recipe: dict) -> Dataset:
    views = {}
    for name, unit in ds.view_types.items():
        r = recipe.get(name, {"recipe": "identity"})
        x = ds.views[name]
        kind = r["recipe"]
        if kind == "unit-l2+zscore":
            x, _ = normalize_real_view(x, NormalizationStats.from_dict(r))
        elif kind.startswith("log1p-"):
            x = transform_counts(x, kind[len("log1p-"):])
        elif kind != "identity":
            raise DataError(f"view {name!r}: unknown preprocessing recipe {kind!r}")
        views[name] = x
    return Dataset(dict(ds.view_types), views, dict(ds.targets), dict(ds.splits))


# -- synthetic corpus ----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Clustered multityped corpus.

    Each cluster owns a prototype per view, ``labels_per_cluster`` concept
    labels (the first always present, the others with probability
    ``secondary_label_prob``) and a preference order over ``n_tags`` tags.
    """

    clusters: int = 4
    per_cluster: int = 50
    real_dim: int = 8
    count_dim: int = 12
    binary_dim: int = 10
    real_noise: float = 2.0
    count_length: float = 10.0
    count_contrast: float = 1.0
    binary_flip: float = 0.3
    labels_per_cluster: int = 2
    secondary_label_prob: float = 0.5
    n_tags: int = 6
    rank_depth: int = 3
    tag_noise: float = 1.0
    split_fractions: tuple = (0.5, 0.0, 0.5)  # train, calibrate, test
    seed: int = 0


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), out_dir=None) -> Dataset:
    """Draw a seeded clustered corpus with real, count and binary views.

    Targets: ``concepts`` (multilabel, cluster-pure labels) and ``tags``
    (partial ranking of the top ``rank_depth`` tags). When ``out_dir`` is
    given, the dataset is also written there.
    """
    rng = np.random.default_rng(spec.seed)
    C, m = spec.clusters, spec.per_cluster
    n = C * m
    cluster = np.repeat(np.arange(C), m)

    real_proto = rng.normal(0.0, 1.0, (C, spec.real_dim))
    count_logits = spec.count_contrast * rng.normal(0.0, 1.0, (C, spec.count_dim))
    count_rate = np.exp(count_logits)
    count_rate *= spec.count_length / count_rate.sum(axis=1, keepdims=True)
    binary_proto = rng.random((C, spec.binary_dim)) < 0.5
    tag_utility = rng.normal(0.0, 1.5, (C, spec.n_tags))

    real = real_proto[cluster] + spec.real_noise * rng.normal(0.0, 1.0, (n, spec.real_dim))
    count = rng.poisson(count_rate[cluster]).astype(np.float64)
    flips = rng.random((n, spec.binary_dim)) < spec.binary_flip
    binary = (binary_proto[cluster] ^ flips).astype(np.float64)

    concept_labels = [f"concept{c}_{j}" for c in range(C) for j in range(spec.labels_per_cluster)]
    concepts = []
    secondary = rng.random((n, max(spec.labels_per_cluster - 1, 0))) < spec.secondary_label_prob
    for i in range(n):
        c = cluster[i]
        labels = [f"concept{c}_0"]
        labels += [f"concept{c}_{j}" for j in range(1, spec.labels_per_cluster) if secondary[i, j - 1]]
        concepts.append(labels)

    tag_labels = [f"tag{k}" for k in range(spec.n_tags)]
    gumbel = rng.gumbel(0.0, spec.tag_noise, (n, spec.n_tags))
    tags = []
    for i in range(n):
        order = np.argsort(-(tag_utility[cluster[i]] + gumbel[i]), kind="stable")
        tags.append([tag_labels[k] for k in order[:spec.rank_depth]])

    perm = rng.permutation(n)
    fr = np.asarray(spec.split_fractions, dtype=np.float64)
    cuts = np.round(np.cumsum(fr / fr.sum()) * n).astype(int)
    splits = {"train": np.sort(perm[:cuts[0]]),
              "calibrate": np.sort(perm[cuts[0]:cuts[1]]),
              "test": np.sort(perm[cuts[1]:])}

    ds = Dataset(
        {"real": UnitType.REAL, "count": UnitType.COUNT, "binary": UnitType.BINARY},
        {"real": real, "count": count, "binary": binary},
        {"concepts": TargetColumn("multilabel", concepts, concept_labels),
         "tags": TargetColumn("ranking", tags, tag_labels)},
        splits,
    )
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds
