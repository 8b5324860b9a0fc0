"""CSV ingestion with feature typing and imputation, plus split/subsample utilities."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

MISSING_TOKENS = {"", "na", "nan", "null", "?"}
MAX_CLASS_CARDINALITY = 20  # integer labels with more distinct values become regression


class DataError(ValueError):
    """Unreadable, empty, or structurally invalid dataset."""


@dataclass
class Dataset:
    """Tabular task: numeric matrix (categorical columns as codes) plus labels.

    Categorical columns are expanded to one-hot indicators by design_matrix()
    before any learner sees them.
    """

    rows: np.ndarray
    labels: np.ndarray
    feature_kinds: tuple[str, ...]
    task_kind: str  # "classification" | "regression"
    feature_names: tuple[str, ...]
    categories: tuple[tuple[str, ...], ...] = ()
    class_names: tuple[str, ...] = ()
    name: str = "dataset"

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_features(self) -> int:
        return self.rows.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def select_rows(self, idx: np.ndarray) -> "Dataset":
        return replace(self, rows=self.rows[idx], labels=self.labels[idx])

    def merge(self, other: "Dataset") -> "Dataset":
        return replace(
            self,
            rows=np.vstack([self.rows, other.rows]),
            labels=np.concatenate([self.labels, other.labels]),
        )


def _is_missing(token: str) -> bool:
    return token.strip().lower() in MISSING_TOKENS


def _try_float(token: str) -> float | None:
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_dataset(path: str, name: str | None = None) -> Dataset:
    """Parse a headered CSV; the last column is the label.

    Numeric columns become continuous (discrete when integral); non-numeric
    become categorical. Missing numerics are imputed by the column mean,
    missing categoricals by the mode. The task is classification when the
    label is non-numeric or integral with few distinct values.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty dataset") from None
            raw = [row for row in reader if row]
    except OSError as exc:
        raise DataError(f"{path}: unreadable file ({exc})") from None
    if len(header) < 2:
        raise DataError(f"{path}: need at least one feature column and a label column")
    if not raw:
        raise DataError(f"{path}: empty dataset")
    if any(len(row) != len(header) for row in raw):
        raise DataError(f"{path}: ragged rows (expected {len(header)} fields)")

    keep = [row for row in raw if not _is_missing(row[-1])]
    if len(keep) < len(raw):
        warnings.warn(f"{path}: dropped {len(raw) - len(keep)} rows with missing labels")
    if not keep:
        raise DataError(f"{path}: empty dataset")

    n, d = len(keep), len(header) - 1
    columns = np.empty((n, d))
    kinds: list[str] = []
    categories: list[tuple[str, ...]] = []
    for j in range(d):
        tokens = [row[j] for row in keep]
        present = [(i, _try_float(t)) for i, t in enumerate(tokens) if not _is_missing(t)]
        numeric = bool(present) and all(v is not None for _, v in present)
        if numeric:
            values = np.full(n, np.nan)
            for i, v in present:
                values[i] = v
            mean = float(np.mean([v for _, v in present]))
            values[np.isnan(values)] = mean
            columns[:, j] = values
            integral = all(float(v).is_integer() for _, v in present)
            kinds.append("discrete" if integral else "continuous")
            categories.append(())
        else:
            filled = [t if not _is_missing(t) else None for t in tokens]
            observed = [t for t in filled if t is not None]
            if not observed:
                raise DataError(f"{path}: column {header[j]!r} entirely missing")
            counts: dict[str, int] = {}
            for t in observed:
                counts[t] = counts.get(t, 0) + 1
            mode = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
            filled = [t if t is not None else mode for t in filled]
            cats = tuple(sorted(set(filled)))
            code = {c: k for k, c in enumerate(cats)}
            columns[:, j] = [code[t] for t in filled]
            kinds.append("categorical")
            categories.append(cats)

    label_tokens = [row[-1] for row in keep]
    parsed = [_try_float(t) for t in label_tokens]
    numeric_labels = all(v is not None for v in parsed)
    if numeric_labels:
        integral = all(v.is_integer() for v in parsed)
        classification = integral and len(set(parsed)) <= MAX_CLASS_CARDINALITY
    else:
        classification = True
    if classification:
        if numeric_labels:
            ordered = sorted(set(parsed))
            class_names = tuple(str(int(v)) for v in ordered)
            code = {v: k for k, v in enumerate(ordered)}
            labels = np.array([code[v] for v in parsed], dtype=int)
        else:
            class_names = tuple(sorted(set(label_tokens)))
            code = {c: k for k, c in enumerate(class_names)}
            labels = np.array([code[t] for t in label_tokens], dtype=int)
        task_kind = "classification"
    else:
        labels = np.array(parsed, dtype=float)
        class_names = ()
        task_kind = "regression"

    return Dataset(
        rows=columns,
        labels=labels,
        feature_kinds=tuple(kinds),
        task_kind=task_kind,
        feature_names=tuple(header[:-1]),
        categories=tuple(categories),
        class_names=class_names,
        name=name or path,
    )


def design_matrix(ds: Dataset) -> np.ndarray:
    """Numeric learner input: categorical code columns one-hot expanded."""
    blocks = []
    for j, kind in enumerate(ds.feature_kinds):
        col = ds.rows[:, j]
        if kind == "categorical":
            width = len(ds.categories[j])
            hot = np.zeros((ds.n_rows, width))
            hot[np.arange(ds.n_rows), col.astype(int)] = 1.0
            blocks.append(hot)
        else:
            blocks.append(col[:, None])
    return np.hstack(blocks)


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing to `total`, proportional to `quotas`."""
    base = np.floor(quotas).astype(int)
    short = total - int(base.sum())
    if short > 0:
        remainders = quotas - np.floor(quotas)
        order = np.lexsort((np.arange(len(quotas)), -remainders))
        for i in order[:short]:
            base[i] += 1
    return base


def _partition_indices(
    ds: Dataset, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Split row indices into (kept, held-out) where held-out gets `fraction`."""
    n = ds.n_rows
    stratify = ds.task_kind == "classification"
    if stratify:
        class_counts = np.bincount(ds.labels, minlength=ds.n_classes)
        if class_counts.min() < 1 / fraction:
            warnings.warn("too few rows per class to stratify; splitting unstratified")
            stratify = False
    if not stratify:
        perm = rng.permutation(n)
        n_out = int(round(fraction * n))
        return np.sort(perm[n_out:]), np.sort(perm[:n_out])
    n_out_total = int(round(fraction * n))
    per_class = _largest_remainder(
        np.array([fraction * c for c in np.bincount(ds.labels)]), n_out_total
    )
    held, kept = [], []
    for cls, quota in enumerate(per_class):
        members = np.flatnonzero(ds.labels == cls)
        members = members[rng.permutation(len(members))]
        held.append(members[:quota])
        kept.append(members[quota:])
    return np.sort(np.concatenate(kept)), np.sort(np.concatenate(held))


def split_train_valid_test(ds: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Outer 4/5 search vs 1/5 test; the search part split 3/4 train, 1/4 validation."""
    if ds.n_rows < 10:
        raise DataError("need at least 10 rows to split")
    rng = np.random.default_rng(seed)
    search_idx, test_idx = _partition_indices(ds, 0.2, rng)
    search = ds.select_rows(search_idx)
    train_rel, valid_rel = _partition_indices(search, 0.25, rng)
    return (
        search.select_rows(train_rel),
        search.select_rows(valid_rel),
        ds.select_rows(test_idx),
    )


def subsample(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified (classification) or uniform (regression) subset of ceil(fraction*n) rows."""
    if not 0 < fraction <= 1:
        raise DataError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return ds
    n_keep = math.ceil(fraction * ds.n_rows)
    if n_keep < 2:
        raise DataError("subsample would keep fewer than 2 rows")
    rng = np.random.default_rng(seed)
    if ds.task_kind == "classification":
        quotas = _largest_remainder(
            np.array([fraction * c for c in np.bincount(ds.labels)]), n_keep
        )
        parts = []
        for cls, quota in enumerate(quotas):
            members = np.flatnonzero(ds.labels == cls)
            members = members[rng.permutation(len(members))]
            parts.append(members[:quota])
        idx = np.sort(np.concatenate(parts))
    else:
        idx = np.sort(rng.permutation(ds.n_rows)[:n_keep])
    return ds.select_rows(idx)
