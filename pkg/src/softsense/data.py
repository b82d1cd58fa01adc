"""Multi-unit dataset containers, feature scaling, and the fleet CSV schema.

A fleet is stored as one CSV with columns ``unit_id, split, u, p, Q`` where
``split`` is one of ``train_labeled | train_unlabeled | test`` and ``Q`` is
empty on unlabeled rows, plus a JSON sidecar (same path with ``.meta.json``)
carrying the seed, parameter ranges, noise levels, and standardization
constants.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SPLIT_LABELED = "train_labeled"
SPLIT_UNLABELED = "train_unlabeled"
SPLIT_TEST = "test"
SPLITS = (SPLIT_LABELED, SPLIT_UNLABELED, SPLIT_TEST)

CSV_COLUMNS = ("unit_id", "split", "u", "p", "Q")


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class Scaler:
    """Affine standardization constants for inputs and targets."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def transform_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def inverse_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(),
            "y_std": self.y_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("x_mean", "x_std", "y_mean", "y_std")))

    @classmethod
    def identity(cls, dx: int, dy: int) -> "Scaler":
        return cls(np.zeros(dx), np.ones(dx), np.zeros(dy), np.ones(dy))


@dataclass
class UnitData:
    """One unit's rows, grouped by split.  Arrays are (n, d) float64."""

    unit_id: str
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    labeled_ids: list[tuple[str, int]] = field(default_factory=list)
    unlabeled_ids: list[tuple[str, int]] = field(default_factory=list)
    test_ids: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        # synthesize distinct row ids when the caller did not provide any
        if not self.labeled_ids:
            self.labeled_ids = [(self.unit_id, i)
                                for i in range(self.x_labeled.shape[0])]
        if not self.unlabeled_ids:
            base = self.x_labeled.shape[0]
            self.unlabeled_ids = [(self.unit_id, base + i)
                                  for i in range(self.x_unlabeled.shape[0])]
        if not self.test_ids:
            base = self.x_labeled.shape[0] + self.x_unlabeled.shape[0]
            self.test_ids = [(self.unit_id, base + i)
                             for i in range(self.x_test.shape[0])]

    @property
    def n_labeled(self) -> int:
        return self.x_labeled.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.x_unlabeled.shape[0]

    @property
    def n_train(self) -> int:
        return self.n_labeled + self.n_unlabeled


@dataclass
class MultiUnitDataset:
    """An ordered collection of units plus provenance metadata."""

    units: list[UnitData]
    meta: dict = field(default_factory=dict)

    @property
    def unit_ids(self) -> list[str]:
        return [u.unit_id for u in self.units]

    @property
    def n_labeled(self) -> int:
        return sum(u.n_labeled for u in self.units)

    @property
    def n_unlabeled(self) -> int:
        return sum(u.n_unlabeled for u in self.units)

    @property
    def n_train(self) -> int:
        return self.n_labeled + self.n_unlabeled

    def unit(self, unit_id: str) -> UnitData:
        for u in self.units:
            if u.unit_id == unit_id:
                return u
        raise KeyError(f"unknown unit {unit_id!r}")

    def scaler(self) -> Scaler:
        """Standardization constants from training rows only.

        Input statistics use labeled + unlabeled training inputs; target
        statistics use labeled training targets.  Test rows never enter.
        """
        xs = [u.x_labeled for u in self.units] + [u.x_unlabeled for u in self.units]
        x = np.concatenate([a for a in xs if a.size], axis=0)
        ys = [u.y_labeled for u in self.units if u.y_labeled.size]
        y = np.concatenate(ys, axis=0) if ys else np.zeros((0, 1))
        x_std = x.std(axis=0)
        y_std = y.std(axis=0) if y.size else np.ones(y.shape[1])
        return Scaler(
            x_mean=x.mean(axis=0),
            x_std=np.where(x_std > 0, x_std, 1.0),
            y_mean=y.mean(axis=0) if y.size else np.zeros(y.shape[1]),
            y_std=np.where(y_std > 0, y_std, 1.0),
        )

    def standardized(self, scaler: Scaler) -> "MultiUnitDataset":
        """A copy with all x and y arrays transformed into model space."""
        units = []
        for u in self.units:
            units.append(UnitData(
                unit_id=u.unit_id,
                x_labeled=scaler.transform_x(u.x_labeled),
                y_labeled=scaler.transform_y(u.y_labeled),
                x_unlabeled=scaler.transform_x(u.x_unlabeled),
                x_test=scaler.transform_x(u.x_test),
                y_test=u.y_test.copy(),
                labeled_ids=list(u.labeled_ids),
                unlabeled_ids=list(u.unlabeled_ids),
                test_ids=list(u.test_ids),
            ))
        return MultiUnitDataset(units=units, meta=dict(self.meta))

    def assert_no_leakage(self) -> None:
        """Training row ids must be disjoint from test row ids."""
        for u in self.units:
            train = set(u.labeled_ids) | set(u.unlabeled_ids)
            overlap = train & set(u.test_ids)
            if overlap:
                raise DataError(
                    f"unit {u.unit_id!r}: {len(overlap)} rows appear in both "
                    f"training and test splits")


def write_fleet_csv(path, dataset: MultiUnitDataset) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for u in dataset.units:
            for x, y in zip(u.x_labeled, u.y_labeled):
                writer.writerow([u.unit_id, SPLIT_LABELED,
                                 repr(float(x[0])), repr(float(x[1])), repr(float(y[0]))])
            for x in u.x_unlabeled:
                writer.writerow([u.unit_id, SPLIT_UNLABELED,
                                 repr(float(x[0])), repr(float(x[1])), ""])
            for x, y in zip(u.x_test, u.y_test):
                writer.writerow([u.unit_id, SPLIT_TEST,
                                 repr(float(x[0])), repr(float(x[1])), repr(float(y[0]))])
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    with open(meta_path, "w") as f:
        json.dump(dataset.meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read_fleet_csv(path) -> MultiUnitDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    rows_by_unit: dict[str, dict[str, list]] = {}
    order: list[str] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise DataError(f"unexpected CSV header {header!r} in {path}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} columns")
            unit_id, split, u_s, p_s, q_s = row
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            if unit_id not in rows_by_unit:
                rows_by_unit[unit_id] = {s: [] for s in SPLITS}
                order.append(unit_id)
            try:
                u_val, p_val = float(u_s), float(p_s)
                q_val = float(q_s) if q_s != "" else None
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            if split != SPLIT_UNLABELED and q_val is None:
                raise DataError(f"{path}:{lineno}: missing Q on a {split} row")
            rows_by_unit[unit_id][split].append((lineno, u_val, p_val, q_val))

    meta_path = path.with_suffix(path.suffix + ".meta.json")
    meta = {}
    if meta_path.exists():
        with open(meta_path) as f:
            meta = json.load(f)

    units = []
    for unit_id in order:
        groups = rows_by_unit[unit_id]

        def arrays(split, with_y):
            rows = groups[split]
            ids = [(unit_id, r[0]) for r in rows]
            x = np.asarray([[r[1], r[2]] for r in rows], dtype=np.float64).reshape(-1, 2)
            if not with_y:
                return x, ids
            y = np.asarray([[r[3]] for r in rows], dtype=np.float64).reshape(-1, 1)
            return x, y, ids

        x_l, y_l, ids_l = arrays(SPLIT_LABELED, True)
        x_u, ids_u = arrays(SPLIT_UNLABELED, False)
        x_t, y_t, ids_t = arrays(SPLIT_TEST, True)
        units.append(UnitData(unit_id, x_l, y_l, x_u, x_t, y_t,
                              labeled_ids=ids_l, unlabeled_ids=ids_u, test_ids=ids_t))
    return MultiUnitDataset(units=units, meta=meta)


def subset(dataset: MultiUnitDataset, n_labeled: Optional[int] = None,
           n_unlabeled: Optional[int] = None) -> MultiUnitDataset:
    """Truncate each unit's training splits to the requested sizes.

    Rows are taken in file order, so nested subsets share their prefix and
    ratio sweeps reuse the same underlying draws.
    """
    units = []
    for u in dataset.units:
        nl = u.n_labeled if n_labeled is None else min(n_labeled, u.n_labeled)
        nu = u.n_unlabeled if n_unlabeled is None else min(n_unlabeled, u.n_unlabeled)
        units.append(UnitData(
            unit_id=u.unit_id,
            x_labeled=u.x_labeled[:nl].copy(),
            y_labeled=u.y_labeled[:nl].copy(),
            x_unlabeled=u.x_unlabeled[:nu].copy(),
            x_test=u.x_test.copy(),
            y_test=u.y_test.copy(),
            labeled_ids=list(u.labeled_ids[:nl]),
            unlabeled_ids=list(u.unlabeled_ids[:nu]),
            test_ids=list(u.test_ids),
        ))
    return MultiUnitDataset(units=units, meta=dict(dataset.meta))
