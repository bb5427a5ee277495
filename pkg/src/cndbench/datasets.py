"""Synthetic class-incremental sequences and a CSV import/export path.

Every class is an isotropic unit-variance Gaussian cluster in ``R^d``.  In
the ``same_domain`` regime all cluster centers share one region, so later
stages interleave with earlier ones.  In ``disjoint_domain`` each stage gets
its own far-away region, the desk-scale analogue of a multi-dataset sequence.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np


class Regime(str, Enum):
    SAME_DOMAIN = "same_domain"
    DISJOINT_DOMAIN = "disjoint_domain"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: int
    stage: int
    sample_id: int


@dataclass(frozen=True)
class SequenceSpec:
    num_stages: int = 5
    classes_per_stage: int = 4
    input_dim: int = 16
    train_per_class: int = 100
    val_per_class: int = 25
    test_per_class: int = 50
    regime: Regime = Regime.SAME_DOMAIN
    class_separation: float = 4.0
    seed: int = 0
    ood_per_class: int = 50

    def validate(self) -> None:
        if self.num_stages < 2:
            raise DatasetError("num_stages must be >= 2")
        if self.classes_per_stage < 2:
            raise DatasetError("classes_per_stage must be >= 2")
        counts = (self.input_dim, self.train_per_class, self.val_per_class, self.test_per_class, self.ood_per_class)
        if min(counts) <= 0:
            raise DatasetError("dimensions and per-class counts must be positive")
        if self.class_separation <= 0:
            raise DatasetError("class_separation must be positive")
        if Regime(self.regime) is Regime.DISJOINT_DOMAIN and self.num_stages > 2 * self.input_dim:
            raise DatasetError("disjoint_domain supports at most 2 * input_dim stages")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = Regime(self.regime).value
        return d


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def examples(self, stage: int) -> Iterator[LabeledExample]:
        for x, y, i in zip(self.x, self.y, self.ids):
            yield LabeledExample(x, int(y), stage, int(i))

    @staticmethod
    def concat(parts: list["Split"], dim: int) -> "Split":
        if not parts:
            return Split(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        return Split(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.ids for p in parts]),
        )


@dataclass
class Stage:
    index: int  # 0-based
    class_ids: list
    train: Split
    val: Split
    test: Split


@dataclass
class Sequence:
    stages: list
    ood_calibration: Split
    input_dim: int

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def all_test(self) -> tuple[Split, np.ndarray]:
        """Concatenated test data of every stage with a per-sample stage index."""
        split = Split.concat([s.test for s in self.stages], self.input_dim)
        stage_of = np.concatenate([np.full(len(s.test), s.index) for s in self.stages])
        return split, stage_of

    def validate(self) -> None:
        owners: dict[int, int] = {}
        for s in self.stages:
            for c in s.class_ids:
                if c in owners:
                    raise DatasetError(f"class {c} appears in stages {owners[c]} and {s.index}")
                owners[c] = s.index
            ids = [set(sp.ids.tolist()) for sp in (s.train, s.val, s.test)]
            if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
                raise DatasetError(f"stage {s.index}: splits share sample ids")
            for sp in (s.train, s.val, s.test):
                if not set(np.unique(sp.y).tolist()) <= set(s.class_ids):
                    raise DatasetError(f"stage {s.index}: label outside its class set")
                if not np.isfinite(sp.x).all():
                    raise DatasetError(f"stage {s.index}: non-finite features")
        if set(np.unique(self.ood_calibration.y).tolist()) & set(owners):
            raise DatasetError("OOD calibration classes overlap the sequence")


def _centers(spec: SequenceSpec, rng: np.random.Generator) -> np.ndarray:
    """Cluster centers, shape ``[T, C, d]``.

    Centers of one region are drawn ``N(offset, s^2 I)`` with
    ``s = separation / sqrt(2 d)``, so the typical distance between two
    centers is ``separation`` cluster standard deviations.
    """
    d, t, c = spec.input_dim, spec.num_stages, spec.classes_per_stage
    spread = spec.class_separation / np.sqrt(2 * d)
    raw = rng.normal(0.0, spread, size=(t, c, d))
    if Regime(spec.regime) is Regime.SAME_DOMAIN:
        return raw
    # region offsets along +/- coordinate axes; nearest regions are
    # radius * sqrt(2) apart, i.e. 5x the typical within-region center distance
    radius = 5.0 * spec.class_separation / np.sqrt(2.0)
    offsets = np.zeros((t, d))
    for k in range(t):
        offsets[k, k % d] = radius if k < d else -radius
    return raw + offsets[:, None, :]


def generate_sequence(spec: SequenceSpec) -> Sequence:
    """Pure function of ``spec``: same spec, byte-identical arrays."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0xC0DE])
    centers = _centers(spec, rng)
    d, c = spec.input_dim, spec.classes_per_stage
    counts = (spec.train_per_class, spec.val_per_class, spec.test_per_class)
    next_id = 0
    stages = []
    for k in range(spec.num_stages):
        parts = {"train": [], "val": [], "test": []}
        class_ids = list(range(k * c, (k + 1) * c))
        for j, cls in enumerate(class_ids):
            n = sum(counts)
            x = centers[k, j] + rng.normal(size=(n, d))
            ids = np.arange(next_id, next_id + n)
            next_id += n
            lo = 0
            for name, cnt in zip(parts, counts):
                parts[name].append(Split(x[lo : lo + cnt], np.full(cnt, cls, dtype=np.int64), ids[lo : lo + cnt]))
                lo += cnt
        stages.append(Stage(k, class_ids, *(Split.concat(parts[n], d) for n in ("train", "val", "test"))))

    # held-out calibration clusters: their own seed stream and an offset region
    ood_rng = np.random.default_rng([spec.seed, 0x00D])
    direction = ood_rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    offset = 3.0 * spec.class_separation * direction
    spread = spec.class_separation / np.sqrt(2 * d)
    ood_parts = []
    base = spec.num_stages * c
    for j in range(c):
        center = offset + ood_rng.normal(0.0, spread, size=d)
        x = center + ood_rng.normal(size=(spec.ood_per_class, d))
        ids = np.arange(next_id, next_id + spec.ood_per_class)
        next_id += spec.ood_per_class
        ood_parts.append(Split(x, np.full(spec.ood_per_class, base + j, dtype=np.int64), ids))
    seq = Sequence(stages, Split.concat(ood_parts, d), d)
    seq.validate()
    return seq


# ---------------------------------------------------------------------------
# CSV schema: header ``stage,y,x0,...,x{d-1}`` with an optional trailing
# ``split`` column (train|val|test|ood).  Stages are 0-based; OOD rows carry
# stage -1.  Without a split column rows are split per class by ``ratios``.


def export_csv(seq: Sequence, path) -> None:
    d = seq.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "y", *[f"x{i}" for i in range(d)], "split"])
        for s in seq.stages:
            for name in ("train", "val", "test"):
                sp = getattr(s, name)
                for x, y in zip(sp.x, sp.y):
                    w.writerow([s.index, int(y), *[repr(float(v)) for v in x], name])
        for x, y in zip(seq.ood_calibration.x, seq.ood_calibration.y):
            w.writerow([-1, int(y), *[repr(float(v)) for v in x], "ood"])


def import_dataset(
    path,
    ratios: tuple = (0.6, 0.2, 0.2),
    seed: int = 0,
    fmt: str = "csv",
) -> Sequence:
    """Parse a labelled CSV into a :class:`Sequence`.

    Raises :class:`DatasetError` naming the offending line for malformed rows
    and when a class shows up in more than one stage.
    """
    if fmt != "csv":
        raise DatasetError(f"unsupported format {fmt!r}")
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        has_split = header[-1] == "split"
        feat_cols = header[2:-1] if has_split else header[2:]
        if header[:2] != ["stage", "y"] or feat_cols != [f"x{i}" for i in range(len(feat_cols))] or not feat_cols:
            raise DatasetError(f"{path}:1: bad header {header!r}")
        d = len(feat_cols)
        width = d + 2 + int(has_split)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                stage, y = int(row[0]), int(row[1])
                x = np.array([float(v) for v in row[2 : 2 + d]])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(x).all():
                raise DatasetError(f"{path}:{lineno}: non-finite feature")
            split = row[-1] if has_split else None
            if split is not None and split not in ("train", "val", "test", "ood"):
                raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append((stage, y, x, split, lineno))
    if not rows:
        raise DatasetError(f"{path}: no data rows")

    owner: dict[int, int] = {}
    for stage, y, _, split, lineno in rows:
        if split == "ood":
            continue
        if stage < 0:
            raise DatasetError(f"{path}:{lineno}: negative stage for a non-OOD row")
        if owner.setdefault(y, stage) != stage:
            raise DatasetError(f"{path}:{lineno}: class {y} appears in stages {owner[y]} and {stage}")

    rng = np.random.default_rng(seed)
    stage_ids = sorted(set(owner.values()))
    if stage_ids != list(range(len(stage_ids))):
        raise DatasetError(f"{path}: stages must be numbered 0..T-1, got {stage_ids}")
    next_id = 0
    buckets: dict[tuple, list] = {}
    ood = []
    for stage, y, x, split, _ in rows:
        if split == "ood":
            ood.append((x, y, next_id))
        else:
            buckets.setdefault((stage, y), []).append((x, split, next_id))
        next_id += 1

    def mk(items) -> Split:
        if not items:
            return Split(np.zeros((0, d)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        return Split(np.array([i[0] for i in items]), np.array([i[1] for i in items], dtype=np.int64),
                     np.array([i[2] for i in items], dtype=np.int64))

    stages = []
    for k in stage_ids:
        classes = sorted(c for c, s in owner.items() if s == k)
        parts = {"train": [], "val": [], "test": []}
        for c in classes:
            items = buckets[(k, c)]
            if has_split:
                for x, split, i in items:
                    parts[split].append((x, c, i))
            else:
                order = rng.permutation(len(items))
                n_tr = int(round(ratios[0] * len(items)))
                n_va = int(round(ratios[1] * len(items)))
                for pos, j in enumerate(order):
                    x, _, i = items[j]
                    name = "train" if pos < n_tr else "val" if pos < n_tr + n_va else "test"
                    parts[name].append((x, c, i))
        stages.append(Stage(k, classes, mk(parts["train"]), mk(parts["val"]), mk(parts["test"])))
    seq = Sequence(stages, mk([(x, y, i) for x, y, i in ood]), d)
    seq.validate()
    return seq

