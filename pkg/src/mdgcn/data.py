"""Paired functional/structural brain networks: validation, file I/O,
synthetic cohorts with a planted group effect, and fold splitting.

File layout
-----------
A manifest is a JSON object::

    {"atlas": {"n_regions": M, "region_names": [...]},
     "subjects": [{"id": "...", "label": 0, "functional": "f.csv",
                   "structural": "s.csv"}, ...]}

Matrix paths are resolved relative to the manifest. Each matrix file is a
header-less CSV of exactly M lines with M floats each.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

MODALITIES = ("functional", "structural")
SYMMETRY_TOL = 1e-9
INGEST_ASYMMETRY_TOL = 1e-6
_ATOL = 1e-9


class NotSPDWarning(UserWarning):
    """A connectivity matrix has a negative eigenvalue."""


@dataclass
class BrainNetwork:
    modality: str
    matrix: np.ndarray
    region_names: list[str]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)

    @property
    def n_regions(self) -> int:
        return self.matrix.shape[0]

    def validate(self, subject: str = "?") -> None:
        """Raise :class:`ValidationError` if a modality invariant is broken."""
        X = self.matrix
        where = f"subject {subject} ({self.modality})"
        if self.modality not in MODALITIES:
            raise ValidationError(f"{where}: unknown modality")
        if X.ndim != 2 or X.shape[0] != X.shape[1]:
            raise ValidationError(f"{where}: matrix is not square, shape {X.shape}")
        if len(self.region_names) != X.shape[0]:
            raise ValidationError(
                f"{where}: {len(self.region_names)} region names for {X.shape[0]} regions")
        if not np.all(np.isfinite(X)):
            raise ValidationError(f"{where}: non-finite entries")
        asym = np.abs(X - X.T).max()
        if asym > SYMMETRY_TOL:
            raise ValidationError(f"{where}: asymmetric by {asym:.3g}")
        diag = np.diag(X)
        if self.modality == "functional":
            if X.min() < -1.0 - _ATOL or X.max() > 1.0 + _ATOL:
                raise ValidationError(
                    f"{where}: range violation, entries must lie in [-1, 1] "
                    f"(found [{X.min():.6g}, {X.max():.6g}])")
            if np.abs(diag - 1.0).max() > _ATOL:
                raise ValidationError(f"{where}: diagonal must be 1")
        else:
            if X.min() < -_ATOL:
                raise ValidationError(
                    f"{where}: range violation, streamline counts must be >= 0 "
                    f"(found {X.min():.6g})")
            if np.abs(diag).max() > _ATOL:
                raise ValidationError(f"{where}: diagonal must be 0")


@dataclass
class MultiModalSample:
    subject_id: str
    functional: BrainNetwork
    structural: BrainNetwork
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"subject {self.subject_id}: label must be 0 or 1")
        if self.functional.n_regions != self.structural.n_regions or \
                list(self.functional.region_names) != list(self.structural.region_names):
            raise ValidationError(
                f"subject {self.subject_id}: modalities disagree on regions")

    @property
    def n_regions(self) -> int:
        return self.functional.n_regions


@dataclass
class Dataset:
    samples: list[MultiModalSample]
    region_names: list[str]

    def __post_init__(self):
        M = len(self.region_names)
        for s in self.samples:
            if s.n_regions != M:
                raise ValidationError(
                    f"subject {s.subject_id}: {s.n_regions} regions, atlas has {M}")

    def __len__(self):
        return len(self.samples)

    @property
    def n_regions(self) -> int:
        return len(self.region_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.samples]

    def functional(self) -> np.ndarray:
        return np.stack([s.functional.matrix for s in self.samples])

    def structural(self) -> np.ndarray:
        return np.stack([s.structural.matrix for s in self.samples])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], list(self.region_names))

    def require_both_labels(self) -> None:
        if len(set(self.labels.tolist())) < 2:
            raise ValidationError("dataset needs subjects from both groups")


def _warn_if_not_spd(net: BrainNetwork, subject: str) -> None:
    lam = np.linalg.eigvalsh(net.matrix).min()
    if lam < 0:
        warnings.warn(
            f"subject {subject} ({net.modality}): not positive semi-definite "
            f"(smallest eigenvalue {lam:.3g})", NotSPDWarning, stacklevel=3)


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def read_matrix_csv(path, n_regions: int, subject: str = "?") -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"subject {subject}: missing matrix file {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != n_regions:
        raise ValidationError(
            f"subject {subject}: {path.name} has {len(lines)} rows, atlas has {n_regions}")
    rows = []
    for i, ln in enumerate(lines):
        cells = ln.split(",")
        if len(cells) != n_regions:
            raise ValidationError(
                f"subject {subject}: {path.name} row {i} has {len(cells)} values, "
                f"atlas has {n_regions}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ValidationError(f"subject {subject}: {path.name} row {i}: {exc}") from None
    return np.array(rows, dtype=np.float64)


def write_matrix_csv(path, X: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in np.asarray(X, dtype=np.float64):
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def _ingest(X: np.ndarray, subject: str, modality: str) -> np.ndarray:
    asym = np.abs(X - X.T).max() if X.size else 0.0
    if asym > INGEST_ASYMMETRY_TOL:
        raise ValidationError(
            f"subject {subject} ({modality}): asymmetric by {asym:.3g} "
            f"(tolerance {INGEST_ASYMMETRY_TOL:g})")
    if asym > 0:
        X = (X + X.T) / 2.0
    return X


def load_dataset(manifest_path) -> Dataset:
    """Read and validate a manifest and every matrix it references.

    Matrices whose asymmetry is at most 1e-6 are replaced by ``(X + X^T)/2``;
    anything larger is rejected.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest is not valid JSON: {exc}") from None
    try:
        atlas = doc["atlas"]
        M = int(atlas["n_regions"])
        names = [str(n) for n in atlas.get("region_names") or
                 [f"R{i:03d}" for i in range(M)]]
        entries = doc["subjects"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"manifest missing field {exc}") from None
    if len(names) != M:
        raise ValidationError(f"atlas lists {len(names)} region names for {M} regions")

    base = manifest_path.parent
    samples = []
    seen = set()
    for entry in entries:
        try:
            sid = str(entry["id"])
            label = entry["label"]
            paths = {m: base / entry[m] for m in MODALITIES}
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"subject entry missing field {exc}") from None
        if sid in seen:
            raise ValidationError(f"duplicate subject id {sid}")
        seen.add(sid)
        if label not in (0, 1) or isinstance(label, bool):
            raise ValidationError(f"subject {sid}: label must be 0 or 1, got {label!r}")
        nets = {}
        for m in MODALITIES:
            X = _ingest(read_matrix_csv(paths[m], M, sid), sid, m)
            net = BrainNetwork(m, X, list(names))
            net.validate(sid)
            _warn_if_not_spd(net, sid)
            nets[m] = net
        samples.append(MultiModalSample(sid, nets["functional"], nets["structural"], int(label)))
    return Dataset(samples, list(names))


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write matrices and a manifest under `out_dir`; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for s in dataset.samples:
        rel = {m: f"{m}/{s.subject_id}.csv" for m in MODALITIES}
        write_matrix_csv(out_dir / rel["functional"], s.functional.matrix)
        write_matrix_csv(out_dir / rel["structural"], s.structural.matrix)
        subjects.append({"id": s.subject_id, "label": s.label, **rel})
    manifest = {"atlas": {"n_regions": dataset.n_regions,
                          "region_names": list(dataset.region_names)},
                "subjects": subjects}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# --------------------------------------------------------------------------
# connectivity and synthetic cohorts
# --------------------------------------------------------------------------

def pearson_connectivity(timeseries) -> np.ndarray:
    """Region-by-region Pearson correlation of a ``(T, M)`` time-series array."""
    X = np.asarray(timeseries, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError(f"need a (T, M) array with T >= 2, got shape {X.shape}")
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc * Xc).sum(axis=0))
    flat = np.flatnonzero(norms == 0)
    if flat.size:
        raise ValidationError(f"region {int(flat[0])} has zero variance")
    R = (Xc.T @ Xc) / np.outer(norms, norms)
    R = (R + R.T) / 2.0
    np.clip(R, -1.0, 1.0, out=R)
    np.fill_diagonal(R, 1.0)
    return R


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic two-group cohort.

    Patients get ``effect_strength`` added to the time-series covariance among
    `effect_regions` and a ``(1 + effect_strength)`` multiplier on the
    streamline rate between those regions.
    """

    n_regions: int = 32
    n_per_group: int = 40
    n_timepoints: int = 200
    effect_regions: tuple[int, ...] = (0, 1, 2, 3)
    effect_strength: float = 2.0
    count_rate: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "effect_regions",
                           tuple(int(i) for i in self.effect_regions))
        problems = []
        if self.n_regions < 2:
            problems.append("n_regions must be >= 2")
        if self.n_per_group < 2:
            problems.append("n_per_group must be >= 2")
        if self.n_timepoints < self.n_regions + 1:
            problems.append("n_timepoints must be >= n_regions + 1")
        if any(not 0 <= i < self.n_regions for i in self.effect_regions):
            problems.append("effect_regions must lie in [0, n_regions)")
        if self.effect_strength < 0:
            problems.append("effect_strength must be >= 0")
        if not self.count_rate > 0:
            problems.append("count_rate must be > 0")
        if problems:
            raise ValidationError("invalid synthetic config: " + "; ".join(problems))


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Balanced synthetic cohort, fully determined by ``cfg.seed``.

    Controls come first (label 0), then patients (label 1).
    """
    M = cfg.n_regions
    names = [f"R{i:03d}" for i in range(M)]
    block = np.zeros((M, M), dtype=bool)
    idx = np.array(cfg.effect_regions, dtype=int)
    block[np.ix_(idx, idx)] = True
    rng = np.random.default_rng(cfg.seed)
    iu = np.triu_indices(M, 1)

    chol = {}
    for label in (0, 1):
        cov = np.eye(M)
        if label:
            cov[block] += cfg.effect_strength
        chol[label] = np.linalg.cholesky(cov)

    samples = []
    for label in (0, 1):
        rate = cfg.count_rate * (1.0 + cfg.effect_strength * block * label)
        for i in range(cfg.n_per_group):
            sid = f"sub-{label * cfg.n_per_group + i:03d}"
            series = rng.standard_normal((cfg.n_timepoints, M)) @ chol[label].T
            func = pearson_connectivity(series)
            counts = np.zeros((M, M))
            counts[iu] = rng.poisson(rate[iu])
            counts = counts + counts.T
            samples.append(MultiModalSample(
                sid, BrainNetwork("functional", func, list(names)),
                BrainNetwork("structural", counts, list(names)), label))
    return Dataset(samples, names)


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------

def stratified_kfold(labels, k: int, seed: int, stratified: bool = True
                     ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split indices into `k` (train, test) pairs whose test sets partition them.

    With ``stratified=True`` each class is shuffled and dealt round-robin over
    the folds, continuing where the previous class stopped, so every test set
    matches the global class ratio to within one subject. With
    ``stratified=False`` a single shuffled index list is cut into `k` parts.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    if stratified:
        classes, counts = np.unique(labels, return_counts=True)
        small = classes[counts < k]
        if small.size:
            raise ValidationError(
                f"class {int(small[0])} has {int(counts[counts < k][0])} members, "
                f"fewer than k={k}")
        offset = 0
        for c in classes:
            members = rng.permutation(np.flatnonzero(labels == c))
            fold_of[members] = (offset + np.arange(len(members))) % k
            offset = (offset + len(members)) % k
    else:
        if n < k:
            raise ValidationError(f"{n} samples cannot fill {k} folds")
        for f, part in enumerate(np.array_split(rng.permutation(n), k)):
            fold_of[part] = f
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, test))
    return folds
