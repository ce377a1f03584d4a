"""Synthetic multi-domain classification data and its CSV persistence.

Three shift families are available:

``mean_shift``
    Shared class prototypes; every domain adds its own offset vector.
``rotation``
    Domain ``j`` rotates the prototypes by ``j * shift_magnitude`` radians in
    the first two coordinates.
``context_coupled``
    The label depends on where a sample sits *relative to its domain mean*
    along a fixed direction ``w``. Domain means are spread along ``w`` by
    ``shift_magnitude`` per domain, so no single fixed rule works across
    domains while a rule that knows the domain mean is nearly perfect.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError, SpecError, SplitError

FORMAT_VERSION = 1
GENERATOR_NAME = f"numpy.random.Generator(PCG64) numpy=={np.__version__}"
SHIFT_MODES = ("mean_shift", "rotation", "context_coupled")

# half-width of the label-free gap around each class boundary, in units of
# the projection onto w (context_coupled only)
CLASS_MARGIN = 1.0


@dataclass
class DomainDataset:
    domain_id: int
    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise FormatError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise FormatError("labels and feature rows disagree in length")
        if not self.name:
            self.name = f"domain{self.domain_id}"

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, index) -> "DomainDataset":
        return DomainDataset(self.domain_id, self.features[index], self.labels[index], self.name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (
            self.domain_id == other.domain_id
            and self.name == other.name
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class SyntheticSpec:
    num_domains: int = 4
    classes: int = 2
    feature_dim: int = 4
    samples_per_domain: int = 400
    shift_mode: str = "context_coupled"
    shift_magnitude: float = 10.0
    noise_std: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_domains < 2:
            raise SpecError("num_domains must be >= 2")
        if self.classes < 2:
            raise SpecError("classes must be >= 2")
        if self.feature_dim < 2:
            raise SpecError("feature_dim must be >= 2")
        if self.samples_per_domain < self.classes:
            raise SpecError("samples_per_domain must be >= classes so every class appears")
        if self.shift_mode not in SHIFT_MODES:
            raise SpecError(f"unknown shift_mode {self.shift_mode!r}; expected one of {SHIFT_MODES}")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise SpecError("noise_std must be finite and >= 0")
        if not (self.shift_magnitude >= 0 and math.isfinite(self.shift_magnitude)):
            raise SpecError("shift_magnitude must be finite and >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError("seed must fit in an unsigned 64-bit integer")


def _balanced_labels(rng: np.random.Generator, n: int, classes: int) -> np.ndarray:
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _domain_shifts(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Projection of each domain mean onto w: evenly spaced, randomly assigned."""
    offsets = (np.arange(spec.num_domains) - (spec.num_domains - 1) / 2.0) * spec.shift_magnitude
    return offsets[rng.permutation(spec.num_domains)]


def _class_projection(rng: np.random.Generator, labels: np.ndarray, classes: int, noise: float) -> np.ndarray:
    """Position along w relative to the domain mean, banded by class.

    Class boundaries sit at multiples of ``band`` centred on zero (a single
    boundary at 0 when there are two classes), and every sample keeps at
    least CLASS_MARGIN away from the boundaries that enclose it.
    """
    band = 2.0 * (CLASS_MARGIN + 2.0 * noise) + 1.0
    bounds = (np.arange(1, classes) - classes / 2.0) * band
    tail = CLASS_MARGIN + np.abs(rng.standard_normal(labels.size)) * noise
    inner = rng.uniform(CLASS_MARGIN, band - CLASS_MARGIN, labels.size)
    t = np.empty(labels.size)
    low, high = labels == 0, labels == classes - 1
    t[low] = bounds[0] - tail[low]
    t[high] = bounds[-1] + tail[high]
    mid = ~(low | high)
    t[mid] = bounds[labels[mid] - 1] + inner[mid]
    return t


def generate(spec: SyntheticSpec) -> list[DomainDataset]:
    """Build ``spec.num_domains`` datasets; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    d, k, f, n = spec.num_domains, spec.classes, spec.feature_dim, spec.samples_per_domain
    out = []
    if spec.shift_mode == "context_coupled":
        w = _unit(rng, f)
        shifts = _domain_shifts(spec, rng)
        for j in range(d):
            labels = _balanced_labels(rng, n, k)
            noise = rng.standard_normal((n, f)) * spec.noise_std
            noise -= np.outer(noise @ w, w)
            t = _class_projection(rng, labels, k, spec.noise_std)
            x = np.outer(t + shifts[j], w) + noise
            out.append(DomainDataset(j, x, labels, f"domain{j}"))
        return out

    prototypes = rng.standard_normal((k, f)) * 2.0
    for j in range(d):
        labels = _balanced_labels(rng, n, k)
        noise = rng.standard_normal((n, f)) * spec.noise_std
        if spec.shift_mode == "mean_shift":
            offset = _unit(rng, f) * spec.shift_magnitude
            centres = prototypes + offset
        else:
            angle = j * spec.shift_magnitude
            c, s = math.cos(angle), math.sin(angle)
            centres = prototypes.copy()
            centres[:, 0] = c * prototypes[:, 0] - s * prototypes[:, 1]
            centres[:, 1] = s * prototypes[:, 0] + c * prototypes[:, 1]
        out.append(DomainDataset(j, centres[labels] + noise, labels, f"domain{j}"))
    return out


def context_direction(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """The label direction ``w`` and per-domain mean projections of a context_coupled spec."""
    if spec.shift_mode != "context_coupled":
        raise SpecError("context_direction only applies to context_coupled specs")
    rng = np.random.default_rng(int(spec.seed))
    w = _unit(rng, spec.feature_dim)
    return w, _domain_shifts(spec, rng)


def split_holdout(dataset: DomainDataset, fraction: float, seed) -> tuple[DomainDataset, DomainDataset]:
    """Shuffled train/validation split with ``fraction * N`` (rounded half up, >= 1) validation rows."""
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    if n < 2:
        raise SplitError(f"cannot split a dataset with {n} sample(s)")
    # round half up, so 0.5 of 5 rows gives 3 validation rows
    n_val = min(max(math.floor(fraction * n + 0.5), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def pool(datasets: list[DomainDataset]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack several domains: (features, labels, domain ids)."""
    feats = np.concatenate([ds.features for ds in datasets], axis=0)
    labels = np.concatenate([ds.labels for ds in datasets])
    domains = np.concatenate([np.full(len(ds), ds.domain_id, dtype=np.int64) for ds in datasets])
    return feats, labels, domains


def save_csv(datasets: list[DomainDataset], path, spec: SyntheticSpec | None = None, classes: int | None = None) -> None:
    """Write ``domain,label,f0..`` rows plus a ``.meta.json`` sidecar.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    if not datasets:
        raise FormatError("nothing to save")
    dims = {ds.feature_dim for ds in datasets}
    if len(dims) != 1:
        raise FormatError(f"inconsistent feature dimensions {sorted(dims)}")
    (dim,) = dims
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain", "label"] + [f"f{i}" for i in range(dim)])
        for ds in datasets:
            for row, label in zip(ds.features, ds.labels):
                writer.writerow([ds.domain_id, int(label)] + [repr(float(v)) for v in row])
    if classes is None:
        classes = spec.classes if spec is not None else int(max(ds.labels.max() for ds in datasets)) + 1
    meta = {
        "format_version": FORMAT_VERSION,
        "generator": GENERATOR_NAME,
        "classes": int(classes),
        "feature_dim": dim,
        "domains": {str(ds.domain_id): ds.name for ds in datasets},
        "spec": asdict(spec) if spec is not None else None,
        "seed": int(spec.seed) if spec is not None else None,
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def load_csv(path, classes: int | None = None) -> list[DomainDataset]:
    """Read a dataset file written by :func:`save_csv`.

    The class count comes from ``classes``, else from the sidecar, else it is
    inferred from the labels present.
    """
    path = Path(path)
    meta_file = _meta_path(path)
    names: dict[int, str] = {}
    if meta_file.exists():
        try:
            meta = json.loads(meta_file.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"corrupt metadata sidecar {meta_file}: {exc}") from None
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported dataset format version {meta.get('format_version')!r}")
        if classes is None:
            classes = meta.get("classes")
        names = {int(k): v for k, v in meta.get("domains", {}).items()}

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise FormatError(f"{path}: missing header")
        dim = len(header) - 2
        if header[:2] != ["domain", "label"] or dim < 1 or header[2:] != [f"f{i}" for i in range(dim)]:
            raise FormatError(f"{path}: bad header {header!r}")
        rows: dict[int, tuple[list, list]] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise FormatError(f"line {line_no}: expected {dim + 2} fields, got {len(row)}")
            try:
                domain, label = int(row[0]), int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
            if domain < 0:
                raise ParseError(f"negative domain id {domain}", line=line_no)
            if label < 0 or (classes is not None and label >= classes):
                raise ParseError(f"label {label} outside [0, {classes})", line=line_no)
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite feature value", line=line_no)
            feats, labels = rows.setdefault(domain, ([], []))
            feats.append(values)
            labels.append(label)
    if not rows:
        raise FormatError(f"{path}: no samples")
    return [
        DomainDataset(d, np.array(rows[d][0]), np.array(rows[d][1], dtype=np.int64), names.get(d, ""))
        for d in sorted(rows)
    ]
