"""Synthetic domain-shift benchmarks and the few-shot split protocol.

A domain pair is K Gaussian blobs with means on a circle (source) and the
same blobs pushed through an affine shift (target).  The target pool is
split into a few labeled anchors per class, a small labeled validation
set, and an unlabeled remainder whose ground-truth labels are quarantined
in a parallel array that only evaluation code should touch.

On disk a split is a directory: ``manifest.json`` plus ``source.csv``,
``labeled_target.csv``, ``unlabeled_target.csv`` (label column fixed to
the -1 sentinel), ``validation_target.csv``, and ``unlabeled_truth.csv``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coremath import seeded_rng

SPLIT_FORMAT_VERSION = 1


class DataError(Exception):
    """Raised for malformed, missing, or tampered split files."""


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int


@dataclass(frozen=True)
class UnlabeledSample:
    """Training-facing view of a target sample: features only, no label field."""

    x: np.ndarray


@dataclass(frozen=True)
class ShiftSpec:
    """Affine domain shift: x' = scale * R(rotation) x + translation + skew(y).

    Rotation acts on the first two coordinates.  ``label_skew`` adds a
    class-conditional offset of ``label_skew * y`` along the first axis,
    so the shift can depend on the (hidden) label.
    """

    rotation_degrees: float = 0.0
    translation: tuple[float, ...] = ()
    scale: float = 1.0
    label_skew: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_degrees == 0.0
            and all(t == 0.0 for t in self.translation)
            and self.scale == 1.0
            and self.label_skew == 0.0
        )


@dataclass(frozen=True)
class DomainPairSpec:
    """Recipe for one source/target benchmark pair."""

    n_classes: int = 5
    input_dim: int = 2
    n_source: int = 500
    n_target: int = 500
    class_separation: float = 4.0
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.n_classes < 2:
            problems.append(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_dim < 1:
            problems.append(f"input_dim must be >= 1, got {self.input_dim}")
        if self.n_source < self.n_classes:
            problems.append(f"n_source {self.n_source} < n_classes {self.n_classes}")
        if self.n_target < self.n_classes:
            problems.append(f"n_target {self.n_target} < n_classes {self.n_classes}")
        if self.class_separation <= 0:
            problems.append(f"class_separation must be positive, got {self.class_separation}")
        if self.shift.rotation_degrees != 0.0 and self.input_dim < 2:
            problems.append("rotation requires input_dim >= 2")
        if self.shift.scale <= 0:
            problems.append(f"shift scale must be positive, got {self.shift.scale}")
        if self.shift.translation and len(self.shift.translation) != self.input_dim:
            problems.append(
                f"translation has {len(self.shift.translation)} entries, input_dim is {self.input_dim}"
            )
        if problems:
            raise ValueError("invalid domain spec: " + "; ".join(problems))


def class_means(spec: DomainPairSpec) -> np.ndarray:
    """Blob means: evenly spaced on a circle of radius class_separation in dims (0, 1)."""
    means = np.zeros((spec.n_classes, spec.input_dim))
    angles = 2.0 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    means[:, 0] = spec.class_separation * np.cos(angles)
    if spec.input_dim >= 2:
        means[:, 1] = spec.class_separation * np.sin(angles)
    return means


def apply_shift(x: np.ndarray, y: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    """Push points through the target-domain transform (rows of x, labels y)."""
    out = x.copy()
    if shift.rotation_degrees != 0.0:
        theta = np.deg2rad(shift.rotation_degrees)
        c, s = np.cos(theta), np.sin(theta)
        rotated = out[:, :2] @ np.array([[c, s], [-s, c]])  # row-vector convention
        out[:, :2] = rotated
    out *= shift.scale
    if shift.translation:
        out += np.asarray(shift.translation, dtype=np.float64)
    if shift.label_skew != 0.0:
        out[:, 0] += shift.label_skew * y
    return out


def _per_class_counts(total: int, k: int) -> list[int]:
    base, extra = divmod(total, k)
    return [base + (1 if c < extra else 0) for c in range(k)]


def gen_domain_pair(spec: DomainPairSpec) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Draw the source and target pools (both with ground-truth labels)."""
    spec.validate()
    means = class_means(spec)
    pools = []
    for domain, total in (("source", spec.n_source), ("target", spec.n_target)):
        rng = seeded_rng(spec.seed, "data", domain)
        xs, ys = [], []
        for c, count in enumerate(_per_class_counts(total, spec.n_classes)):
            xs.append(means[c] + rng.standard_normal((count, spec.input_dim)))
            ys.append(np.full(count, c, dtype=int))
        x = np.vstack(xs)
        y = np.concatenate(ys)
        if domain == "target":
            x = apply_shift(x, y, spec.shift)
        pools.append([LabeledSample(x=x[i], y=int(y[i])) for i in range(len(y))])
    return pools[0], pools[1]


def split_target(
    target_pool: list[LabeledSample],
    n_t_per_class: int,
    n_val_per_class: int,
    seed: int,
) -> tuple[list[LabeledSample], list[LabeledSample], list[UnlabeledSample], np.ndarray]:
    """Stratified draw of (labeled_target, validation_target, unlabeled, hidden truth).

    Labels of the unlabeled remainder are returned as a separate array so
    training code paths that consume UnlabeledSample never see them.
    """
    labels = np.array([s.y for s in target_pool])
    classes = sorted(set(int(c) for c in labels))
    rng = seeded_rng(seed, "split")
    labeled_idx, val_idx, rest_idx = [], [], []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if len(members) < n_t_per_class + n_val_per_class + 1:
            raise ValueError(
                f"insufficient samples for class {c}: "
                f"need {n_t_per_class + n_val_per_class + 1}, have {len(members)}"
            )
        order = rng.permutation(members)
        labeled_idx.extend(order[:n_t_per_class])
        val_idx.extend(order[n_t_per_class : n_t_per_class + n_val_per_class])
        rest_idx.extend(order[n_t_per_class + n_val_per_class :])
    rest_idx = sorted(rest_idx)
    labeled = [target_pool[i] for i in sorted(labeled_idx)]
    validation = [target_pool[i] for i in sorted(val_idx)]
    unlabeled = [UnlabeledSample(x=target_pool[i].x) for i in rest_idx]
    truth = np.array([target_pool[i].y for i in rest_idx], dtype=int)
    return labeled, validation, unlabeled, truth


@dataclass
class SSDASplit:
    """One benchmark instance: source pool plus the three target subsets.

    ``unlabeled_truth[i]`` is the hidden label of ``unlabeled_target[i]``;
    it exists for evaluation and reliability reporting only.
    """

    spec: DomainPairSpec
    source: list[LabeledSample]
    labeled_target: list[LabeledSample]
    unlabeled_target: list[UnlabeledSample]
    validation_target: list[LabeledSample]
    unlabeled_truth: np.ndarray
    n_t_per_class: int
    n_val_per_class: int

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def labeled_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Source plus labeled target, the supervised training pool."""
        samples = self.source + self.labeled_target
        return np.array([s.x for s in samples]), np.array([s.y for s in samples], dtype=int)

    def unlabeled_x(self) -> np.ndarray:
        return np.array([s.x for s in self.unlabeled_target])

    def validation_xy(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.array([s.x for s in self.validation_target]),
            np.array([s.y for s in self.validation_target], dtype=int),
        )

    def labeled_target_by_class(self) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        for c in range(self.n_classes):
            rows = [s.x for s in self.labeled_target if s.y == c]
            out[c] = np.array(rows)
        return out


def gen_split(spec: DomainPairSpec, n_t_per_class: int = 3, n_val_per_class: int = 3) -> SSDASplit:
    """Generate a domain pair and apply the split protocol, all from spec.seed."""
    source, target_pool = gen_domain_pair(spec)
    labeled, validation, unlabeled, truth = split_target(target_pool, n_t_per_class, n_val_per_class, spec.seed)
    return SSDASplit(
        spec=spec,
        source=source,
        labeled_target=labeled,
        unlabeled_target=unlabeled,
        validation_target=validation,
        unlabeled_truth=truth,
        n_t_per_class=n_t_per_class,
        n_val_per_class=n_val_per_class,
    )


# -- serialization --


def _csv_lines(x: np.ndarray, y: np.ndarray) -> str:
    dim = x.shape[1]
    header = ",".join([f"x{i}" for i in range(dim)] + ["y"])
    lines = [header]
    for row, label in zip(x, y):
        lines.append(",".join([repr(float(v)) for v in row] + [str(int(label))]))
    return "\n".join(lines) + "\n"


def _parse_samples_csv(text: str, path: str) -> tuple[np.ndarray, np.ndarray]:
    lines = text.strip().split("\n")
    if not lines or not lines[0].startswith("x0"):
        raise DataError(f"malformed table {path}: missing header")
    rows, labels = [], []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append([float(v) for v in cells[:-1]])
        labels.append(int(cells[-1]))
    return np.array(rows), np.array(labels, dtype=int)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_split(split: SSDASplit, out_dir: str | Path) -> Path:
    """Write the split directory; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    tables = {
        "source.csv": _csv_lines(*_xy(split.source)),
        "labeled_target.csv": _csv_lines(*_xy(split.labeled_target)),
        "validation_target.csv": _csv_lines(*_xy(split.validation_target)),
        "unlabeled_target.csv": _csv_lines(
            split.unlabeled_x(), np.full(len(split.unlabeled_target), -1, dtype=int)
        ),
        "unlabeled_truth.csv": "index,y\n"
        + "".join(f"{i},{int(y)}\n" for i, y in enumerate(split.unlabeled_truth)),
    }
    checksums = {}
    for name, text in tables.items():
        data = text.encode("utf-8")
        (out / name).write_bytes(data)
        checksums[name] = _sha256(data)

    manifest = {
        "format_version": SPLIT_FORMAT_VERSION,
        "spec": asdict(split.spec),
        "n_t_per_class": split.n_t_per_class,
        "n_val_per_class": split.n_val_per_class,
        "counts": {
            "source": len(split.source),
            "labeled_target": len(split.labeled_target),
            "unlabeled_target": len(split.unlabeled_target),
            "validation_target": len(split.validation_target),
        },
        "checksums": checksums,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def _xy(samples: list[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.array([s.x for s in samples]), np.array([s.y for s in samples], dtype=int)


def split_checksum(split_dir: str | Path) -> str:
    """Digest of the manifest, to stamp experiment outputs with their input data."""
    return _sha256((Path(split_dir) / "manifest.json").read_bytes())


def load_split(split_dir: str | Path) -> SSDASplit:
    """Load and verify a split directory; any tampering fails the checksum."""
    root = Path(split_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != SPLIT_FORMAT_VERSION:
        raise DataError(f"split format version {manifest.get('format_version')} != {SPLIT_FORMAT_VERSION}")

    texts = {}
    for name, expected in manifest["checksums"].items():
        path = root / name
        if not path.exists():
            raise DataError(f"missing table: {path}")
        data = path.read_bytes()
        if _sha256(data) != expected:
            raise DataError(f"checksum mismatch for {name}")
        texts[name] = data.decode("utf-8")

    spec_dict = dict(manifest["spec"])
    shift = ShiftSpec(
        rotation_degrees=spec_dict["shift"]["rotation_degrees"],
        translation=tuple(spec_dict["shift"]["translation"]),
        scale=spec_dict["shift"]["scale"],
        label_skew=spec_dict["shift"]["label_skew"],
    )
    spec = DomainPairSpec(
        n_classes=spec_dict["n_classes"],
        input_dim=spec_dict["input_dim"],
        n_source=spec_dict["n_source"],
        n_target=spec_dict["n_target"],
        class_separation=spec_dict["class_separation"],
        shift=shift,
        seed=spec_dict["seed"],
    )

    src_x, src_y = _parse_samples_csv(texts["source.csv"], "source.csv")
    lab_x, lab_y = _parse_samples_csv(texts["labeled_target.csv"], "labeled_target.csv")
    val_x, val_y = _parse_samples_csv(texts["validation_target.csv"], "validation_target.csv")
    unl_x, unl_y = _parse_samples_csv(texts["unlabeled_target.csv"], "unlabeled_target.csv")
    if np.any(unl_y != -1):
        raise DataError("unlabeled_target.csv must carry the -1 label sentinel")
    truth_lines = texts["unlabeled_truth.csv"].strip().split("\n")[1:]
    truth = np.array([int(line.split(",")[1]) for line in truth_lines], dtype=int)
    if len(truth) != len(unl_x):
        raise DataError("unlabeled_truth.csv row count does not match unlabeled_target.csv")

    return SSDASplit(
        spec=spec,
        source=[LabeledSample(x=src_x[i], y=int(src_y[i])) for i in range(len(src_y))],
        labeled_target=[LabeledSample(x=lab_x[i], y=int(lab_y[i])) for i in range(len(lab_y))],
        unlabeled_target=[UnlabeledSample(x=unl_x[i]) for i in range(len(unl_x))],
        validation_target=[LabeledSample(x=val_x[i], y=int(val_y[i])) for i in range(len(val_y))],
        unlabeled_truth=truth,
        n_t_per_class=manifest["n_t_per_class"],
        n_val_per_class=manifest["n_val_per_class"],
    )


def default_benchmark_spec(seed: int = 0) -> DomainPairSpec:
    """The synth-shift benchmark: 5 classes in 2-D, 30 degree rotation plus (1,1) shift."""
    return DomainPairSpec(
        n_classes=5,
        input_dim=2,
        n_source=500,
        n_target=500,
        class_separation=4.0,
        shift=ShiftSpec(rotation_degrees=30.0, translation=(1.0, 1.0)),
        seed=seed,
    )
