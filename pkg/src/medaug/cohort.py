"""Synthetic CheXpert-like cohorts and CheXpert-format CSV ingestion.

Each image is built from three ingredients: a study-level disease pattern
(one localized blob per positive label dimension), a patient-level nuisance
field shared by all of the patient's images, and a view transform that maps
frontal anatomy to a lateral view. Per-image acquisition variation and pixel
noise are added on top.
"""

from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from medaug.errors import ConfigError, IngestError

CHEXPERT_TASKS = (
    "Pleural Effusion",
    "Cardiomegaly",
    "Edema",
    "Consolidation",
    "Atelectasis",
    "Pneumothorax",
    "Lung Opacity",
    "Lung Lesion",
    "Pneumonia",
    "Fracture",
    "Support Devices",
    "Enlarged Cardiomediastinum",
    "Pleural Other",
    "No Finding",
)

# Non-label columns in the public CheXpert CSVs.
METADATA_COLUMNS = ("Path", "Sex", "Age", "Frontal/Lateral", "AP/PA")

_PATIENT_RE = re.compile(r"patient(\d+)")
_STUDY_RE = re.compile(r"study(\d+)")


class Laterality(str, enum.Enum):
    FRONTAL = "Frontal"
    LATERAL = "Lateral"

    @classmethod
    def parse(cls, token: str) -> "Laterality":
        for member in cls:
            if token.strip().lower() == member.value.lower():
                return member
        raise ValueError(f"unknown laterality token {token!r}")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: int
    patient_id: int
    study_id: int
    laterality: Laterality
    labels: np.ndarray
    pixels: np.ndarray | None = None

    def same_as(self, other: "ImageRecord") -> bool:
        """Exact equality including pixels (bitwise)."""
        if (self.image_id, self.patient_id, self.study_id, self.laterality) != (
            other.image_id,
            other.patient_id,
            other.study_id,
            other.laterality,
        ):
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        if (self.pixels is None) != (other.pixels is None):
            return False
        return self.pixels is None or np.array_equal(self.pixels, other.pixels)


def parse_int_dist(spec) -> tuple[np.ndarray, np.ndarray]:
    """Parse an integer distribution.

    Accepted forms: ``3`` (constant), ``"1-4"`` (uniform, inclusive) and
    ``"1:0.2,2:0.5,3:0.3"`` (categorical). Returns ``(values, probs)``.
    """
    if isinstance(spec, (int, np.integer)):
        values, probs = [int(spec)], [1.0]
    else:
        text = str(spec).strip()
        if ":" in text:
            values, probs = [], []
            for part in text.split(","):
                v, p = part.split(":")
                values.append(int(v))
                probs.append(float(p))
        elif "-" in text:
            lo, hi = (int(s) for s in text.split("-"))
            if hi < lo:
                raise ValueError(f"empty range {text!r}")
            values = list(range(lo, hi + 1))
            probs = [1.0 / len(values)] * len(values)
        else:
            values, probs = [int(text)], [1.0]
    values = np.asarray(values, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(values < 1):
        raise ValueError("distribution support must be >= 1")
    if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
        raise ValueError("distribution probabilities must be non-negative and sum to 1")
    return values, probs / probs.sum()


@dataclass
class CohortConfig:
    n_patients: int = 200
    studies_per_patient: str = "1:0.15,2:0.35,3:0.3,4:0.2"
    images_per_study: str = "1:0.2,2:0.5,3:0.3"
    p_frontal: float = 0.7
    p_label_flip_between_studies: float = 0.3
    n_tasks: int = 3
    prevalence: float = 0.4
    image_size: tuple[int, int] = (16, 16)
    noise_std: float = 0.05
    signal_strength: float = 0.4
    signal_width: float = 0.12
    severity_spread: float = 0.5
    nuisance_strength: float = 0.05
    acquisition_strength: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        def fail(name, why):
            raise ConfigError(f"cohort.{name}: {why}")

        if int(self.n_patients) < 1:
            fail("n_patients", "must be >= 1")
        for name in ("studies_per_patient", "images_per_study"):
            try:
                parse_int_dist(getattr(self, name))
            except (ValueError, TypeError) as exc:
                fail(name, str(exc))
        for name in ("p_frontal", "p_label_flip_between_studies", "prevalence"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                fail(name, f"probability {p} outside [0, 1]")
        if int(self.n_tasks) < 1:
            fail("n_tasks", "must be >= 1")
        h, w = self.image_size
        if h < 4 or w < 4:
            fail("image_size", "H and W must be >= 4")
        if h != w:
            # the lateral view is a transpose of the frontal anatomy
            fail("image_size", "H and W must be equal")
        if self.noise_std < 0:
            fail("noise_std", "must be >= 0")
        if self.signal_strength <= 0:
            fail("signal_strength", "must be > 0")
        if self.signal_width <= 0:
            fail("signal_width", "must be > 0")
        if not 0.0 <= self.severity_spread < 1.0:
            fail("severity_spread", "must be in [0, 1)")
        if self.nuisance_strength < 0:
            fail("nuisance_strength", "must be >= 0")
        if self.acquisition_strength < 0:
            fail("acquisition_strength", "must be >= 0")


def signal_centers(n_tasks: int, size: int) -> np.ndarray:
    """Fixed blob centers, one per label dimension, inside the central 80% box."""
    lo, hi = 0.25 * (size - 1), 0.75 * (size - 1)
    # golden-angle spiral keeps centers spread for any n_tasks
    k = np.arange(n_tasks)
    radius = 0.5 * (hi - lo) * np.sqrt((k + 0.5) / n_tasks)
    angle = k * 2.399963229728653
    mid = 0.5 * (size - 1)
    return np.stack([mid + radius * np.sin(angle), mid + radius * np.cos(angle)], axis=1)


def signal_templates(n_tasks: int, size: int, width: float = 0.08) -> np.ndarray:
    """Per-task blob templates, shape (n_tasks, size, size), peak 1."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = max(0.9, width * size)
    out = np.empty((n_tasks, size, size))
    for k, (cy, cx) in enumerate(signal_centers(n_tasks, size)):
        out[k] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out


def anatomy(size: int) -> np.ndarray:
    """Shared background: two dim lung fields on a brighter body."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    body = 0.45 * np.exp(-(((xx - 0.5) / 0.45) ** 2 + ((yy - 0.5) / 0.55) ** 2) ** 2)
    lungs = sum(
        np.exp(-(((xx - cx) / 0.16) ** 2 + ((yy - 0.5) / 0.3) ** 2))
        for cx in (0.3, 0.7)
    )
    return 0.25 + body - 0.15 * lungs


def _smooth_field(rng: np.random.Generator, size: int, n_freq: int = 3) -> np.ndarray:
    """Random low-frequency cosine field with unit coefficient scale."""
    grid = np.arange(size) / size
    coef = rng.standard_normal((n_freq, n_freq)) / n_freq
    basis = np.cos(np.pi * np.outer(np.arange(n_freq), grid + 0.5 / size))
    return basis.T @ coef @ basis


def _view(grid: np.ndarray, laterality: Laterality) -> np.ndarray:
    return grid if laterality is Laterality.FRONTAL else grid.T


def generate(config: CohortConfig) -> list[ImageRecord]:
    """Generate a cohort; a pure function of ``config``."""
    config.validate()
    size = config.image_size[0]
    n_tasks = int(config.n_tasks)
    rng = np.random.default_rng(int(config.seed))
    spp_vals, spp_probs = parse_int_dist(config.studies_per_patient)
    ips_vals, ips_probs = parse_int_dist(config.images_per_study)
    templates = signal_templates(n_tasks, size, config.signal_width)
    base = anatomy(size)

    records: list[ImageRecord] = []
    image_id = 0
    for patient in range(1, int(config.n_patients) + 1):
        nuisance = config.nuisance_strength * _smooth_field(rng, size)
        n_studies = int(rng.choice(spp_vals, p=spp_probs))
        labels = (rng.random(n_tasks) < config.prevalence).astype(np.int8)
        for study in range(1, n_studies + 1):
            if study > 1:
                flips = rng.random(n_tasks) < config.p_label_flip_between_studies
                labels = np.where(flips, 1 - labels, labels).astype(np.int8)
            severity = 1.0 + config.severity_spread * rng.uniform(-1.0, 1.0, n_tasks)
            disease = config.signal_strength * np.tensordot(labels * severity, templates, axes=1)
            clean = base + nuisance + disease
            n_images = int(rng.choice(ips_vals, p=ips_probs))
            for _ in range(n_images):
                lat = Laterality.FRONTAL if rng.random() < config.p_frontal else Laterality.LATERAL
                acquisition = config.acquisition_strength * _smooth_field(rng, size)
                noise = config.noise_std * rng.standard_normal((size, size))
                pixels = np.clip(_view(clean, lat) + acquisition + noise, 0.0, 1.0)
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        patient_id=patient,
                        study_id=study,
                        laterality=lat,
                        labels=labels.copy(),
                        pixels=pixels,
                    )
                )
                image_id += 1
    return records


def task_names(n_tasks: int) -> list[str]:
    names = list(CHEXPERT_TASKS[:n_tasks])
    names += [f"Task {i}" for i in range(len(names), n_tasks)]
    return names


def write_cohort(records: list[ImageRecord], csv_path, blob_path=None, names=None) -> None:
    """Write records in CheXpert CSV layout, plus an ``.npz`` pixel blob keyed by image id."""
    csv_path = Path(csv_path)
    n_tasks = len(records[0].labels) if records else len(names or [])
    names = names or task_names(n_tasks)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Path", "Frontal/Lateral", *names])
        for r in records:
            path = (
                f"synthetic/patient{r.patient_id:05d}/study{r.study_id}/"
                f"view{r.image_id}_{r.laterality.value.lower()}.png"
            )
            writer.writerow([path, r.laterality.value, *(f"{float(v):.1f}" for v in r.labels)])
    if blob_path is not None:
        ids = np.array([r.image_id for r in records], dtype=np.int64)
        pixels = np.stack([r.pixels for r in records]) if records else np.zeros((0, 0, 0))
        np.savez(blob_path, image_ids=ids, pixels=pixels)


@dataclass
class IngestSchema:
    path_column: str = "Path"
    laterality_column: str = "Frontal/Lateral"
    label_columns: list[str] | None = None
    uncertain_policy: str = "zeros"  # "zeros" | "ones"
    missing_value: float = 0.0
    metadata_columns: tuple[str, ...] = field(default=METADATA_COLUMNS)


def _parse_label(text: str, policy: str, missing: float) -> int:
    text = text.strip()
    if text == "":
        return int(missing)
    value = float(text)
    if value == -1.0:
        if policy == "zeros":
            return 0
        if policy == "ones":
            return 1
        raise ValueError(f"unknown uncertain-label policy {policy!r}")
    if value not in (0.0, 1.0):
        raise ValueError(f"label value {text!r} not in {{-1, 0, 1}}")
    return int(value)


def ingest_csv(path, schema: IngestSchema | None = None, blob_path=None) -> list[ImageRecord]:
    """Read a CheXpert-format CSV into records (image ids are row indices).

    Pixels are attached from ``blob_path`` when given; otherwise records are
    metadata-only, which is enough for pair analysis.
    """
    schema = schema or IngestSchema()
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header, body = rows[0], rows[1:]
    col = {name: i for i, name in enumerate(header)}
    for needed in (schema.path_column, schema.laterality_column):
        if needed not in col:
            raise IngestError(f"missing column {needed!r}")
    label_cols = schema.label_columns
    if label_cols is None:
        label_cols = [c for c in header if c not in schema.metadata_columns]
    pixels_by_id = None
    if blob_path is not None:
        with np.load(blob_path) as blob:
            pixels_by_id = dict(zip(blob["image_ids"].tolist(), blob["pixels"]))

    records = []
    for row_no, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise IngestError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        p = row[col[schema.path_column]]
        pm, sm = _PATIENT_RE.search(p), _STUDY_RE.search(p)
        if pm is None or sm is None:
            raise IngestError(f"row {row_no}: cannot parse patient/study from {p!r}")
        try:
            lat = Laterality.parse(row[col[schema.laterality_column]])
        except ValueError as exc:
            raise IngestError(f"row {row_no}: {exc}") from None
        try:
            labels = np.array(
                [
                    _parse_label(row[col[c]], schema.uncertain_policy, schema.missing_value)
                    for c in label_cols
                ],
                dtype=np.int8,
            )
        except (ValueError, KeyError) as exc:
            raise IngestError(f"row {row_no}: {exc}") from None
        image_id = row_no - 2
        pixels = None
        if pixels_by_id is not None:
            if image_id not in pixels_by_id:
                raise IngestError(f"row {row_no}: no pixels for image {image_id}")
            pixels = pixels_by_id[image_id]
        records.append(
            ImageRecord(image_id, int(pm.group(1)), int(sm.group(1)), lat, labels, pixels)
        )
    return records


def split_patients(records: list[ImageRecord], test_fraction: float, seed: int):
    """Patient-disjoint (train, test) record lists."""
    patients = np.array(sorted({r.patient_id for r in records}))
    rng = np.random.default_rng([int(seed), 0x7E57])
    n_test = int(round(test_fraction * len(patients)))
    test_patients = set(rng.choice(patients, size=n_test, replace=False).tolist())
    train = [r for r in records if r.patient_id not in test_patients]
    test = [r for r in records if r.patient_id in test_patients]
    return train, test
