"""Candidate sets of positive partners built from patient metadata.

For a query image x and a criteria c, the candidate set S_c(x) holds every
image of the same patient that passes the study rule, the laterality rule,
and the optional same-label and distinct-image filters. The query itself is
a member whenever it passes the rules and ``distinct_image_only`` is off.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace

import numpy as np

from medaug.cohort import ImageRecord, Laterality

log = logging.getLogger(__name__)


class StudyRule(str, enum.Enum):
    ALL = "all"
    SAME = "same"
    DISTINCT = "distinct"


class LateralityRule(str, enum.Enum):
    ALL = "all"
    SAME = "same"
    DISTINCT = "distinct"


class EmptyPolicy(str, enum.Enum):
    FALLBACK_SELF = "fallback_self"
    SKIP = "skip"


@dataclass(frozen=True)
class PairCriteria:
    study_rule: StudyRule = StudyRule.SAME
    laterality_rule: LateralityRule = LateralityRule.ALL
    same_label_oracle: bool = False
    distinct_image_only: bool = False
    size_control_reference: PairCriteria | None = None
    label_task: int = 0

    def __post_init__(self):
        object.__setattr__(self, "study_rule", StudyRule(self.study_rule))
        object.__setattr__(self, "laterality_rule", LateralityRule(self.laterality_rule))
        ref = self.size_control_reference
        if ref is not None:
            if ref.size_control_reference is not None:
                raise ValueError("size-control references cannot be nested")
            if replace(self, size_control_reference=None) == ref:
                raise ValueError("size-control reference must differ from the criteria")

    @property
    def name(self) -> str:
        parts = [f"{self.study_rule.value}-study/{self.laterality_rule.value}-lat"]
        if self.same_label_oracle:
            parts.append("oracle")
        if self.distinct_image_only:
            parts.append("distinct-img")
        if self.size_control_reference is not None:
            parts.append(f"ctrl[{self.size_control_reference.name}]")
        return "+".join(parts)

    def admits(self, query: tuple, other: tuple) -> bool:
        """Predicate c(query, other) on ``(image_id, patient, study, laterality, labels)`` tuples."""
        qid, qp, qs, ql, qlab = query
        oid, op, os_, ol, olab = other
        if qp != op:
            return False
        if self.study_rule is StudyRule.SAME and os_ != qs:
            return False
        if self.study_rule is StudyRule.DISTINCT and os_ == qs:
            return False
        if self.laterality_rule is LateralityRule.SAME and ol != ql:
            return False
        if self.laterality_rule is LateralityRule.DISTINCT and ol == ql:
            return False
        if self.same_label_oracle and olab[self.label_task] != qlab[self.label_task]:
            return False
        if self.distinct_image_only and oid == qid:
            return False
        return True


@dataclass(frozen=True)
class CandidateSet:
    query_id: int
    members: tuple[int, ...]

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class ImageMeta:
    image_id: int
    patient_id: int
    study_id: int
    laterality: Laterality
    labels: np.ndarray

    def key(self) -> tuple:
        return (self.image_id, self.patient_id, self.study_id, self.laterality, self.labels)


class MetadataIndex:
    """Read-only lookup from patients/studies to images and from images to metadata."""

    def __init__(self, records: list[ImageRecord]):
        self._meta: dict[int, ImageMeta] = {}
        self._patients: dict[int, dict[int, list[tuple[int, Laterality]]]] = {}
        for r in records:
            if r.image_id in self._meta:
                raise ValueError(f"duplicate image_id {r.image_id}")
            self._meta[r.image_id] = ImageMeta(
                r.image_id, r.patient_id, r.study_id, r.laterality, np.asarray(r.labels)
            )
            studies = self._patients.setdefault(r.patient_id, {})
            studies.setdefault(r.study_id, []).append((r.image_id, r.laterality))

    def __len__(self):
        return len(self._meta)

    def __contains__(self, image_id):
        return image_id in self._meta

    @property
    def image_ids(self) -> list[int]:
        return list(self._meta)

    def lookup(self, image_id: int) -> ImageMeta:
        try:
            return self._meta[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id}") from None

    def patient(self, patient_id: int) -> dict[int, list[tuple[int, Laterality]]]:
        return self._patients[patient_id]

    def patient_images(self, patient_id: int) -> list[int]:
        return [i for imgs in self._patients[patient_id].values() for i, _ in imgs]


def build_index(records: list[ImageRecord]) -> MetadataIndex:
    return MetadataIndex(records)


def candidates(index: MetadataIndex, query: int, criteria: PairCriteria) -> CandidateSet:
    q = index.lookup(query)
    studies = index.patient(q.patient_id)
    if criteria.study_rule is StudyRule.SAME:
        pool = [(q.study_id, studies[q.study_id])]
    elif criteria.study_rule is StudyRule.DISTINCT:
        pool = [(s, imgs) for s, imgs in studies.items() if s != q.study_id]
    else:
        pool = list(studies.items())
    members = []
    for _, imgs in pool:
        for image_id, lat in imgs:
            if criteria.laterality_rule is LateralityRule.SAME and lat != q.laterality:
                continue
            if criteria.laterality_rule is LateralityRule.DISTINCT and lat == q.laterality:
                continue
            if criteria.distinct_image_only and image_id == query:
                continue
            if criteria.same_label_oracle:
                other = index.lookup(image_id).labels[criteria.label_task]
                if other != q.labels[criteria.label_task]:
                    continue
            members.append(image_id)
    return CandidateSet(query, tuple(sorted(members)))


def sample_positive(
    cands: CandidateSet,
    fallback_query: int,
    rng: np.random.Generator,
    policy: EmptyPolicy = EmptyPolicy.FALLBACK_SELF,
) -> int | None:
    """Uniform draw from the candidate set.

    An empty set yields ``fallback_query`` under FALLBACK_SELF and ``None``
    under SKIP, in which case the caller drops the query from its batch.
    """
    if cands.members:
        return cands.members[int(rng.integers(len(cands.members)))]
    if EmptyPolicy(policy) is EmptyPolicy.SKIP:
        return None
    return fallback_query


def apply_size_control(
    cands: CandidateSet, reference: CandidateSet, rng: np.random.Generator
) -> CandidateSet:
    n = min(len(cands), len(reference))
    if n == len(cands):
        return cands
    keep = np.sort(rng.choice(len(cands), size=n, replace=False))
    return CandidateSet(cands.query_id, tuple(cands.members[i] for i in keep))


class PositiveSampler:
    """Fixed per-run candidate sets with per-(epoch, image) partner draws.

    Size control pre-selection happens here, once, at construction.
    """

    def __init__(
        self,
        index: MetadataIndex,
        criteria: PairCriteria,
        query_ids,
        seed: int,
        policy: EmptyPolicy = EmptyPolicy.FALLBACK_SELF,
    ):
        self.criteria = criteria
        self.policy = EmptyPolicy(policy)
        self.seed = int(seed)
        self.sets: dict[int, CandidateSet] = {}
        ref_criteria = criteria.size_control_reference
        if ref_criteria is not None:
            ref_criteria = replace(ref_criteria, label_task=criteria.label_task)
        for qid in query_ids:
            cands = candidates(index, qid, criteria)
            if ref_criteria is not None:
                ref = candidates(index, qid, ref_criteria)
                rng = np.random.default_rng([self.seed, 0x5C, int(qid)])
                cands = apply_size_control(cands, ref, rng)
            self.sets[qid] = cands

    def partner(self, query_id: int, epoch: int) -> int | None:
        rng = np.random.default_rng([self.seed, 0xA1, int(epoch), int(query_id)])
        return sample_positive(self.sets[query_id], query_id, rng, self.policy)

    def active_queries(self) -> list[int]:
        if self.policy is EmptyPolicy.SKIP:
            return [q for q, s in self.sets.items() if len(s)]
        return list(self.sets)

    def mean_set_size(self) -> float:
        return float(np.mean([len(s) for s in self.sets.values()])) if self.sets else 0.0


class SelfSampler:
    """Instance discrimination: every query is its own partner."""

    criteria = None
    policy = EmptyPolicy.FALLBACK_SELF

    def __init__(self, query_ids):
        self.query_ids = list(query_ids)

    def partner(self, query_id: int, epoch: int) -> int:
        return query_id

    def active_queries(self) -> list[int]:
        return list(self.query_ids)

    def mean_set_size(self) -> float:
        return 1.0


@dataclass
class ConflictStats:
    criteria: PairCriteria
    query_ids: np.ndarray
    set_sizes: np.ndarray
    proportions: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    mass_at_one: float
    n_empty: int

    def summary(self) -> dict:
        return {
            "criteria": self.criteria.name,
            "n_queries": int(len(self.query_ids)),
            "n_empty": self.n_empty,
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "mass_at_one": self.mass_at_one,
            "mean_proportion": float(self.proportions.mean()) if len(self.proportions) else None,
        }


def conflict_stats(
    index: MetadataIndex,
    criteria: PairCriteria,
    labels: dict | None = None,
    task: int = 0,
    bins: int = 10,
    query_ids=None,
    sets: dict | None = None,
) -> ConflictStats:
    """Per-query share of candidates whose ``task`` label differs from the query's.

    Queries with an empty candidate set are left out and counted in ``n_empty``.
    ``mass_at_one`` is the fraction of remaining queries whose set disagrees
    entirely with the query label. ``sets`` supplies precomputed candidate
    sets (for example the size-controlled sets of a ``PositiveSampler``).
    """

    def label_of(i):
        return (labels[i] if labels is not None else index.lookup(i).labels)[task]

    qids, sizes, props = [], [], []
    n_empty = 0
    if query_ids is None:
        query_ids = sorted(sets) if sets is not None else index.image_ids
    for qid in query_ids:
        cands = sets[qid] if sets is not None else candidates(index, qid, criteria)
        if not cands.members:
            n_empty += 1
            continue
        q_label = label_of(qid)
        n_conflict = sum(1 for m in cands.members if label_of(m) != q_label)
        qids.append(qid)
        sizes.append(len(cands))
        props.append(n_conflict / len(cands))
    props = np.asarray(props, dtype=np.float64)
    counts, edges = np.histogram(props, bins=bins, range=(0.0, 1.0))
    mass = float(np.mean(props == 1.0)) if len(props) else 0.0
    return ConflictStats(
        criteria,
        np.asarray(qids, dtype=np.int64),
        np.asarray(sizes, dtype=np.int64),
        props,
        edges,
        counts,
        mass,
        n_empty,
    )
