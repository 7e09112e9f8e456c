import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medaug import pairs
from medaug.cohort import ImageRecord, Laterality
from medaug.pairs import EmptyPolicy, LateralityRule, PairCriteria, StudyRule

F, L = Laterality.FRONTAL, Laterality.LATERAL


def rec(i, p, s, lat, y=0):
    return ImageRecord(i, p, s, lat, np.array([y], dtype=np.int8))


@pytest.fixture
def patient():
    # patient 1: study 1 = {0:F, 1:L, 2:F}, study 2 = {3:F (label 1), 4:L (label 1)}; patient 2: {5:F}
    recs = [rec(0, 1, 1, F), rec(1, 1, 1, L), rec(2, 1, 1, F), rec(3, 1, 2, F, 1), rec(4, 1, 2, L, 1), rec(5, 2, 1, F)]
    return pairs.build_index(recs)


@pytest.mark.parametrize(
    "study,lat,expected",
    [
        ("all", "all", (0, 1, 2, 3, 4)),
        ("same", "all", (0, 1, 2)),
        ("distinct", "all", (3, 4)),
        ("same", "same", (0, 2)),
        ("same", "distinct", (1,)),
        ("all", "same", (0, 2, 3)),
        ("distinct", "distinct", (4,)),
    ],
)
def test_candidate_sets_for_query_0(patient, study, lat, expected):
    assert pairs.candidates(patient, 0, PairCriteria(study, lat)).members == expected


def test_distinct_image_only_drops_the_query(patient):
    c = pairs.candidates(patient, 0, PairCriteria("same", "all", distinct_image_only=True))
    assert c.members == (1, 2)


def test_oracle_keeps_same_label_only(patient):
    c = pairs.candidates(patient, 0, PairCriteria("all", "all", same_label_oracle=True))
    assert c.members == (0, 1, 2)


def test_missing_query_raises(patient):
    with pytest.raises(KeyError):
        pairs.candidates(patient, 99, PairCriteria())


def test_index_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        pairs.build_index([rec(0, 1, 1, F), rec(0, 2, 1, F)])


def test_index_is_bijective_with_records(small_cohort):
    idx = pairs.build_index(small_cohort)
    assert sorted(idx.image_ids) == sorted(r.image_id for r in small_cohort)
    for r in small_cohort:
        m = idx.lookup(r.image_id)
        assert (m.patient_id, m.study_id, m.laterality) == (r.patient_id, r.study_id, r.laterality)


def test_reference_must_differ_and_not_nest():
    with pytest.raises(ValueError):
        PairCriteria("all", "all", size_control_reference=PairCriteria("all", "all"))
    inner = PairCriteria("distinct", "all", size_control_reference=PairCriteria("same", "all"))
    with pytest.raises(ValueError):
        PairCriteria("all", "all", size_control_reference=inner)


# --------------------------------------------------------------------------- properties

records_strategy = st.lists(
    st.tuples(st.integers(1, 3), st.integers(1, 3), st.sampled_from([F, L]), st.integers(0, 1)),
    min_size=1,
    max_size=14,
)


def _index(rows):
    return pairs.build_index([rec(i, p, s, lat, y) for i, (p, s, lat, y) in enumerate(rows)])


def _tuple(idx, i):
    m = idx.lookup(i)
    return (i, m.patient_id, m.study_id, m.laterality, m.labels)


ALL_CRITERIA = [
    PairCriteria(s, l, o, d)
    for s, l, o, d in itertools.product(StudyRule, LateralityRule, (False, True), (False, True))
]


@given(records_strategy)
def test_members_satisfy_predicate_and_nothing_is_missed(rows):
    idx = _index(rows)
    for crit in ALL_CRITERIA:
        for q in idx.image_ids:
            members = pairs.candidates(idx, q, crit).members
            assert len(set(members)) == len(members)
            expected = tuple(sorted(o for o in idx.image_ids if crit.admits(_tuple(idx, q), _tuple(idx, o))))
            assert members == expected


@given(records_strategy, st.sampled_from(list(LateralityRule)))
def test_study_partition(rows, lat):
    idx = _index(rows)
    for q in idx.image_ids:
        same = set(pairs.candidates(idx, q, PairCriteria("same", lat)).members)
        dist = set(pairs.candidates(idx, q, PairCriteria("distinct", lat)).members)
        every = set(pairs.candidates(idx, q, PairCriteria("all", lat)).members)
        assert same <= every and dist <= every
        assert not (same & dist)
        assert same | dist == every


@given(records_strategy)
def test_oracle_conflict_is_zero(rows):
    idx = _index(rows)
    stats = pairs.conflict_stats(idx, PairCriteria("all", "all", same_label_oracle=True))
    assert np.all(stats.proportions == 0.0)


@given(records_strategy, st.integers(0, 2**31))
def test_size_control_cardinality(rows, seed):
    idx = _index(rows)
    ref_crit = PairCriteria("distinct", "all")
    for q in idx.image_ids:
        c = pairs.candidates(idx, q, PairCriteria("all", "all", distinct_image_only=True))
        r = pairs.candidates(idx, q, ref_crit)
        out = pairs.apply_size_control(c, r, np.random.default_rng(seed))
        assert len(out) == min(len(c), len(r))
        assert set(out.members) <= set(c.members)


@given(records_strategy, st.integers(0, 2**31))
def test_sampled_partner_is_a_member(rows, seed):
    idx = _index(rows)
    crit = PairCriteria("same", "all", distinct_image_only=True)
    sampler = pairs.PositiveSampler(idx, crit, idx.image_ids, seed, EmptyPolicy.FALLBACK_SELF)
    for q in idx.image_ids:
        p = sampler.partner(q, epoch=1)
        members = sampler.sets[q].members
        assert p in members if members else p == q


def test_exhaustive_soundness_over_100_random_cohorts():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 40))
        rows = [(int(rng.integers(1, 6)), int(rng.integers(1, 4)), F if rng.random() < 0.7 else L, int(rng.integers(0, 2))) for _ in range(n)]
        idx = _index(rows)
        for q in idx.image_ids:
            for crit in ALL_CRITERIA:
                for o in pairs.candidates(idx, q, crit).members:
                    assert crit.admits(_tuple(idx, q), _tuple(idx, o))


# --------------------------------------------------------------------------- sampling


def test_skip_policy_returns_none_for_empty_sets(patient):
    crit = PairCriteria("distinct", "all")
    s = pairs.PositiveSampler(patient, crit, patient.image_ids, seed=0, policy=EmptyPolicy.SKIP)
    assert s.partner(5, 1) is None
    assert 5 not in s.active_queries()


def test_fallback_self_policy(patient):
    s = pairs.PositiveSampler(patient, PairCriteria("distinct", "all"), patient.image_ids, seed=0)
    assert s.partner(5, 1) == 5


def test_partner_draws_are_reproducible(small_cohort):
    idx = pairs.build_index(small_cohort)
    a = pairs.PositiveSampler(idx, PairCriteria("all", "all"), idx.image_ids, seed=4)
    b = pairs.PositiveSampler(idx, PairCriteria("all", "all"), idx.image_ids, seed=4)
    assert [a.partner(q, 3) for q in idx.image_ids] == [b.partner(q, 3) for q in idx.image_ids]


def test_size_control_is_fixed_for_the_run(small_cohort):
    idx = pairs.build_index(small_cohort)
    crit = PairCriteria(
        "all", "all", distinct_image_only=True,
        size_control_reference=PairCriteria("distinct", "all", distinct_image_only=True),
    )
    s = pairs.PositiveSampler(idx, crit, idx.image_ids, seed=1, policy=EmptyPolicy.SKIP)
    for q in idx.image_ids:
        ref = pairs.candidates(idx, q, crit.size_control_reference)
        unrestricted = pairs.candidates(idx, q, replace(crit, size_control_reference=None))
        assert len(s.sets[q]) == min(len(ref), len(unrestricted))
        for epoch in (1, 2, 3):
            p = s.partner(q, epoch)
            assert p is None or p in s.sets[q].members


def test_self_sampler_pairs_each_image_with_itself():
    s = pairs.SelfSampler([3, 1, 2])
    assert [s.partner(q, 1) for q in (3, 1, 2)] == [3, 1, 2]


# --------------------------------------------------------------------------- conflict histogram


def test_conflict_proportions_by_hand(patient):
    stats = pairs.conflict_stats(patient, PairCriteria("distinct", "all"))
    props = dict(zip(stats.query_ids.tolist(), stats.proportions.tolist()))
    # queries 0,1,2 (label 0) see only label-1 images in study 2; 3,4 see only label-0 images
    assert props == {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0}
    assert stats.n_empty == 1  # patient 2 has one study
    assert stats.mass_at_one == 1.0


def test_all_studies_with_self_never_fully_conflicts(small_cohort):
    idx = pairs.build_index(small_cohort)
    stats = pairs.conflict_stats(idx, PairCriteria("all", "all"))
    assert stats.mass_at_one == 0.0
    assert stats.counts.sum() == len(stats.query_ids)
