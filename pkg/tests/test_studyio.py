import json

import numpy as np
import pytest

from aicmet.studyio import (SchemaVersionError, StudyParseError, StudyValidationError, load_studies,
                            observations_csv, read_study, save_studies_ndjson, save_study, write_study)


def test_round_trip_bit_exact(studies):
    for s in studies:
        back = read_study(write_study(s, include_latents=True))
        for a, b in zip(s.individuals, back.individuals):
            assert np.array_equal(a.times, b.times) and np.array_equal(a.obs, b.obs)
            assert a.dose == b.dose
        assert back.hyper == s.hyper
        assert np.array_equal(back.latents.theta, s.latents.theta)
        assert np.array_equal(back.latents.states, s.latents.states)


def test_observable_export_has_no_latents(studies):
    doc = json.loads(write_study(studies[0]))
    assert "latents" not in doc
    assert set(doc) == {"schema_version", "study_id", "individuals"}


def test_minimal_document():
    s = read_study({"schema_version": 1, "individuals": [
        {"dose": {"amount": 5, "route": "iv"}, "times": [1.0], "obs": [2.0]}]})
    assert len(s) == 1 and s.individuals[0].n_valid == 1


def test_masked_nulls():
    s = read_study({"schema_version": 1, "individuals": [
        {"dose": {"amount": 5, "route": "oral"}, "times": [1.0, 2.0], "obs": [None, 2.0], "mask": [False, True]}]})
    assert s.individuals[0].n_valid == 1


def test_non_increasing_times_names_individual():
    doc = {"schema_version": 1, "individuals": [
        {"dose": {"amount": 5, "route": "iv"}, "times": [0.5, 1.0], "obs": [1.0, 1.0]},
        {"dose": {"amount": 5, "route": "iv"}, "times": [1.0, 0.5], "obs": [1.0, 1.0]}]}
    with pytest.raises(StudyValidationError) as info:
        read_study(doc)
    assert info.value.individual == 1


def test_schema_version_error():
    with pytest.raises(SchemaVersionError):
        read_study({"schema_version": 2, "individuals": []})


@pytest.mark.parametrize("doc,path", [
    ({"schema_version": 1}, "$"),
    ({"schema_version": 1, "individuals": [{"times": [1.0], "obs": [1.0]}]}, "$.individuals[0]"),
    ({"schema_version": 1, "individuals": [{"dose": {"amount": 1, "route": "im"}, "times": [1.0], "obs": [1.0]}]},
     "$.individuals[0].dose.route"),
    ({"schema_version": 1, "individuals": [{"dose": {"amount": 1, "route": "iv"}, "times": ["a"], "obs": [1.0]}]},
     "$.individuals[0].times[0]"),
])
def test_parse_errors_carry_paths(doc, path):
    with pytest.raises(StudyParseError) as info:
        read_study(doc)
    assert info.value.path == path


def test_empty_study_rejected():
    with pytest.raises(StudyParseError):
        read_study({"schema_version": 1, "individuals": []})


def test_files_and_csv(tmp_path, studies):
    p = save_studies_ndjson(studies, tmp_path / "a.jsonl")
    back = load_studies(p)
    assert [s.study_id for s in back] == [s.study_id for s in studies]
    q = save_study(studies[0], tmp_path / "one.json")
    assert load_studies(q)[0].study_id == studies[0].study_id
    text = observations_csv(studies[:1])
    lines = text.splitlines()
    assert lines[0] == "study_id,individual,time,concentration"
    assert len(lines) - 1 == sum(d.n_valid for d in studies[0].individuals)
