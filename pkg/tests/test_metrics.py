"""Tests for flip rate, confidence drop and the derived statistics."""

from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from perturbex.core import Detection
from perturbex.errors import MetricsError
from perturbex.metrics import (
    CSV_COLUMNS,
    OutcomeRecord,
    Plausibility,
    Stats,
    confidence_drop,
    count_at_or_above,
    detection_count_delta,
    flip_rate,
    per_environment_breakdown,
    persisting_stats,
    read_records,
    summarize,
    summarize_by_condition,
    thresholded_top_confidence,
    write_records,
    write_summary_csv,
    write_summary_json,
)
from perturbex.prompts import list_environments

TAU = 0.4


def _det(confidence: float, x: int = 0) -> Detection:
    return Detection(class_label="seal", bbox=(x, 0, 4, 4), confidence=confidence)


def _record(
    index: int,
    pre: list[float],
    post: list[float],
    *,
    tau: float = TAU,
    condition: str = "removal-segmentation",
    environment: str | None = None,
) -> OutcomeRecord:
    return OutcomeRecord.from_detections(
        image_id=f"img{index:03d}",
        spec_hash=f"{index:016x}",
        condition=condition,
        pre=[_det(c, i) for i, c in enumerate(pre)],
        post=[_det(c, i) for i, c in enumerate(post)],
        tau=tau,
        environment=environment,
    )


def _removal_fixture() -> list[OutcomeRecord]:
    """44 removals: 36 erased, 8 persisting with alternating post confidences."""
    records = [_record(i, [0.9], []) for i in range(36)]
    for i in range(8):
        post = 0.7536 if i % 2 == 0 else 0.4344
        records.append(_record(36 + i, [0.9], [post]))
    return records


def _background_fixture() -> list[OutcomeRecord]:
    """44 images x 15 environments with 42 suppressed composites."""
    flips = {"beach": 14, "rocky": 8, "winter": 7}
    others = [e.name for e in list_environments() if e.name not in flips]
    for k, name in enumerate(others):
        flips[name] = 2 if k == 0 else 1
    assert sum(flips.values()) == 42
    records = []
    for env in list_environments():
        for i in range(44):
            post = [] if i < flips.get(env.name, 0) else [0.8]
            records.append(
                _record(i, [0.9], post, condition="background-bbox", environment=env.name)
            )
    return records


def test_thresholded_top_confidence():
    assert thresholded_top_confidence([0.7, 0.3], TAU) == 0.7
    assert thresholded_top_confidence([], TAU) == 0.0
    assert thresholded_top_confidence([0.39], TAU) == 0.0
    assert thresholded_top_confidence([_det(0.4)], TAU) == 0.4


def test_count_at_or_above_is_inclusive():
    assert count_at_or_above([0.4, 0.39999, 0.9], TAU) == 2


def test_tau_out_of_range():
    with pytest.raises(MetricsError):
        thresholded_top_confidence([0.5], 1.5)
    with pytest.raises(MetricsError):
        summarize([_record(0, [0.9], [])], -0.1)


def test_flip_rate_trivial_cases():
    assert flip_rate([_record(0, [0.9], [])]) == 1.0
    assert flip_rate([_record(0, [0.9], [0.5])]) == 0.0
    with pytest.raises(MetricsError):
        flip_rate([])


def test_flip_rate_removal_replay():
    records = _removal_fixture()
    assert flip_rate(records) == pytest.approx(36 / 44)
    assert round(flip_rate(records), 3) == pytest.approx(0.818, abs=0.001)


def test_flip_rate_replacement_replay():
    records = [_record(i, [0.9], [] if i < 26 else [0.6]) for i in range(44)]
    assert flip_rate(records) == pytest.approx(0.591, abs=0.001)


def test_confidence_drop_identity_and_single():
    unchanged = [_record(i, [0.8], [0.8]) for i in range(5)]
    assert confidence_drop(unchanged).mean == 0.0
    single = confidence_drop([_record(0, [0.696], [])])
    assert single.mean == pytest.approx(0.696)
    assert single.std == 0.0
    assert single.persisting.count == 0


def test_persisting_stats_replay():
    records = _removal_fixture()
    stats = persisting_stats(records)
    assert stats.count == 8
    assert stats.mean == pytest.approx(0.594)
    assert stats.std == pytest.approx(0.1596)
    summary = summarize(records, TAU)
    assert summary.post_conf_mean == pytest.approx(0.108, abs=0.001)
    assert summary.persisting_count == 8


def test_persisting_stats_empty():
    stats = persisting_stats([_record(0, [0.9], [])])
    assert stats == Stats(mean=None, std=None, count=0)


def test_confidence_drop_decomposes_over_flipped_and_persisting():
    records = _removal_fixture()
    drop = confidence_drop(records)
    flipped_drop = 0.9
    expected = (36 * flipped_drop + 8 * drop.persisting.mean) / 44
    assert drop.mean == pytest.approx(expected)


def test_background_replay():
    records = _background_fixture()
    assert len(records) == 660
    summary = summarize(records, TAU, environment_order=[e.name for e in list_environments()])
    assert summary.N == 660
    assert summary.flips == 42
    assert summary.flip_rate == pytest.approx(0.064, abs=0.001)
    breakdown = summary.per_environment
    assert list(breakdown) == [e.name for e in list_environments()]
    assert breakdown["beach"].flip_rate == pytest.approx(0.318, abs=0.001)
    assert breakdown["rocky"].flip_rate == pytest.approx(0.182, abs=0.001)
    assert breakdown["winter"].flip_rate == pytest.approx(0.159, abs=0.001)
    assert sum(g.n for g in breakdown.values()) == 660


def test_per_environment_requires_environment():
    with pytest.raises(MetricsError, match="no environment"):
        per_environment_breakdown([_record(0, [0.9], [])])


def test_per_environment_unknown_names_sort_last():
    records = [
        _record(0, [0.9], [], environment="zzz"),
        _record(1, [0.9], [0.5], environment="beach"),
        _record(2, [0.9], [], environment="aaa"),
    ]
    breakdown = per_environment_breakdown(records, order=["beach"])
    assert list(breakdown) == ["beach", "aaa", "zzz"]


def test_detection_count_delta():
    records = [
        _record(0, [0.9, 0.8], [0.7]),
        _record(1, [0.9], [0.9, 0.5, 0.3]),
        _record(2, [0.9], []),
    ]
    assert detection_count_delta(records) == [-1, 1, -1]
    assert summarize(records, TAU).spurious == 1


def test_metrics_at_a_different_tau():
    records = [_record(0, [0.9], [0.5]), _record(1, [0.9], [0.3])]
    assert flip_rate(records) == 0.5
    assert flip_rate(records, tau=0.6) == 1.0
    assert flip_rate(records, tau=0.2) == 0.0
    assert summarize(records, 0.6).flip_rate == 1.0


def test_failed_records_are_counted_not_scored():
    ok = _record(0, [0.9], [])
    failed = OutcomeRecord.failed(
        image_id="img001",
        spec_hash="f" * 16,
        condition="removal-segmentation",
        pre=[_det(0.9)],
        tau=TAU,
        error="inpainter timed out",
    )
    summary = summarize([ok, failed], TAU)
    assert summary.N == 1
    assert summary.failed == 1
    assert summary.flip_rate == 1.0
    assert not failed.flipped


def test_summarize_with_nothing_scored(caplog):
    failed = OutcomeRecord.failed(
        image_id="img", spec_hash="0" * 16, condition="c", pre=[], tau=TAU, error="boom"
    )
    summary = summarize([failed], TAU, condition="c")
    assert summary.N == 0
    assert summary.flip_rate is None
    assert summary.failed == 1
    assert "no scored records" in caplog.text


def test_record_rejects_inconsistent_counts():
    with pytest.raises(ValueError):
        OutcomeRecord(
            image_id="a",
            spec_hash="0" * 16,
            condition="c",
            tau=TAU,
            post_detections=(_det(0.9),),
            post_count_tau=0,
        )
    with pytest.raises(ValueError):
        OutcomeRecord(image_id="a", spec_hash="0" * 16, condition="c", tau=TAU, post_top_tau=0.2)


def test_plausibility_breakdown():
    records = [_record(i, [0.9], [] if i % 2 else [0.8]) for i in range(44)]
    records = [
        r.with_plausibility(Plausibility.PLAUSIBLE if i < 20 else Plausibility.IMPLAUSIBLE)
        for i, r in enumerate(records)
    ]
    summary = summarize(records, TAU)
    assert summary.plausibility is not None
    assert summary.plausibility["plausible"].n == 20
    assert summary.plausibility["implausible"].n == 24
    # plausibility never changes the overall flip rate
    assert summary.flip_rate == 0.5


def test_summarize_by_condition_keeps_first_appearance_order():
    records = [
        _record(0, [0.9], [], condition="b"),
        _record(1, [0.9], [0.8], condition="a"),
        _record(2, [0.9], [], condition="b"),
    ]
    summaries = summarize_by_condition(records, TAU)
    assert [s.condition for s in summaries] == ["b", "a"]
    assert summaries[0].N == 2 and summaries[1].flips == 0


def _brute_force(records: list[OutcomeRecord], tau: float) -> dict[str, float | int | None]:
    n = len(records)
    tops = []
    for r in records:
        pre = max((d.confidence for d in r.pre_detections), default=0.0)
        post = max((d.confidence for d in r.post_detections), default=0.0)
        tops.append((pre if pre >= tau else 0.0, post if post >= tau else 0.0))
    flips = sum(1 for r in records if all(d.confidence < tau for d in r.post_detections))
    drops = [a - b for a, b in tops]
    mean = sum(drops) / n
    std = math.sqrt(sum((d - mean) ** 2 for d in drops) / n)
    persisting = [
        post
        for (_, post), r in zip(tops, records)
        if any(d.confidence >= tau for d in r.post_detections)
    ]
    return {
        "flips": flips,
        "flip_rate": flips / n,
        "cd_mean": mean,
        "cd_std": std,
        "persisting_count": len(persisting),
        "persisting_conf_mean": sum(persisting) / len(persisting) if persisting else None,
    }


def test_summaries_match_brute_force_on_random_fixtures():
    rng = np.random.default_rng(11)
    for case in range(500):
        tau = float(rng.choice([0.0, 0.25, 0.4, 0.5, 0.9, 1.0]))
        records = []
        for i in range(int(rng.integers(1, 21))):
            pre = [round(float(c), 3) for c in rng.random(int(rng.integers(0, 4)))]
            post = [round(float(c), 3) for c in rng.random(int(rng.integers(0, 4)))]
            records.append(_record(i, pre, post, tau=tau))
        summary = summarize(records, tau)
        expected = _brute_force(records, tau)
        assert summary.flips == expected["flips"], case
        assert summary.flip_rate == pytest.approx(expected["flip_rate"])
        assert summary.cd_mean == pytest.approx(expected["cd_mean"])
        assert summary.cd_std == pytest.approx(expected["cd_std"], abs=1e-12)
        assert summary.persisting_count == expected["persisting_count"]
        if expected["persisting_conf_mean"] is None:
            assert summary.persisting_conf_mean is None
        else:
            assert summary.persisting_conf_mean == pytest.approx(expected["persisting_conf_mean"])


def _random_records(rng, count: int) -> list[OutcomeRecord]:
    environments = [e.name for e in list_environments()][:4]
    records = []
    for i in range(count):
        pre = [float(c) for c in rng.random(int(rng.integers(1, 4)))]
        post = [float(c) for c in rng.random(int(rng.integers(0, 4)))]
        if i % 2:
            records.append(_record(i, pre, post))
        else:
            env = environments[i % len(environments)]
            records.append(_record(i, pre, post, condition="background-bbox", environment=env))
    return records


def test_stats_ignore_value_order():
    rng = np.random.default_rng(12)
    values = [float(v) for v in rng.random(97) * 1e3]
    base = Stats.of(values)
    for _ in range(50):
        assert Stats.of([float(v) for v in rng.permutation(values)]) == base


def test_summaries_ignore_record_order():
    rng = np.random.default_rng(13)
    records = _random_records(rng, 120)
    expected = {s.condition: s for s in summarize_by_condition(records, TAU)}
    for _ in range(200):
        shuffled = [records[i] for i in rng.permutation(len(records))]
        assert {s.condition: s for s in summarize_by_condition(shuffled, TAU)} == expected


def test_flip_rate_is_monotone_in_tau():
    rng = np.random.default_rng(14)
    taus = [round(t, 2) for t in np.linspace(0.0, 1.0, 21)]
    for _ in range(50):
        records = _random_records(rng, int(rng.integers(1, 40)))
        rates = [flip_rate(records, tau) for tau in taus]
        assert all(a <= b for a, b in zip(rates, rates[1:]))


def test_summary_writers(tmp_path):
    records = _background_fixture()[:88] + _removal_fixture()
    summaries = summarize_by_condition(records, TAU)
    json_path = tmp_path / "summary.json"
    csv_path = tmp_path / "summary.csv"
    write_summary_json(summaries, json_path, {"tau": TAU})
    write_summary_csv(summaries, csv_path)

    document = json.loads(json_path.read_text(encoding="utf-8"))
    assert document["metadata"] == {"tau": TAU}
    assert [c["condition"] for c in document["conditions"]] == [
        "background-bbox",
        "removal-segmentation",
    ]

    with open(csv_path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == CSV_COLUMNS
    assert rows[0]["condition"] == "background-bbox" and rows[0]["environment"] == ""
    assert rows[1]["persisting_conf_mean"] != ""
    env_rows = [r for r in rows if r["environment"]]
    assert {r["environment"] for r in env_rows} == {"forest", "mountain"}


def test_records_file_round_trip(tmp_path):
    records = _removal_fixture()[:3]
    path = tmp_path / "records.jsonl"
    write_records(records, path)
    assert read_records(path) == records
    first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert first["pre_detections"][0]["class"] == "seal"
