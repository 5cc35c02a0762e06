"""Detector-response metrics over perturbation outcomes.

Flip rate is the share of scored records with no detection at or above tau
after the edit. Confidence drop is the mean decrease of the thresholded top
confidence, reported over all records and over the persisting subset
(records that still have an above-tau detection). Standard deviations are
population (divide by N). Failed records are carried for accounting but never
scored.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core import Detection
from .errors import MetricsError

logger = logging.getLogger(__name__)

STD_CONVENTION = "population"


class Plausibility(StrEnum):
    PLAUSIBLE = "plausible"
    IMPLAUSIBLE = "implausible"
    UNJUDGED = "unjudged"


class RecordStatus(StrEnum):
    OK = "ok"
    FAILED = "failed"


def _check_tau(tau: float) -> None:
    if not 0.0 <= tau <= 1.0:
        raise MetricsError(f"tau must be in [0, 1], got {tau}")


def _confidences(detections: Iterable[Detection | float]) -> list[float]:
    return [d.confidence if isinstance(d, Detection) else float(d) for d in detections]


def thresholded_top_confidence(detections: Iterable[Detection | float], tau: float) -> float:
    """Highest confidence if it reaches tau, otherwise 0."""
    _check_tau(tau)
    top = max(_confidences(detections), default=0.0)
    return top if top >= tau else 0.0


def count_at_or_above(detections: Iterable[Detection | float], tau: float) -> int:
    _check_tau(tau)
    return sum(1 for c in _confidences(detections) if c >= tau)


class OutcomeRecord(BaseModel):
    """Pre/post detections for one (image, perturbation) pair."""

    model_config = ConfigDict(frozen=True)

    image_id: str
    spec_hash: str
    condition: str
    perturbation: dict[str, Any] = Field(default_factory=dict)
    environment: str | None = None
    tau: float = Field(ge=0.0, le=1.0)
    pre_detections: tuple[Detection, ...] = ()
    post_detections: tuple[Detection, ...] = ()
    pre_top_tau: float = 0.0
    post_top_tau: float = 0.0
    pre_count_tau: int = Field(default=0, ge=0)
    post_count_tau: int = Field(default=0, ge=0)
    manual_plausibility: Plausibility = Plausibility.UNJUDGED
    status: RecordStatus = RecordStatus.OK
    error: str | None = None

    @model_validator(mode="after")
    def _check_thresholded_fields(self) -> OutcomeRecord:
        for name in ("pre_top_tau", "post_top_tau"):
            value = getattr(self, name)
            if value != 0.0 and not self.tau <= value <= 1.0:
                raise ValueError(f"{name}={value} is neither 0 nor in [tau, 1]")
        if self.status == RecordStatus.OK:
            expected = count_at_or_above(self.post_detections, self.tau)
            if self.post_count_tau != expected:
                raise ValueError(
                    f"post_count_tau={self.post_count_tau} but {expected} post detections reach tau"
                )
        return self

    @classmethod
    def from_detections(
        cls,
        *,
        image_id: str,
        spec_hash: str,
        condition: str,
        pre: Sequence[Detection],
        post: Sequence[Detection],
        tau: float,
        perturbation: Mapping[str, Any] | None = None,
        environment: str | None = None,
    ) -> OutcomeRecord:
        return cls(
            image_id=image_id,
            spec_hash=spec_hash,
            condition=condition,
            perturbation=dict(perturbation or {}),
            environment=environment,
            tau=tau,
            pre_detections=tuple(pre),
            post_detections=tuple(post),
            pre_top_tau=thresholded_top_confidence(pre, tau),
            post_top_tau=thresholded_top_confidence(post, tau),
            pre_count_tau=count_at_or_above(pre, tau),
            post_count_tau=count_at_or_above(post, tau),
        )

    @classmethod
    def failed(
        cls,
        *,
        image_id: str,
        spec_hash: str,
        condition: str,
        pre: Sequence[Detection],
        tau: float,
        error: str,
        perturbation: Mapping[str, Any] | None = None,
        environment: str | None = None,
    ) -> OutcomeRecord:
        return cls(
            image_id=image_id,
            spec_hash=spec_hash,
            condition=condition,
            perturbation=dict(perturbation or {}),
            environment=environment,
            tau=tau,
            pre_detections=tuple(pre),
            pre_top_tau=thresholded_top_confidence(pre, tau),
            pre_count_tau=count_at_or_above(pre, tau),
            status=RecordStatus.FAILED,
            error=error,
        )

    @property
    def is_scored(self) -> bool:
        return self.status == RecordStatus.OK

    @property
    def flipped(self) -> bool:
        return self.is_scored and self.post_count_tau == 0

    @property
    def count_delta(self) -> int:
        return self.post_count_tau - self.pre_count_tau

    def with_plausibility(self, label: Plausibility | str) -> OutcomeRecord:
        return self.model_copy(update={"manual_plausibility": Plausibility(label)})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True)


# -- per-record values at an arbitrary tau ---------------------------------


def _post_count(record: OutcomeRecord, tau: float | None) -> int:
    if tau is None or tau == record.tau:
        return record.post_count_tau
    return count_at_or_above(record.post_detections, tau)


def _pre_count(record: OutcomeRecord, tau: float | None) -> int:
    if tau is None or tau == record.tau:
        return record.pre_count_tau
    return count_at_or_above(record.pre_detections, tau)


def _tops(record: OutcomeRecord, tau: float | None) -> tuple[float, float]:
    if tau is None or tau == record.tau:
        return record.pre_top_tau, record.post_top_tau
    return (
        thresholded_top_confidence(record.pre_detections, tau),
        thresholded_top_confidence(record.post_detections, tau),
    )


def _scored(records: Iterable[OutcomeRecord]) -> list[OutcomeRecord]:
    return [r for r in records if r.is_scored]


def _require_scored(records: Iterable[OutcomeRecord]) -> list[OutcomeRecord]:
    scored = _scored(records)
    if not scored:
        raise MetricsError("no scored records")
    return scored


@dataclass(frozen=True)
class Stats:
    """Mean and population std over a subset; both None when the subset is empty."""

    mean: float | None
    std: float | None
    count: int

    @classmethod
    def of(cls, values: Sequence[float]) -> Stats:
        if not values:
            return cls(mean=None, std=None, count=0)
        # sorted so the result depends only on the multiset of values
        arr = np.sort(np.asarray(values, dtype=np.float64))
        return cls(mean=float(arr.mean()), std=float(arr.std()), count=len(values))


@dataclass(frozen=True)
class ConfidenceDrop:
    mean: float
    std: float
    persisting: Stats


class GroupStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int
    flips: int
    flip_rate: float


def _group(records: Sequence[OutcomeRecord], tau: float | None) -> GroupStats:
    flips = sum(1 for r in records if _post_count(r, tau) == 0)
    return GroupStats(n=len(records), flips=flips, flip_rate=flips / len(records))


def flip_rate(records: Iterable[OutcomeRecord], tau: float | None = None) -> float:
    """Fraction of scored records left with no detection at or above tau."""
    scored = _require_scored(records)
    return _group(scored, tau).flip_rate


def confidence_drop(records: Iterable[OutcomeRecord], tau: float | None = None) -> ConfidenceDrop:
    scored = _require_scored(records)
    drops = []
    persisting_drops = []
    for r in scored:
        pre, post = _tops(r, tau)
        drops.append(pre - post)
        if _post_count(r, tau) > 0:
            persisting_drops.append(pre - post)
    overall = Stats.of(drops)
    assert overall.mean is not None and overall.std is not None
    return ConfidenceDrop(mean=overall.mean, std=overall.std, persisting=Stats.of(persisting_drops))


def persisting_stats(records: Iterable[OutcomeRecord], tau: float | None = None) -> Stats:
    """Post top confidence over records that kept an above-tau detection."""
    values = [_tops(r, tau)[1] for r in _scored(records) if _post_count(r, tau) > 0]
    return Stats.of(values)


def per_environment_breakdown(
    records: Iterable[OutcomeRecord],
    tau: float | None = None,
    *,
    order: Sequence[str] | None = None,
) -> dict[str, GroupStats]:
    """Flip rate per environment; known names follow ``order``, the rest sort after."""
    groups: dict[str, list[OutcomeRecord]] = {}
    for r in _scored(records):
        if not r.environment:
            raise MetricsError(
                f"record {r.image_id}/{r.spec_hash} in a background breakdown has no environment"
            )
        groups.setdefault(r.environment, []).append(r)
    rank = {name: i for i, name in enumerate(order or ())}
    names = sorted(groups, key=lambda n: (rank.get(n, len(rank)), n))
    return {name: _group(groups[name], tau) for name in names}


def detection_count_delta(
    records: Iterable[OutcomeRecord], tau: float | None = None
) -> list[int]:
    return [_post_count(r, tau) - _pre_count(r, tau) for r in records]


def plausibility_breakdown(
    records: Iterable[OutcomeRecord], tau: float | None = None
) -> dict[str, GroupStats]:
    groups: dict[str, list[OutcomeRecord]] = {}
    for r in _scored(records):
        groups.setdefault(r.manual_plausibility, []).append(r)
    return {str(label): _group(groups[label], tau) for label in Plausibility if label in groups}


class MetricsSummary(BaseModel):
    """Aggregates for one perturbation condition."""

    model_config = ConfigDict(frozen=True)

    condition: str | None = None
    N: int
    flips: int
    flip_rate: float | None
    cd_mean: float | None
    cd_std: float | None
    cd_persisting_mean: float | None
    cd_persisting_std: float | None
    persisting_count: int
    persisting_conf_mean: float | None
    persisting_conf_std: float | None
    pre_conf_mean: float | None
    post_conf_mean: float | None
    post_conf_std: float | None
    spurious: int
    failed: int
    per_environment: dict[str, GroupStats] = Field(default_factory=dict)
    plausibility: dict[str, GroupStats] | None = None
    tau: float

    @model_validator(mode="after")
    def _check_counts(self) -> MetricsSummary:
        if self.flips > self.N:
            raise ValueError("flips cannot exceed N")
        if self.per_environment and sum(g.n for g in self.per_environment.values()) != self.N:
            raise ValueError("per-environment Ns must sum to N")
        return self


def summarize(
    records: Iterable[OutcomeRecord],
    tau: float,
    *,
    condition: str | None = None,
    environment_order: Sequence[str] | None = None,
) -> MetricsSummary:
    """All metrics for one condition. A condition with no scored records reports N=0."""
    _check_tau(tau)
    records = list(records)
    scored = _scored(records)
    failed = len(records) - len(scored)
    if not scored:
        logger.warning("condition %s has no scored records (%d failed)", condition, failed)
        return MetricsSummary(
            condition=condition,
            N=0,
            flips=0,
            flip_rate=None,
            cd_mean=None,
            cd_std=None,
            cd_persisting_mean=None,
            cd_persisting_std=None,
            persisting_count=0,
            persisting_conf_mean=None,
            persisting_conf_std=None,
            pre_conf_mean=None,
            post_conf_mean=None,
            post_conf_std=None,
            spurious=0,
            failed=failed,
            tau=tau,
        )

    group = _group(scored, tau)
    drop = confidence_drop(scored, tau)
    persisting = persisting_stats(scored, tau)
    pre = Stats.of([_tops(r, tau)[0] for r in scored])
    post = Stats.of([_tops(r, tau)[1] for r in scored])
    per_env: dict[str, GroupStats] = {}
    if any(r.environment for r in scored):
        per_env = per_environment_breakdown(scored, tau, order=environment_order)
    plausibility = None
    if any(r.manual_plausibility != Plausibility.UNJUDGED for r in scored):
        plausibility = plausibility_breakdown(scored, tau)

    return MetricsSummary(
        condition=condition,
        N=group.n,
        flips=group.flips,
        flip_rate=group.flip_rate,
        cd_mean=drop.mean,
        cd_std=drop.std,
        cd_persisting_mean=drop.persisting.mean,
        cd_persisting_std=drop.persisting.std,
        persisting_count=persisting.count,
        persisting_conf_mean=persisting.mean,
        persisting_conf_std=persisting.std,
        pre_conf_mean=pre.mean,
        post_conf_mean=post.mean,
        post_conf_std=post.std,
        spurious=sum(1 for d in detection_count_delta(scored, tau) if d > 0),
        failed=failed,
        per_environment=per_env,
        plausibility=plausibility,
        tau=tau,
    )


def summarize_by_condition(
    records: Iterable[OutcomeRecord],
    tau: float,
    *,
    environment_order: Sequence[str] | None = None,
) -> list[MetricsSummary]:
    """One summary per condition, in order of first appearance."""
    groups: dict[str, list[OutcomeRecord]] = {}
    for r in records:
        groups.setdefault(r.condition, []).append(r)
    return [
        summarize(group, tau, condition=name, environment_order=environment_order)
        for name, group in groups.items()
    ]


# -- serialization ---------------------------------------------------------

CSV_COLUMNS = [
    "condition",
    "environment",
    "N",
    "flips",
    "flip_rate",
    "cd_mean",
    "cd_std",
    "cd_persisting_mean",
    "cd_persisting_std",
    "persisting_count",
    "persisting_conf_mean",
    "persisting_conf_std",
    "pre_conf_mean",
    "post_conf_mean",
    "post_conf_std",
    "spurious",
    "failed",
    "tau",
]


def summary_document(
    summaries: Sequence[MetricsSummary], metadata: Mapping[str, Any] | None = None
) -> dict[str, Any]:
    return {
        "metadata": dict(metadata or {}),
        "conditions": [s.model_dump(mode="json") for s in summaries],
    }


def write_summary_json(
    summaries: Sequence[MetricsSummary],
    path: str | Path,
    metadata: Mapping[str, Any] | None = None,
    *,
    extra: Mapping[str, Any] | None = None,
) -> None:
    document = {**summary_document(summaries, metadata), **(extra or {})}
    text = json.dumps(document, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _cell(value: Any) -> Any:
    return "" if value is None else value


def write_summary_csv(summaries: Sequence[MetricsSummary], path: str | Path) -> None:
    """One row per condition, then one row per (condition, environment)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for s in summaries:
            row = s.model_dump(exclude={"per_environment", "plausibility"})
            writer.writerow({col: _cell(row.get(col)) for col in CSV_COLUMNS})
        for s in summaries:
            for env, group in s.per_environment.items():
                writer.writerow(
                    {
                        **{col: "" for col in CSV_COLUMNS},
                        "condition": s.condition,
                        "environment": env,
                        "N": group.n,
                        "flips": group.flips,
                        "flip_rate": group.flip_rate,
                        "tau": s.tau,
                    }
                )


def write_records(records: Iterable[OutcomeRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(record.to_json() + "\n")


def read_records(path: str | Path) -> list[OutcomeRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(OutcomeRecord.model_validate_json(line))
    return records
