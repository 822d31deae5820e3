"""Trial-level data model: treatments, studies, arms, and the comparison network.

Arm-level records (study key, publication date, treatment label, event and
total counts) are grouped into studies, treatments are indexed densely, and
publication dates are mapped onto a normalized [0, 1] time axis.  The affine
constants of that map are kept on the dataset so results can be reported back
in calendar years.
"""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

__all__ = [
    "ArmRecord",
    "Dataset",
    "DatasetError",
    "NetworkSummary",
    "Study",
    "StudyArm",
    "Treatment",
    "build_dataset",
    "impute_date",
    "network_summary",
    "select_baseline",
    "year_fraction",
]


class DatasetError(ValueError):
    """Raised when trial records violate a dataset invariant."""


_FULL_DATE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")
_MONTH_DATE = re.compile(r"^(\d{4})-(\d{2})$")


def impute_date(partial_date: str) -> dt.date:
    """Complete a partial ISO date, replacing a missing day by the 15th.

    Accepts ``YYYY-MM-DD`` (returned as-is) or ``YYYY-MM`` (day imputed to
    the middle of the month).  Year-only dates are rejected.
    """
    text = partial_date.strip()
    m = _FULL_DATE.match(text)
    if m:
        year, month, day = (int(g) for g in m.groups())
        return dt.date(year, month, day)
    m = _MONTH_DATE.match(text)
    if m:
        year, month = (int(g) for g in m.groups())
        return dt.date(year, month, 15)
    raise DatasetError(
        f"unsupported date {partial_date!r}: expected YYYY-MM-DD or YYYY-MM"
    )


def year_fraction(date: dt.date) -> float:
    """Calendar date as a fractional year (2004-07-02 -> ~2004.5)."""
    start = dt.date(date.year, 1, 1).toordinal()
    length = dt.date(date.year + 1, 1, 1).toordinal() - start
    return date.year + (date.toordinal() - start) / length


@dataclass(frozen=True)
class Treatment:
    """A treatment node in the comparison network."""

    index: int
    label: str


@dataclass(frozen=True)
class StudyArm:
    """One arm of a trial: event count out of a sample size."""

    study: int
    treatment: int
    successes: int
    size: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise DatasetError(f"arm size must be >= 1, got {self.size}")
        if not 0 <= self.successes <= self.size:
            raise DatasetError(
                f"successes {self.successes} outside [0, {self.size}]"
            )


@dataclass(frozen=True)
class Study:
    """A randomized trial: >= 2 arms sharing a publication timepoint.

    ``timepoint`` is the normalized time in [0, 1]; ``date`` keeps the
    calendar date for report output.  ``baseline`` is the reference arm's
    treatment index.
    """

    id: int
    key: str
    date: dt.date
    timepoint: float
    arms: tuple[StudyArm, ...]
    baseline: int

    @property
    def treatments(self) -> tuple[int, ...]:
        return tuple(a.treatment for a in self.arms)

    @property
    def nonbaseline_arms(self) -> tuple[StudyArm, ...]:
        return tuple(a for a in self.arms if a.treatment != self.baseline)

    @property
    def baseline_arm(self) -> StudyArm:
        for a in self.arms:
            if a.treatment == self.baseline:
                return a
        raise DatasetError(f"study {self.key}: baseline arm missing")


@dataclass(frozen=True)
class Dataset:
    """Validated trial collection with a connected comparison network.

    ``time_origin`` and ``time_scale`` record the affine normalization from
    calendar years to [0, 1]: ``years = time_origin + time_scale * t``.
    """

    studies: tuple[Study, ...]
    treatments: tuple[Treatment, ...]
    time_origin: float
    time_scale: float
    _studies_of: tuple[tuple[int, ...], ...] = field(repr=False, default=())

    def __post_init__(self) -> None:
        if not self._studies_of:
            per_treatment: list[list[int]] = [[] for _ in self.treatments]
            for s in self.studies:
                for a in s.arms:
                    per_treatment[a.treatment].append(s.id)
            object.__setattr__(
                self, "_studies_of", tuple(tuple(v) for v in per_treatment)
            )

    @property
    def I(self) -> int:  # noqa: E743 - the conventional study-count symbol
        return len(self.studies)

    @property
    def K(self) -> int:
        return len(self.treatments)

    @property
    def times(self) -> np.ndarray:
        """Normalized study timepoints, indexed by study id."""
        return np.array([s.timepoint for s in self.studies])

    def label_of(self, k: int) -> str:
        return self.treatments[k].label

    def index_of(self, label: str) -> int:
        for t in self.treatments:
            if t.label == label:
                return t.index
        raise DatasetError(f"unknown treatment label {label!r}")

    def studies_of(self, k: int) -> tuple[int, ...]:
        """Ids of the studies in which treatment ``k`` occurs, ascending."""
        return self._studies_of[k]

    def latent_pos(self, k: int, study_id: int) -> int:
        """Position of ``study_id`` within treatment ``k``'s occurrence list."""
        return self._studies_of[k].index(study_id)

    def times_of(self, k: int) -> np.ndarray:
        """Normalized timepoints of the studies containing treatment ``k``."""
        return np.array([self.studies[i].timepoint for i in self._studies_of[k]])

    def to_years(self, t: float | np.ndarray) -> float | np.ndarray:
        return self.time_origin + self.time_scale * np.asarray(t)

    def to_normalized(self, years: float | np.ndarray) -> float | np.ndarray:
        return (np.asarray(years) - self.time_origin) / self.time_scale

    def with_baseline(self, global_baseline: int) -> "Dataset":
        """Reassign per-study baselines so the global baseline is preferred.

        In each study the reference arm becomes the global baseline when
        present, otherwise the arm whose treatment is globally most common
        (ties to the lowest index).
        """
        if not 0 <= global_baseline < self.K:
            raise DatasetError(f"unknown treatment index {global_baseline}")
        counts = [len(v) for v in self._studies_of]
        studies = tuple(
            Study(
                id=s.id,
                key=s.key,
                date=s.date,
                timepoint=s.timepoint,
                arms=s.arms,
                baseline=_pick_baseline(s.treatments, counts, global_baseline),
            )
            for s in self.studies
        )
        return Dataset(studies, self.treatments, self.time_origin, self.time_scale)


@dataclass(frozen=True)
class NetworkSummary:
    """Occurrence and direct-comparison counts over the treatment network."""

    occurrence: tuple[int, ...]
    pair_counts: Mapping[tuple[int, int], int]
    components: tuple[int, ...]

    @property
    def n_components(self) -> int:
        return len(set(self.components))


@dataclass(frozen=True)
class ArmRecord:
    """One raw input row before grouping into studies."""

    study: str
    date: dt.date
    treatment: str
    events: int
    total: int


def _pick_baseline(
    arm_treatments: Iterable[int],
    counts: list[int],
    preferred: Optional[int] = None,
) -> int:
    best = None
    best_key = None
    for k in arm_treatments:
        key = (1 if k == preferred else 0, counts[k], -k)
        if best_key is None or key > best_key:
            best, best_key = k, key
    assert best is not None
    return best


def _components(n_nodes: int, edges: Iterable[tuple[int, int]]) -> tuple[int, ...]:
    parent = list(range(n_nodes))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = [find(i) for i in range(n_nodes)]
    relabel = {r: i for i, r in enumerate(sorted(set(roots)))}
    return tuple(relabel[r] for r in roots)


def build_dataset(records: Iterable[ArmRecord]) -> Dataset:
    """Group raw arm rows into a validated :class:`Dataset`.

    Treatments are indexed densely in order of first appearance, studies in
    order of first appearance, and timepoints are normalized to [0, 1] by an
    affine map (earliest date -> 0, latest -> 1).  Rejects duplicate
    (study, treatment) pairs, single-arm studies, and disconnected networks.
    """
    rows = list(records)
    if not rows:
        raise DatasetError("no input records")

    treatment_index: dict[str, int] = {}
    study_order: list[str] = []
    grouped: dict[str, list[ArmRecord]] = {}
    for r in rows:
        if r.treatment not in treatment_index:
            treatment_index[r.treatment] = len(treatment_index)
        if r.study not in grouped:
            grouped[r.study] = []
            study_order.append(r.study)
        grouped[r.study].append(r)

    for key, group in grouped.items():
        labels = [r.treatment for r in group]
        if len(set(labels)) != len(labels):
            raise DatasetError(f"study {key!r} has duplicate treatment arms")
        if len(group) < 2:
            raise DatasetError(f"study {key!r} has fewer than 2 arms")
        dates = {r.date for r in group}
        if len(dates) > 1:
            raise DatasetError(f"study {key!r} has inconsistent dates {sorted(dates)}")

    raw_times = {key: year_fraction(grouped[key][0].date) for key in study_order}
    t_min = min(raw_times.values())
    t_max = max(raw_times.values())
    scale = t_max - t_min if t_max > t_min else 1.0

    counts = [0] * len(treatment_index)
    for group in grouped.values():
        for r in group:
            counts[treatment_index[r.treatment]] += 1

    studies = []
    for sid, key in enumerate(study_order):
        group = grouped[key]
        arms = tuple(
            StudyArm(
                study=sid,
                treatment=treatment_index[r.treatment],
                successes=r.events,
                size=r.total,
            )
            for r in group
        )
        studies.append(
            Study(
                id=sid,
                key=key,
                date=group[0].date,
                timepoint=(raw_times[key] - t_min) / scale,
                arms=arms,
                baseline=_pick_baseline((a.treatment for a in arms), counts),
            )
        )

    treatments = tuple(
        Treatment(index=i, label=label) for label, i in treatment_index.items()
    )
    data = Dataset(
        studies=tuple(studies),
        treatments=treatments,
        time_origin=t_min,
        time_scale=scale,
    )

    summary = network_summary(data)
    if summary.n_components > 1:
        raise DatasetError(
            f"comparison network has {summary.n_components} components; "
            "all treatments must be connected"
        )
    return data


def network_summary(data: Dataset) -> NetworkSummary:
    """Occurrence counts, direct-comparison counts, and connectivity labels."""
    occurrence = [0] * data.K
    pair_counts: dict[tuple[int, int], int] = {}
    for s in data.studies:
        ks = sorted(a.treatment for a in s.arms)
        for k in ks:
            occurrence[k] += 1
        for i in range(len(ks)):
            for j in range(i + 1, len(ks)):
                pair = (ks[i], ks[j])
                pair_counts[pair] = pair_counts.get(pair, 0) + 1
    components = _components(data.K, pair_counts.keys())
    return NetworkSummary(tuple(occurrence), pair_counts, components)


def select_baseline(summary: NetworkSummary, override: Optional[int] = None) -> int:
    """Most common treatment, ties to the lowest index; ``override`` wins."""
    if override is not None:
        if not 0 <= override < len(summary.occurrence):
            raise DatasetError(f"unknown treatment index {override}")
        return override
    best = max(range(len(summary.occurrence)), key=lambda k: (summary.occurrence[k], -k))
    return best
