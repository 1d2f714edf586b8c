"""Dataset containers: clustered longitudinal exposure observations, subject
timelines, and per-period outcome records.

Labels are kept as strings for round-tripping; models consume the integer
codes. Validation happens at construction so downstream code can assume
referential integrity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DataValidationError(ValueError):
    """Malformed or inconsistent input data."""


def _codes(labels) -> tuple[np.ndarray, list[str]]:
    """Integer codes in order of first appearance (stable across runs)."""
    seen: dict[str, int] = {}
    codes = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        lab = str(lab)
        if lab not in seen:
            seen[lab] = len(seen)
        codes[i] = seen[lab]
    return codes, list(seen)


@dataclass
class ExposureDataset:
    """Log-concentration observations indexed by (group, cluster, household, day)."""

    study: str
    group: np.ndarray        # int codes, per observation
    cluster: np.ndarray      # int codes, per observation (all zeros if unclustered)
    household: np.ndarray    # int codes, per observation
    day: np.ndarray
    model_time: np.ndarray   # coarse step containing day
    w: np.ndarray            # log concentration
    group_labels: list[str] = field(default_factory=list)
    cluster_labels: list[str] = field(default_factory=list)
    household_labels: list[str] = field(default_factory=list)
    has_clusters: bool = True

    def __post_init__(self):
        n = len(self.w)
        for name in ("group", "cluster", "household", "day", "model_time"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise DataValidationError(f"exposure column {name!r} has length {len(arr)} != {n}")
        if n == 0:
            raise DataValidationError("exposure dataset is empty")
        if not np.all(np.isfinite(self.w)):
            bad = int(np.flatnonzero(~np.isfinite(self.w))[0])
            raise DataValidationError(f"non-finite log concentration at row {bad}")
        if not self.group_labels:
            self.group_labels = [str(g) for g in range(int(self.group.max()) + 1)]
        if not self.cluster_labels:
            self.cluster_labels = [str(c) for c in range(int(self.cluster.max()) + 1)]
        if not self.household_labels:
            self.household_labels = [str(h) for h in range(int(self.household.max()) + 1)]
        # each household must sit in exactly one (group, cluster)
        self.household_group = np.full(self.n_households, -1, dtype=np.int64)
        self.household_cluster = np.full(self.n_households, -1, dtype=np.int64)
        for g, k, h in zip(self.group, self.cluster, self.household):
            if self.household_group[h] == -1:
                self.household_group[h] = g
                self.household_cluster[h] = k
            elif self.household_group[h] != g or self.household_cluster[h] != k:
                raise DataValidationError(
                    f"household {self.household_labels[h]!r} appears under multiple "
                    "(group, cluster) pairs"
                )

    @classmethod
    def from_labels(cls, study, group, cluster, household, day, model_time, w,
                    has_clusters: bool | None = None) -> "ExposureDataset":
        group_codes, group_labels = _codes(group)
        if has_clusters is None:
            has_clusters = cluster is not None and any(c not in (None, "") for c in cluster)
        if has_clusters:
            cluster_codes, cluster_labels = _codes(cluster)
        else:
            # single synthetic cluster per group; the cluster effect is disabled
            cluster_codes = group_codes.copy()
            cluster_labels = [f"_group_{g}" for g in group_labels]
        household_codes, household_labels = _codes(household)
        return cls(
            study=str(study),
            group=group_codes,
            cluster=cluster_codes,
            household=household_codes,
            day=np.asarray(day, dtype=np.int64),
            model_time=np.asarray(model_time, dtype=np.int64),
            w=np.asarray(w, dtype=float),
            group_labels=group_labels,
            cluster_labels=cluster_labels,
            household_labels=household_labels,
            has_clusters=bool(has_clusters),
        )

    @property
    def n_obs(self) -> int:
        return len(self.w)

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def n_households(self) -> int:
        return len(self.household_labels)


@dataclass(frozen=True)
class TimelineSegment:
    start_day: int
    end_day: int    # inclusive
    group: str
    cluster: str
    household: str


@dataclass
class SubjectTimeline:
    """Ordered, contiguous residence segments for one subject."""

    subject: str
    segments: list[TimelineSegment]
    study: str = ""

    def __post_init__(self):
        if not self.segments:
            raise DataValidationError(f"subject {self.subject!r} has an empty timeline")
        segs = sorted(self.segments, key=lambda s: s.start_day)
        for s in segs:
            if s.end_day < s.start_day:
                raise DataValidationError(
                    f"subject {self.subject!r}: segment end {s.end_day} before start {s.start_day}"
                )
        for a, b in zip(segs, segs[1:]):
            if b.start_day != a.end_day + 1:
                raise DataValidationError(
                    f"subject {self.subject!r}: segments not contiguous at day {b.start_day}"
                )
        self.segments = segs

    @property
    def start_day(self) -> int:
        return self.segments[0].start_day

    @property
    def end_day(self) -> int:
        return self.segments[-1].end_day

    def household_at(self, day: int) -> TimelineSegment:
        for s in self.segments:
            if s.start_day <= day <= s.end_day:
                return s
        raise DataValidationError(f"subject {self.subject!r}: day {day} outside timeline")


@dataclass
class OutcomeDataset:
    """Per-(subject, period) case counts with covariates and assigned exposure."""

    study: np.ndarray        # int codes
    subject: np.ndarray      # int codes, global across studies
    period: np.ndarray
    cases: np.ndarray
    trials: np.ndarray
    covariates: np.ndarray   # n x n_cov (may have zero columns)
    exposure: np.ndarray     # assigned log concentration x
    study_labels: list[str] = field(default_factory=list)
    subject_labels: list[str] = field(default_factory=list)
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.cases)
        for name in ("study", "subject", "period", "trials", "exposure"):
            if len(getattr(self, name)) != n:
                raise DataValidationError(f"outcome column {name!r} has wrong length")
        if self.covariates.ndim != 2 or self.covariates.shape[0] != n:
            raise DataValidationError("covariate matrix shape mismatch")
        if np.any(self.trials <= 0):
            bad = int(np.flatnonzero(self.trials <= 0)[0])
            raise DataValidationError(f"trials must be positive (row {bad})")
        if np.any(self.cases < 0) or np.any(self.cases > self.trials):
            bad = int(np.flatnonzero((self.cases < 0) | (self.cases > self.trials))[0])
            raise DataValidationError(
                f"cases outside [0, trials] at row {bad} "
                f"(cases={int(self.cases[bad])}, trials={int(self.trials[bad])})"
            )
        if not np.all(np.isfinite(self.exposure)):
            bad = int(np.flatnonzero(~np.isfinite(self.exposure))[0])
            raise DataValidationError(f"non-finite exposure at row {bad}")
        if not self.study_labels:
            self.study_labels = [str(s) for s in range(int(self.study.max()) + 1)]
        if not self.subject_labels:
            self.subject_labels = [str(s) for s in range(int(self.subject.max()) + 1)]
        # every subject belongs to exactly one study
        self.subject_study = np.full(self.n_subjects, -1, dtype=np.int64)
        for s, i in zip(self.study, self.subject):
            if self.subject_study[i] == -1:
                self.subject_study[i] = s
            elif self.subject_study[i] != s:
                raise DataValidationError(
                    f"subject {self.subject_labels[i]!r} appears in multiple studies"
                )

    @classmethod
    def from_labels(cls, study, subject, period, cases, trials, exposure,
                    covariates=None, covariate_names=None) -> "OutcomeDataset":
        study_codes, study_labels = _codes(study)
        # scope subject ids by study so identical labels in two studies stay distinct
        subject_codes, subject_labels = _codes(
            [f"{s}:{i}" for s, i in zip(study, subject)]
        )
        n = len(study_codes)
        if covariates is None:
            cov = np.zeros((n, 0))
            covariate_names = []
        else:
            cov = np.asarray(covariates, dtype=float)
            if cov.ndim == 1:
                cov = cov[:, None]
            covariate_names = list(covariate_names or [f"z{j}" for j in range(cov.shape[1])])
        return cls(
            study=study_codes,
            subject=subject_codes,
            period=np.asarray(period, dtype=np.int64),
            cases=np.asarray(cases, dtype=np.int64),
            trials=np.asarray(trials, dtype=np.int64),
            covariates=cov,
            exposure=np.asarray(exposure, dtype=float),
            study_labels=study_labels,
            subject_labels=subject_labels,
            covariate_names=covariate_names,
        )

    @property
    def n_records(self) -> int:
        return len(self.cases)

    @property
    def n_studies(self) -> int:
        return len(self.study_labels)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_labels)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]
