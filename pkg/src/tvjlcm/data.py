"""Records, the array-backed ``Dataset`` and the ``ModelSpec``.

Rows of the longitudinal table are stored flat and grouped by subject;
subjects are contiguous and their visits sorted, so per-subject
reductions are ``np.add.reduceat`` over ``starts``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import DataError, DesignError


@dataclass(frozen=True)
class LongitudinalRecord:
    subject_id: Hashable
    visit_time: float
    response: float
    x1: Sequence[float]  # membership covariates at this visit
    x2: Sequence[float]  # fixed-effect covariates
    z: Sequence[float]  # random-effect design, length q


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: Hashable
    followup_time: float
    event: int  # 1 = event, 0 = censored
    x3: Sequence[float]  # baseline survival covariates


@dataclass
class Dataset:
    """Longitudinal rows plus one survival record per subject.

    Row arrays have length ``n`` (total visits); subject arrays have
    length ``N``. ``subject`` maps each row to its subject index.
    """

    subject_ids: list
    subject: np.ndarray
    visit_time: np.ndarray
    y: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    Z: np.ndarray
    followup: np.ndarray
    event: np.ndarray
    X3: np.ndarray
    starts: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    last_row: np.ndarray = field(init=False)
    first_row: np.ndarray = field(init=False)

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=np.intp)
        self.visit_time = np.asarray(self.visit_time, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        n = self.y.shape[0]
        self.X1 = _as_2d(self.X1, n)
        self.X2 = _as_2d(self.X2, n)
        self.Z = _as_2d(self.Z, n)
        self.followup = np.asarray(self.followup, dtype=float)
        self.event = np.asarray(self.event).astype(np.int8)
        N = len(self.subject_ids)
        self.X3 = _as_2d(self.X3, N)
        self.counts = np.bincount(self.subject, minlength=N).astype(np.intp)
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.intp)
        self.last_row = self.starts + self.counts - 1
        self.first_row = self.starts.copy()
        self.validate()

    # ------------------------------------------------------------------

    @property
    def N(self) -> int:
        return len(self.subject_ids)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> np.ndarray:
        """Visits per subject."""
        return self.counts

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def validate(self) -> None:
        N, n = self.N, self.n
        for name in ("visit_time", "subject"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} must have one entry per row")
        for name in ("followup", "event"):
            if getattr(self, name).shape != (N,):
                raise DataError(f"{name} must have one entry per subject")
        if n and (np.any(np.diff(self.subject) < 0) or self.subject.max() >= N):
            raise DataError("rows must be grouped by subject in subject order")
        if N and np.any(self.counts < 1):
            bad = self.subject_ids[int(np.argmin(self.counts))]
            raise DataError(f"subject {bad!r} has no longitudinal records")
        if np.any(self.visit_time < 0):
            raise DataError("visit times must be non-negative")
        same = self.subject[1:] == self.subject[:-1]
        if np.any(np.diff(self.visit_time)[same] <= 0):
            i = int(self.subject[1:][same & (np.diff(self.visit_time) <= 0)][0])
            raise DataError(f"visit times of subject {self.subject_ids[i]!r} not strictly increasing")
        if np.any(~np.isin(self.event, (0, 1))):
            raise DataError("event indicator must be 0 or 1")
        if np.any(self.followup <= 0):
            raise DataError("follow-up times must be positive")
        if N:
            late = self.followup < self.visit_time[self.last_row]
            if np.any(late):
                i = int(np.flatnonzero(late)[0])
                raise DataError(
                    f"subject {self.subject_ids[i]!r}: follow-up {self.followup[i]} "
                    f"precedes last visit {self.visit_time[self.last_row[i]]}"
                )
        for name in ("y", "visit_time", "X1", "X2", "Z", "X3", "followup"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contains non-finite values")

    # ------------------------------------------------------------------

    @classmethod
    def from_records(
        cls,
        longitudinal: Sequence[LongitudinalRecord],
        survival: Sequence[SurvivalRecord],
    ) -> "Dataset":
        ids = [s.subject_id for s in survival]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate survival record for a subject")
        index = {sid: i for i, sid in enumerate(ids)}
        missing = {r.subject_id for r in longitudinal} - index.keys()
        if missing:
            raise DataError(f"longitudinal records without survival record: {sorted(map(str, missing))}")
        rows = sorted(longitudinal, key=lambda r: (index[r.subject_id], r.visit_time))
        qs = {len(r.z) for r in rows}
        if len(qs) > 1:
            raise DataError("random-effect design z must have constant length")

        def mat(attr, recs):
            return np.array([list(getattr(r, attr)) for r in recs], dtype=float).reshape(len(recs), -1)

        return cls(
            subject_ids=ids,
            subject=np.array([index[r.subject_id] for r in rows], dtype=np.intp),
            visit_time=np.array([r.visit_time for r in rows], dtype=float),
            y=np.array([r.response for r in rows], dtype=float),
            X1=mat("x1", rows),
            X2=mat("x2", rows),
            Z=mat("z", rows),
            followup=np.array([s.followup_time for s in survival], dtype=float),
            event=np.array([s.event for s in survival]),
            X3=mat("x3", survival),
        )

    def records(self) -> tuple[list[LongitudinalRecord], list[SurvivalRecord]]:
        longi = [
            LongitudinalRecord(
                self.subject_ids[s], float(t), float(y), tuple(a), tuple(b), tuple(c)
            )
            for s, t, y, a, b, c in zip(self.subject, self.visit_time, self.y, self.X1, self.X2, self.Z)
        ]
        surv = [
            SurvivalRecord(sid, float(T), int(d), tuple(x))
            for sid, T, d, x in zip(self.subject_ids, self.followup, self.event, self.X3)
        ]
        return longi, surv

    def subset(self, subjects: Sequence[int]) -> "Dataset":
        """Dataset restricted to the given subject indices (in that order)."""
        subjects = np.asarray(subjects, dtype=np.intp)
        rows = np.concatenate(
            [np.arange(self.starts[i], self.starts[i] + self.counts[i]) for i in subjects]
        ) if len(subjects) else np.zeros(0, dtype=np.intp)
        new_subject = np.repeat(np.arange(len(subjects)), self.counts[subjects])
        return Dataset(
            subject_ids=[self.subject_ids[i] for i in subjects],
            subject=new_subject,
            visit_time=self.visit_time[rows],
            y=self.y[rows],
            X1=self.X1[rows],
            X2=self.X2[rows],
            Z=self.Z[rows],
            followup=self.followup[subjects],
            event=self.event[subjects],
            X3=self.X3[subjects],
        )

    def with_membership_design(self, columns: Sequence[int]) -> "Dataset":
        """Copy keeping only the listed membership-design columns."""
        return Dataset(
            subject_ids=list(self.subject_ids),
            subject=self.subject,
            visit_time=self.visit_time,
            y=self.y,
            X1=self.X1[:, list(columns)],
            X2=self.X2,
            Z=self.Z,
            followup=self.followup,
            event=self.event,
            X3=self.X3,
        )


def _as_2d(a, rows: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(rows, -1) if rows else a.reshape(0, 0)
    if a.shape[0] != rows:
        raise DataError(f"expected {rows} rows, got {a.shape[0]}")
    return a


def empty_dataset(p1: int = 1, p2: int = 1, q: int = 1, p3: int = 1) -> Dataset:
    return Dataset(
        subject_ids=[],
        subject=np.zeros(0, dtype=np.intp),
        visit_time=np.zeros(0),
        y=np.zeros(0),
        X1=np.zeros((0, p1)),
        X2=np.zeros((0, p2)),
        Z=np.zeros((0, q)),
        followup=np.zeros(0),
        event=np.zeros(0, dtype=np.int8),
        X3=np.zeros((0, p3)),
    )


# ----------------------------------------------------------------------
# Model specification
# ----------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Dimensions and structural choices of a fitted model.

    ``knots`` has shape (K, S): row k holds the left endpoints of the S
    baseline-hazard steps of class k, starting at 0. Step s covers
    (knots[k, s], knots[k, s+1]] and the last step extends to infinity.

    The hazard's random-effect design is the time polynomial
    Z(t) = (1, t, ..., t^(q-1)); the longitudinal Z columns are expected
    to follow the same basis.

    ``subject_level_labels`` gives the basic (time-invariant) model: one
    label per subject shared by all its visits, membership counted once.
    """

    K: int
    dim_x1: int
    dim_x2: int
    dim_x3: int
    q: int
    knots: np.ndarray | None = None
    reference_class_constraint: bool = True
    subject_level_labels: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise DesignError("K must be at least 1")
        if min(self.dim_x1, self.dim_x2, self.dim_x3, self.q) < 0 or self.q < 1:
            raise DesignError("design dimensions must be non-negative and q >= 1")
        if self.knots is None:
            self.knots = np.zeros((self.K, 1))
        self.knots = np.atleast_2d(np.asarray(self.knots, dtype=float))
        if self.knots.shape[0] == 1 and self.K > 1:
            self.knots = np.repeat(self.knots, self.K, axis=0)
        if self.knots.shape[0] != self.K or self.knots.shape[1] < 1:
            raise DesignError("knots must have shape (K, S) with S >= 1")
        if np.any(self.knots[:, 0] != 0):
            raise DesignError("every knot grid must start at 0")
        if np.any(np.diff(self.knots, axis=1) <= 0):
            raise DesignError("knots must be strictly increasing per class")

    @property
    def n_steps(self) -> int:
        return self.knots.shape[1]

    @property
    def free_xi_rows(self) -> int:
        if self.reference_class_constraint:
            return self.K - 1
        return self.K

    @classmethod
    def for_data(cls, data: Dataset, K: int, n_steps: int = 1, **kwargs) -> "ModelSpec":
        knots = kwargs.pop("knots", None)
        if knots is None:
            knots = default_knots(data, K, n_steps)
        return cls(
            K=K,
            dim_x1=data.X1.shape[1],
            dim_x2=data.X2.shape[1],
            dim_x3=data.X3.shape[1],
            q=data.q,
            knots=knots,
            **kwargs,
        )

    def check(self, data: Dataset) -> None:
        got = (data.X1.shape[1], data.X2.shape[1], data.X3.shape[1], data.q)
        want = (self.dim_x1, self.dim_x2, self.dim_x3, self.q)
        if got != want:
            raise DesignError(f"dataset dimensions {got} do not match model {want}")


def default_knots(data: Dataset, K: int, n_steps: int = 1) -> np.ndarray:
    """Equal-count knots at empirical quantiles of observed event times."""
    if n_steps < 1:
        raise DesignError("need at least one baseline-hazard step")
    if n_steps == 1:
        return np.zeros((K, 1))
    times = data.followup[data.event == 1]
    if times.size < n_steps:
        times = data.followup
    cuts = np.quantile(times, np.arange(1, n_steps) / n_steps)
    cuts = np.unique(cuts[cuts > 0])
    if cuts.size != n_steps - 1:
        raise DesignError(f"cannot place {n_steps} distinct steps on the event times")
    return np.repeat(np.concatenate([[0.0], cuts])[None, :], K, axis=0)


def time_basis(t, q: int) -> np.ndarray:
    """Random-effect design Z(t) = (1, t, ..., t^(q-1)); shape (..., q)."""
    t = np.asarray(t, dtype=float)
    return t[..., None] ** np.arange(q)
