"""Trial data model and wide-format file I/O.

A trial file is a delimited table with header ``id,R,<covariates>,A_1..A_K,Y_1..Y_K``
and one row per subject. Empty cells are missing. The measurement schedule and
the adherence definition live in a JSON sidecar next to the table
(``trial.csv`` -> ``trial.json``).
"""

from __future__ import annotations

import csv
import enum
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    FormatError,
    ScheduleError,
    ValidationError,
    WeakInstrumentError,
    WeakInstrumentWarning,
)


class AdherenceMode(str, enum.Enum):
    """What an adherence indicator means.

    ``TREATMENT_ONLY`` counts only active-drug adherence, so placebo subjects
    are non-adherent by definition. ``BOTH_ARMS`` counts adherence to whatever
    injection the subject was randomized to.
    """

    TREATMENT_ONLY = "treatment-only"
    BOTH_ARMS = "both-arms"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("_", "-"))
        except ValueError:
            raise ValidationError(
                f"unknown adherence mode {value!r}; expected one of "
                f"{[m.value for m in cls]}",
                field="adherence_mode",
            ) from None


@dataclass(frozen=True)
class TimeSchedule:
    """Measurement times in weeks, strictly increasing."""

    times: tuple

    def __post_init__(self):
        try:
            times = tuple(float(t) for t in self.times)
        except (TypeError, ValueError):
            raise ScheduleError("schedule must be a list of numbers", field="schedule") from None
        if len(times) < 1:
            raise ScheduleError("schedule needs at least one time point", field="schedule")
        arr = np.asarray(times)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ScheduleError("schedule times must be finite and positive", field="schedule")
        if np.any(np.diff(arr) <= 0):
            raise ScheduleError("schedule times must be strictly increasing", field="schedule")
        object.__setattr__(self, "times", times)

    @classmethod
    def unit(cls, K):
        return cls(tuple(range(1, K + 1)))

    @property
    def K(self):
        return len(self.times)

    def as_array(self):
        return np.asarray(self.times, dtype=float)

    def lags(self):
        """K x K matrix of ``t_k - t_j``; entries with ``j > k`` are negative."""
        t = self.as_array()
        return t[:, None] - t[None, :]


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialFrame:
    """Immutable per-subject trial data.

    ``adherence`` and ``outcome`` are ``n x K`` float arrays with NaN for a
    missing cell. ``covariates`` is a DataFrame with one row per subject.
    """

    arm: np.ndarray
    adherence: np.ndarray
    outcome: np.ndarray
    schedule: TimeSchedule
    covariates: pd.DataFrame = None
    ids: np.ndarray = None
    mode: AdherenceMode = AdherenceMode.BOTH_ARMS

    # Binary adherence is only required of raw data; residualized frames relax it.
    _binary_adherence = True

    def __post_init__(self):
        mode = AdherenceMode.parse(self.mode)
        object.__setattr__(self, "mode", mode)

        arm = np.asarray(self.arm)
        if arm.ndim != 1:
            raise ValidationError("arm must be a 1-d vector", field="R")
        n = arm.shape[0]
        if n < 1:
            raise ValidationError("frame has no subjects", field="R")
        arm_f = np.asarray(arm, dtype=float)
        bad = ~np.isin(arm_f, (0.0, 1.0))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"R must be 0 or 1; row {row} has {arm[row]!r}", field="R", row=row
            )
        arm = _readonly(arm_f, dtype=np.int8)

        K = self.schedule.K
        A = np.array(self.adherence, dtype=float)
        Y = np.array(self.outcome, dtype=float)
        for name, mat in (("A", A), ("Y", Y)):
            if mat.shape != (n, K):
                raise ValidationError(
                    f"{name} has shape {mat.shape}, expected {(n, K)}", field=name
                )
            if np.isinf(mat).any():
                raise ValidationError(f"{name} contains infinite values", field=name)
        if self._binary_adherence:
            obs = ~np.isnan(A)
            bad = obs & ~np.isin(A, (0.0, 1.0))
            if bad.any():
                i, k = np.argwhere(bad)[0]
                raise ValidationError(
                    f"A_{k + 1} must be 0, 1 or missing; row {i} has {A[i, k]!r}",
                    field=f"A_{k + 1}",
                    row=int(i),
                )
            if mode is AdherenceMode.TREATMENT_ONLY:
                A[arm == 0, :] = 0.0
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "adherence", _readonly(A))
        object.__setattr__(self, "outcome", _readonly(Y))

        cov = self.covariates
        if cov is None:
            cov = pd.DataFrame(index=range(n))
        else:
            cov = pd.DataFrame(cov).reset_index(drop=True).copy()
        if len(cov) != n:
            raise ValidationError(
                f"covariates have {len(cov)} rows, expected {n}", field="covariates"
            )
        reserved = {"id", "R"}
        for c in cov.columns:
            if c in reserved or re.fullmatch(r"[AY]_\d+", str(c)):
                raise ValidationError(f"covariate name {c!r} is reserved", field=str(c))
        object.__setattr__(self, "covariates", cov)

        ids = self.ids
        if ids is None:
            ids = [str(i + 1) for i in range(n)]
        ids = np.array([str(x) for x in ids], dtype=object)
        if ids.shape != (n,):
            raise ValidationError("ids must have one entry per subject", field="id")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

        if len(np.unique(arm)) < 2:
            raise ValidationError("both randomization arms must be present", field="R")

    @property
    def n(self):
        return self.arm.shape[0]

    @property
    def K(self):
        return self.schedule.K

    @property
    def covariate_names(self):
        return [str(c) for c in self.covariates.columns]

    @property
    def incomplete(self):
        """Boolean mask of subjects with any missing adherence or outcome cell."""
        return np.isnan(self.adherence).any(axis=1) | np.isnan(self.outcome).any(axis=1)

    @property
    def is_complete(self):
        return not self.incomplete.any()

    def treated_adherence(self):
        """``A_k * R``: adherence that counts as active treatment."""
        return self.adherence * self.arm[:, None]

    def placebo_adherence(self):
        """``A_k * (1 - R)``: adherence to the placebo injection."""
        return self.adherence * (1 - self.arm[:, None])

    def replace(self, **changes):
        fields = dict(
            arm=self.arm,
            adherence=self.adherence,
            outcome=self.outcome,
            schedule=self.schedule,
            covariates=self.covariates,
            ids=self.ids,
            mode=self.mode,
        )
        fields.update(changes)
        return type(self)(**fields)

    def subset(self, rows):
        rows = np.asarray(rows)
        return self.replace(
            arm=self.arm[rows],
            adherence=self.adherence[rows],
            outcome=self.outcome[rows],
            covariates=self.covariates.iloc[rows].reset_index(drop=True),
            ids=self.ids[rows],
        )

    def complete_cases(self):
        return self.subset(np.flatnonzero(~self.incomplete))

    def equals(self, other):
        """Exact equality of every cell and every missingness mask."""
        if not isinstance(other, TrialFrame):
            return False
        return (
            self.schedule == other.schedule
            and self.mode == other.mode
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.adherence, other.adherence, equal_nan=True)
            and np.array_equal(self.outcome, other.outcome, equal_nan=True)
            and list(self.ids) == list(other.ids)
            and self.covariates.equals(other.covariates)
            and list(self.covariates.columns) == list(other.covariates.columns)
        )


# -- file I/O ---------------------------------------------------------------


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def _fmt(x):
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    x = float(x)
    if np.isnan(x):
        return ""
    if x in (0.0, 1.0) and not np.signbit(x):
        return str(int(x))
    return repr(x)


def save_trial(frame, path, extra=None):
    """Write ``frame`` as a wide-format table plus its JSON sidecar.

    Floats are written in shortest round-trip form, so ``load_trial`` gives back
    bit-identical arrays. ``extra`` entries are merged into the sidecar.
    """
    path = Path(path)
    K = frame.K
    cov_names = frame.covariate_names
    header = ["id", "R", *cov_names]
    header += [f"A_{k}" for k in range(1, K + 1)]
    header += [f"Y_{k}" for k in range(1, K + 1)]
    cov_cols = [frame.covariates[c].to_numpy() for c in frame.covariates.columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(frame.n):
            row = [frame.ids[i], str(int(frame.arm[i]))]
            row += [_fmt(col[i]) for col in cov_cols]
            row += [_fmt(v) for v in frame.adherence[i]]
            row += [_fmt(v) for v in frame.outcome[i]]
            w.writerow(row)
    meta = {
        "schedule": [float(t) for t in frame.schedule.times],
        "adherence_mode": frame.mode.value,
    }
    if extra:
        meta.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_header(header):
    if len(header) < 4:
        raise FormatError("header too short; need id,R,A_1..A_K,Y_1..Y_K", field="header")
    if header[0] != "id":
        raise FormatError(f"first column must be 'id', got {header[0]!r}", field=header[0])
    if header[1] != "R":
        raise FormatError(f"second column must be 'R', got {header[1]!r}", field=header[1])
    seen = set()
    for name in header:
        if name in seen:
            raise FormatError(f"duplicate column {name!r}", field=name)
        seen.add(name)
    try:
        a_start = header.index("A_1")
    except ValueError:
        raise FormatError("missing column 'A_1'", field="A_1") from None
    covariates = header[2:a_start]
    for name in covariates:
        if re.fullmatch(r"[AY]_\d+", name) or not name:
            raise FormatError(f"unexpected column {name!r} before A_1", field=name)
    rest = header[a_start:]
    if len(rest) % 2:
        raise FormatError("adherence and outcome column counts differ", field=rest[-1])
    K = len(rest) // 2
    for k in range(K):
        if rest[k] != f"A_{k + 1}":
            raise FormatError(f"expected 'A_{k + 1}', got {rest[k]!r}", field=rest[k])
        if rest[K + k] != f"Y_{k + 1}":
            raise FormatError(f"expected 'Y_{k + 1}', got {rest[K + k]!r}", field=rest[K + k])
    return covariates, K


def _to_float(cell, column, row):
    if cell.strip() == "":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise FormatError(
            f"column {column!r} row {row}: cannot parse {cell!r} as a number",
            field=column,
            row=row,
        ) from None


def read_sidecar(path):
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"sidecar config {side} not found", field="sidecar")
    try:
        with open(side, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"sidecar {side} is not valid JSON: {exc}", field="sidecar") from None


def load_trial(path, definition=None):
    """Read a wide-format trial file and its sidecar into a validated frame.

    ``definition`` overrides the sidecar's adherence mode when given. Under
    treatment-only adherence every placebo-arm adherence cell becomes 0.
    """
    path = Path(path)
    meta = read_sidecar(path)
    if "schedule" not in meta:
        raise ScheduleError("sidecar has no 'schedule' entry", field="schedule")
    schedule = TimeSchedule(tuple(meta["schedule"]))
    mode = AdherenceMode.parse(definition if definition is not None else meta.get("adherence_mode", "both-arms"))

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("file is empty", field="header")
    header = [h.strip() for h in rows[0]]
    cov_names, K = _parse_header(header)
    if K != schedule.K:
        raise ScheduleError(
            f"file has {K} time points but the schedule lists {schedule.K}", field="schedule"
        )
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise FormatError("file has no data rows", field="header")

    n, v = len(body), len(cov_names)
    ids, arm = [], np.empty(n)
    A, Y = np.empty((n, K)), np.empty((n, K))
    raw_cov = [[None] * n for _ in range(v)]
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise FormatError(
                f"row {i} has {len(r)} fields, header has {len(header)}", field="header", row=i
            )
        ids.append(r[0])
        cell = r[1].strip()
        if cell not in ("0", "1", "0.0", "1.0"):
            raise ValidationError(f"R must be 0 or 1; row {i} has {cell!r}", field="R", row=i)
        arm[i] = float(cell)
        for c in range(v):
            raw_cov[c][i] = r[2 + c]
        for k in range(K):
            A[i, k] = _to_float(r[2 + v + k], f"A_{k + 1}", i)
            Y[i, k] = _to_float(r[2 + v + K + k], f"Y_{k + 1}", i)

    cov = {}
    for name, cells in zip(cov_names, raw_cov):
        try:
            cov[name] = np.array([np.nan if c.strip() == "" else float(c) for c in cells])
        except ValueError:
            cov[name] = pd.Series([None if c.strip() == "" else c for c in cells], dtype=object)
    covariates = pd.DataFrame(cov, index=range(n), columns=cov_names)
    return TrialFrame(
        arm=arm,
        adherence=A,
        outcome=Y,
        schedule=schedule,
        covariates=covariates,
        ids=ids,
        mode=mode,
    )


# -- instrument diagnostics -------------------------------------------------


@dataclass(frozen=True)
class InstrumentReport:
    """Cumulative full-adherence proportions by arm, one entry per time point."""

    times: tuple
    treated: np.ndarray
    placebo: np.ndarray
    covariance: np.ndarray
    n_included: int
    weak: bool
    weak_timepoints: tuple = field(default=())

    def to_frame(self):
        return pd.DataFrame(
            {
                "time": self.times,
                "full_adherence_treated": self.treated,
                "full_adherence_placebo": self.placebo,
                "cov_R_A": self.covariance,
            }
        )


def instrument_strength(frame, atol=1e-12):
    """Check that randomization predicts adherence at every time point.

    Returns ``Pr(A_1 = ... = A_k = 1 | R)`` for each arm and each ``k``, plus
    the sample covariance of ``R`` and ``A_k``. Emits a
    ``WeakInstrumentWarning`` when that covariance vanishes at any ``k``.
    Rows with any missing adherence cell are left out.
    """
    A = frame.adherence
    all_missing = np.isnan(A).all(axis=0)
    if all_missing.any():
        k = int(np.flatnonzero(all_missing)[0])
        raise WeakInstrumentError(f"adherence column A_{k + 1} is entirely missing")
    keep = ~np.isnan(A).any(axis=1)
    if not keep.any():
        raise WeakInstrumentError("no subject has a complete adherence history")
    A = A[keep]
    R = frame.arm[keep].astype(float)
    full = np.cumprod(A, axis=1)
    treated = full[R == 1].mean(axis=0) if (R == 1).any() else np.full(frame.K, np.nan)
    placebo = full[R == 0].mean(axis=0) if (R == 0).any() else np.full(frame.K, np.nan)
    Rc = R - R.mean()
    cov = (Rc[:, None] * (A - A.mean(axis=0))).sum(axis=0) / max(len(R) - 1, 1)
    weak_k = tuple(int(k) + 1 for k in np.flatnonzero(np.abs(cov) <= atol))
    if weak_k:
        warnings.warn(
            f"Cov(R, A_k) is zero at time points {list(weak_k)}: randomization does "
            "not predict adherence there",
            WeakInstrumentWarning,
            stacklevel=2,
        )
    return InstrumentReport(
        times=frame.schedule.times,
        treated=treated,
        placebo=placebo,
        covariance=cov,
        n_included=int(keep.sum()),
        weak=bool(weak_k),
        weak_timepoints=weak_k,
    )
