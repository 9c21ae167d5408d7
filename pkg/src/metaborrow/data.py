"""Core domain types, validation, and file I/O.

Two kinds of records move through the pipeline:

* arm-level aggregate summaries (one record per trial arm: sample size,
  outcome mean/variance, covariate means/variances), grouped into trials;
* subject-level rows (outcome, covariates, arm indicator, weight slot),
  either observed in the target trial or reconstructed from summaries.

Variances in input files are variances of individual observations.  A
summary file may instead carry the standard error of the arm mean in a
``y_se_mean`` column, which is converted on read via ``var = n * se**2``.
Covariate dispersion is diagonal: one variance per covariate, no
covariances.

All types are immutable value objects.  Floats are written with
``repr``, so means, outcomes, and weights round-trip bit-for-bit;
variances pass through their SD column (sqrt on write, square on read)
and may move by an ulp.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import DataError

FAMILIES = ("continuous", "binary")


@dataclass(frozen=True)
class ArmSummary:
    """Aggregate statistics of one trial arm.

    Attributes
    ----------
    trial_id : str
    arm : int
        1 = treatment, 0 = control.
    n : int
        Number of subjects in the arm.
    y_mean, y_var : float
        Mean and variance of individual outcomes.
    x_mean, x_var : tuple of float
        Per-covariate means and variances (diagonal dispersion).
    x_family : tuple of str
        Per-covariate family tag, ``continuous`` or ``binary``.
    """

    trial_id: str
    arm: int
    n: int
    y_mean: float
    y_var: float
    x_mean: tuple
    x_var: tuple
    x_family: tuple

    def __post_init__(self):
        if self.arm not in (0, 1):
            raise DataError(f"trial {self.trial_id!r}: arm must be 0 or 1, got {self.arm}")
        if self.n < 0:
            raise DataError(f"trial {self.trial_id!r}: n must be nonnegative, got {self.n}")
        if self.y_var < 0:
            raise DataError(f"trial {self.trial_id!r} arm {self.arm}: negative outcome variance")
        if not (len(self.x_mean) == len(self.x_var) == len(self.x_family)):
            raise DataError(f"trial {self.trial_id!r} arm {self.arm}: covariate field lengths differ")
        for j, (v, fam, m) in enumerate(zip(self.x_var, self.x_family, self.x_mean), start=1):
            if v < 0:
                raise DataError(f"trial {self.trial_id!r} arm {self.arm}: x{j} variance negative")
            if fam not in FAMILIES:
                raise DataError(f"trial {self.trial_id!r} arm {self.arm}: unknown family {fam!r}")
            if fam == "binary" and not 0.0 <= m <= 1.0:
                raise DataError(
                    f"trial {self.trial_id!r} arm {self.arm}: binary x{j} mean {m} outside [0, 1]"
                )

    @property
    def p(self):
        return len(self.x_mean)


@dataclass(frozen=True)
class TrialSummary:
    """One trial: one or two ArmSummary records (single-arm trials allowed)."""

    trial_id: str
    arms: tuple

    def __post_init__(self):
        seen = [a.arm for a in self.arms]
        if len(set(seen)) != len(seen):
            raise DataError(f"trial {self.trial_id!r}: duplicate arm values {seen}")
        if not self.arms:
            raise DataError(f"trial {self.trial_id!r}: no arms")
        dims = {a.p for a in self.arms}
        if len(dims) > 1:
            raise DataError(f"trial {self.trial_id!r}: covariate dimension differs across arms")

    def arm(self, value):
        for a in self.arms:
            if a.arm == value:
                return a
        return None

    @property
    def p(self):
        return self.arms[0].p


@dataclass(frozen=True)
class SubjectRecord:
    """One subject row: outcome, covariates, arm, weight slot, and origin tag."""

    trial_id: str
    z: int
    y: float
    x: tuple
    weight: float = 1.0
    source: str = "target"  # "target" | "reconstructed"


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of SubjectRecord with fixed covariate dimension."""

    subjects: tuple
    p: int
    target_id: str = ""

    def __len__(self):
        return len(self.subjects)

    def with_weights(self, weights):
        if len(weights) != len(self.subjects):
            raise DataError("weight vector length does not match dataset")
        subs = tuple(replace(s, weight=float(w)) for s, w in zip(self.subjects, weights))
        return Dataset(subs, self.p, self.target_id)

    def n_target(self):
        return sum(1 for s in self.subjects if s.source == "target")


def make_dataset(subjects, target_id=""):
    """Build a Dataset, inferring the covariate dimension from the first record."""
    subjects = tuple(subjects)
    if not subjects:
        return Dataset((), 0, target_id)
    return Dataset(subjects, len(subjects[0].x), target_id)


def validate_dataset(d):
    """Check every dataset invariant; return a list of violation strings.

    Pure diagnostic: an empty list means the dataset is valid.  Each entry
    names the offending record and the invariant it breaks.
    """
    violations = []
    for i, s in enumerate(d.subjects):
        where = f"subject {i} (trial {s.trial_id!r})"
        if s.z not in (0, 1):
            violations.append(f"{where}: arm indicator must be 0 or 1, got {s.z}")
        if not math.isfinite(s.y):
            violations.append(f"{where}: outcome not finite")
        if len(s.x) != d.p:
            violations.append(f"{where}: covariate dimension {len(s.x)} != dataset dimension {d.p}")
        if any(not math.isfinite(v) for v in s.x):
            violations.append(f"{where}: covariate not finite")
        if not math.isfinite(s.weight) or s.weight < 0:
            violations.append(f"{where}: weight must be finite and nonnegative (bounded-weight condition)")
        if s.source not in ("target", "reconstructed"):
            violations.append(f"{where}: unknown source tag {s.source!r}")
    return violations


# ---------------------------------------------------------------------------
# summary files


def _comment_free(fh):
    """Skip ``#`` comment lines (artifact stamps) ahead of CSV parsing."""
    return (ln for ln in fh if not ln.lstrip().startswith("#"))


def _write_stamp(fh, stamp):
    if stamp:
        for k, v in stamp.items():
            fh.write(f"# {k}={v}\n")


def _detect_format(path, fmt):
    if fmt is not None:
        return fmt
    return "json" if str(path).endswith(".json") else "csv"


def _summary_header(p, use_se_mean=False):
    cols = ["trial_id", "arm", "n", "y_mean", "y_se_mean" if use_se_mean else "y_sd"]
    for j in range(1, p + 1):
        cols += [f"x{j}_mean", f"x{j}_sd", f"x{j}_family"]
    return cols


def _row_to_arm(row, line):
    try:
        trial_id = row["trial_id"]
        arm = int(row["arm"])
        n = int(row["n"])
        y_mean = float(row["y_mean"])
        if "y_sd" in row and row.get("y_sd") not in (None, ""):
            y_var = float(row["y_sd"]) ** 2
        elif "y_se_mean" in row and row.get("y_se_mean") not in (None, ""):
            y_var = n * float(row["y_se_mean"]) ** 2
        else:
            raise DataError(f"line {line}: need one of y_sd or y_se_mean")
        x_mean, x_var, x_family = [], [], []
        j = 1
        while f"x{j}_mean" in row:
            cell = row[f"x{j}_mean"]
            if cell in (None, ""):
                break
            x_mean.append(float(cell))
            x_var.append(float(row[f"x{j}_sd"]) ** 2)
            x_family.append(row[f"x{j}_family"].strip() or "continuous")
            j += 1
    except DataError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {line}: cannot parse summary row ({exc})") from exc
    return ArmSummary(trial_id, arm, n, y_mean, y_var, tuple(x_mean), tuple(x_var), tuple(x_family))


def read_summaries(path, fmt=None):
    """Read arm-level summaries; return a list of TrialSummary.

    Accepts the CSV schema ``trial_id,arm,n,y_mean,y_sd|y_se_mean,
    x1_mean,x1_sd,x1_family,...`` or its JSON mirror (a list of objects
    with the same field names).  Arm rows sharing a ``trial_id`` are
    merged into one trial; duplicated (trial_id, arm) pairs are an error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"summary file not found: {path}")
    fmt = _detect_format(path, fmt)
    rows = []
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(_comment_free(fh))
            if reader.fieldnames is None:
                raise DataError(f"{path}: empty file, no trials")
            for line, row in enumerate(reader, start=2):
                rows.append(_row_to_arm(row, line))
    elif fmt == "json":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        for i, row in enumerate(payload, start=1):
            rows.append(_row_to_arm(row, i))
    else:
        raise DataError(f"unknown summary format {fmt!r}")
    if not rows:
        raise DataError(f"{path}: no trials")

    by_trial = {}
    order = []
    for a in rows:
        if a.trial_id not in by_trial:
            by_trial[a.trial_id] = []
            order.append(a.trial_id)
        if any(prev.arm == a.arm for prev in by_trial[a.trial_id]):
            raise DataError(f"duplicate (trial_id, arm) pair: ({a.trial_id!r}, {a.arm})")
        by_trial[a.trial_id].append(a)
    trials = [TrialSummary(tid, tuple(by_trial[tid])) for tid in order]
    dims = {t.p for t in trials}
    if len(dims) > 1:
        raise DataError(f"covariate dimension differs across trials: {sorted(dims)}")
    return trials


def write_summaries(trials, path, fmt=None):
    """Write TrialSummary records back to CSV or JSON (y_sd convention)."""
    path = Path(path)
    fmt = _detect_format(path, fmt)
    p = trials[0].p if trials else 0
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_summary_header(p))
            for t in trials:
                for a in t.arms:
                    row = [a.trial_id, a.arm, a.n, repr(a.y_mean), repr(math.sqrt(a.y_var))]
                    for m, v, fam in zip(a.x_mean, a.x_var, a.x_family):
                        row += [repr(m), repr(math.sqrt(v)), fam]
                    writer.writerow(row)
    elif fmt == "json":
        payload = []
        for t in trials:
            for a in t.arms:
                row = {
                    "trial_id": a.trial_id,
                    "arm": a.arm,
                    "n": a.n,
                    "y_mean": a.y_mean,
                    "y_sd": math.sqrt(a.y_var),
                }
                for j, (m, v, fam) in enumerate(zip(a.x_mean, a.x_var, a.x_family), start=1):
                    row[f"x{j}_mean"] = m
                    row[f"x{j}_sd"] = math.sqrt(v)
                    row[f"x{j}_family"] = fam
                payload.append(row)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    else:
        raise DataError(f"unknown summary format {fmt!r}")


# ---------------------------------------------------------------------------
# subject (IPD) files


def read_subjects(path, fmt=None, target_id=None):
    """Read subject-level rows; return a Dataset.

    Schema: ``trial_id,z,y,x1,...,xp`` with optional ``weight`` and
    ``source`` columns.  When no ``source`` column is present, rows are
    tagged target/reconstructed by comparing ``trial_id`` to ``target_id``
    (all rows are target when ``target_id`` is None).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"subject file not found: {path}")
    fmt = _detect_format(path, fmt)
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(_comment_free(fh))
            if reader.fieldnames is None:
                raise DataError(f"{path}: empty file, no subjects")
            raw = list(reader)
    elif fmt == "json":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    else:
        raise DataError(f"unknown subject format {fmt!r}")
    if not raw:
        raise DataError(f"{path}: no subjects")

    subjects = []
    for line, row in enumerate(raw, start=2):
        try:
            xs = []
            j = 1
            while f"x{j}" in row and row[f"x{j}"] not in (None, ""):
                xs.append(float(row[f"x{j}"]))
                j += 1
            if "source" in row and row.get("source") not in (None, ""):
                source = row["source"]
            elif target_id is not None:
                source = "target" if row["trial_id"] == target_id else "reconstructed"
            else:
                source = "target"
            weight = float(row["weight"]) if row.get("weight") not in (None, "") else 1.0
            subjects.append(
                SubjectRecord(
                    trial_id=row["trial_id"],
                    z=int(row["z"]),
                    y=float(row["y"]),
                    x=tuple(xs),
                    weight=weight,
                    source=source,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"line {line}: cannot parse subject row ({exc})") from exc
    d = make_dataset(subjects, target_id or "")
    bad = [v for v in validate_dataset(d) if "dimension" in v]
    if bad:
        raise DataError("; ".join(bad))
    return d


def write_subjects(d, path, fmt=None, include_weight=True, include_source=True, stamp=None):
    """Write a Dataset to CSV or JSON, optionally with weight/source columns.

    ``stamp`` (a mapping) is written as leading ``# key=value`` comment
    lines in CSV output; the readers skip such lines.
    """
    path = Path(path)
    fmt = _detect_format(path, fmt)
    cols = ["trial_id", "z", "y"] + [f"x{j}" for j in range(1, d.p + 1)]
    if include_weight:
        cols.append("weight")
    if include_source:
        cols.append("source")
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            _write_stamp(fh, stamp)
            writer = csv.writer(fh)
            writer.writerow(cols)
            for s in d.subjects:
                row = [s.trial_id, s.z, repr(s.y)] + [repr(v) for v in s.x]
                if include_weight:
                    row.append(repr(s.weight))
                if include_source:
                    row.append(s.source)
                writer.writerow(row)
    elif fmt == "json":
        payload = []
        for s in d.subjects:
            row = {"trial_id": s.trial_id, "z": s.z, "y": s.y}
            for j, v in enumerate(s.x, start=1):
                row[f"x{j}"] = v
            if include_weight:
                row["weight"] = s.weight
            if include_source:
                row["source"] = s.source
            payload.append(row)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    else:
        raise DataError(f"unknown subject format {fmt!r}")
