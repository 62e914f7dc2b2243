"""Edit-distance metrics and evaluation reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


def levenshtein(a, b) -> int:
    """Edit distance between two sequences (vectorized row updates)."""
    a = list(a)
    b = list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    bn = np.asarray(b)
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        sub = prev[:-1] + (bn != x)
        dele = prev[1:] + 1
        np.minimum(sub, dele, out=sub)
        # insertion column depends on the running minimum, done in a scan
        running = cur[0]
        for j in range(1, len(b) + 1):
            running = min(sub[j - 1], running + 1)
            cur[j] = running
        prev = cur
    return int(prev[-1])


def levenshtein_reference(a, b) -> int:
    """Plain quadratic dynamic program, kept as the cross-check oracle."""
    a = list(a)
    b = list(b)
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[len(a)][len(b)]


def token_error_rate(decoded, reference) -> float:
    """Levenshtein distance divided by the reference length."""
    if not len(reference):
        return 0.0 if not len(decoded) else float(len(decoded))
    return levenshtein(decoded, reference) / len(reference)


@dataclass
class UtteranceResult:
    index: int
    length_bucket: int
    ref_len: int
    error_rate: float
    truncated: bool
    repetitions: int = -1  # stress tests only


@dataclass
class EvalReport:
    """Per-utterance error rates plus aggregate bookkeeping."""

    results: list[UtteranceResult] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, result: UtteranceResult) -> None:
        if result.error_rate < 0:
            raise ValueError("error rate must be >= 0")
        self.results.append(result)

    def mean_error(self, length_bucket: int | None = None) -> float:
        rows = [r for r in self.results if length_bucket is None or r.length_bucket == length_bucket]
        if not rows:
            return float("nan")
        return float(np.mean([r.error_rate for r in rows]))

    def buckets(self) -> list[int]:
        return sorted({r.length_bucket for r in self.results})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "length_bucket", "ref_len", "error_rate", "truncated", "repetitions"])
        for r in self.results:
            w.writerow([r.index, r.length_bucket, r.ref_len, repr(r.error_rate), int(r.truncated), r.repetitions])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        report = EvalReport()
        for row in rows[1:]:
            report.add(
                UtteranceResult(
                    index=int(row[0]),
                    length_bucket=int(row[1]),
                    ref_len=int(row[2]),
                    error_rate=float(row[3]),
                    truncated=bool(int(row[4])),
                    repetitions=int(row[5]),
                )
            )
        return report
