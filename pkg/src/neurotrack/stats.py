"""Wilcoxon signed-rank statistics and experiment-level accuracy reports."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.stats

from .errors import ArgumentError, DegenerateInputError

EXACT_MAX_N = 20
MIN_NONZERO = 5
ROUND_DECIMALS = 12
STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


@dataclass(frozen=True)
class WilcoxonResult:
    """``statistic`` is min(W+, W-); ``p_greater`` tests a positive shift."""

    statistic: float
    w_plus: float
    w_minus: float
    n: int
    p_greater: float
    p_less: float
    p_two_sided: float
    method: str

    @property
    def p_one_sided(self) -> float:
        return self.p_greater


def signed_ranks(x) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of ``|x|`` for the nonzero entries, and their signs.

    Differences are rounded to 12 decimals first so that float noise such as
    ``0.55 - 0.5 != 0.5 - 0.45`` cannot split a tie or hide a zero.
    """
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ArgumentError("differences must be finite")
    x = np.round(x, ROUND_DECIMALS)
    x = x[x != 0]
    return scipy.stats.rankdata(np.abs(x)), np.sign(x)


def exact_null_counts(ranks) -> tuple[np.ndarray, int]:
    """Number of sign vectors giving each value of ``2 * W+``.

    Ranks are doubled so tied (half-integer) ranks stay integral; index ``s``
    of the result counts the assignments with ``2 * W+ == s``.
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=float)).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return counts, 2 ** len(doubled)


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(x, method: str = "auto") -> WilcoxonResult:
    """Wilcoxon signed-rank test on paired differences ``x``.

    Zeros are dropped and tied magnitudes get average ranks.

    Parameters
    ----------
    x : array_like
        Paired differences; at least 5 must be nonzero.
    method : {"auto", "exact", "approx"}
        ``auto`` uses the exact null distribution for n <= 20 and the
        normal approximation (tie and continuity corrected) above.

    Returns
    -------
    WilcoxonResult
        ``p_greater`` = P(W+ >= observed), ``p_less`` = P(W+ <= observed),
        ``p_two_sided`` = min(1, 2 * min of the two).

    Raises
    ------
    DegenerateInputError
        If every difference is zero.
    ArgumentError
        If fewer than 5 differences are nonzero.
    """
    if method not in ("auto", "exact", "approx"):
        raise ArgumentError(f"unknown method {method!r}")
    ranks, signs = signed_ranks(x)
    n = ranks.size
    if n == 0:
        raise DegenerateInputError("all differences are zero")
    if n < MIN_NONZERO:
        raise ArgumentError(f"need at least {MIN_NONZERO} nonzero differences, got {n}")
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    use_exact = method == "exact" or (method == "auto" and n <= EXACT_MAX_N)
    if use_exact:
        counts, total = exact_null_counts(ranks)
        obs = int(round(2 * w_plus))
        p_greater = counts[obs:].sum() / total
        p_less = counts[: obs + 1].sum() / total
        label = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes**3 - tie_sizes) / 48.0
        sd = math.sqrt(var)
        p_greater = _normal_sf((w_plus - mean - 0.5) / sd)
        p_less = _normal_sf((mean - w_plus - 0.5) / sd)
        label = "normal"
    p_two = min(1.0, 2.0 * min(p_greater, p_less))
    return WilcoxonResult(
        statistic=min(w_plus, w_minus),
        w_plus=w_plus,
        w_minus=w_minus,
        n=n,
        p_greater=float(min(1.0, p_greater)),
        p_less=float(min(1.0, p_less)),
        p_two_sided=float(p_two),
        method=label,
    )


def stars(p: float) -> str:
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return "ns"


@dataclass(frozen=True)
class ChanceTest:
    stars: str
    p: float
    n: int
    median: float
    result: WilcoxonResult | None = None
    note: str = ""


def test_vs_chance(accuracies, chance: float = 0.5, method: str = "auto") -> ChanceTest:
    """One-sided Wilcoxon of ``accuracy - chance``; returns significance stars.

    All-equal-to-chance input is reported as ``"ns"`` with a warning.
    """
    acc = np.asarray(accuracies, dtype=float).ravel()
    if acc.size == 0:
        raise ArgumentError("no accuracies given")
    try:
        res = wilcoxon_signed_rank(acc - chance, method)
    except DegenerateInputError:
        warnings.warn("every accuracy equals chance level; reporting 'ns'", stacklevel=2)
        return ChanceTest("ns", 1.0, int(acc.size), float(np.median(acc)), None, "degenerate")
    return ChanceTest(stars(res.p_greater), res.p_greater, int(acc.size), float(np.median(acc)), res)


# Not a test function for pytest's collector.
test_vs_chance.__test__ = False


@dataclass(frozen=True)
class Comparison:
    test: str
    statistic: float
    p: float
    p_one_sided: float
    direction: str
    stars: str
    n: int
    note: str = ""


def compare_conditions(a, b, paired: bool = True, method: str = "auto") -> Comparison:
    """Two-sided comparison of per-subject accuracies of conditions ``a`` and ``b``.

    Paired data (same subject order) use the signed-rank test on ``a - b``;
    unpaired data use the Mann-Whitney U test. ``p_one_sided`` is for the
    observed direction.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ArgumentError("both conditions need at least one accuracy")
    if paired:
        if a.size != b.size:
            raise ArgumentError(f"paired comparison needs equal lengths, got {a.size} and {b.size}")
        try:
            res = wilcoxon_signed_rank(a - b, method)
        except DegenerateInputError:
            warnings.warn("conditions are identical for every subject; reporting p = 1", stacklevel=2)
            return Comparison("wilcoxon", 0.0, 1.0, 1.0, "a = b", "ns", int(a.size), "degenerate")
        if res.w_plus > res.w_minus:
            direction, p_one = "a > b", res.p_greater
        elif res.w_plus < res.w_minus:
            direction, p_one = "a < b", res.p_less
        else:
            direction, p_one = "a = b", min(res.p_greater, res.p_less)
        return Comparison(
            "wilcoxon", res.statistic, res.p_two_sided, p_one, direction,
            stars(res.p_two_sided), res.n,
        )
    res = scipy.stats.mannwhitneyu(a, b, alternative="two-sided")
    half = a.size * b.size / 2.0
    if res.statistic > half:
        direction = "a > b"
        p_one = scipy.stats.mannwhitneyu(a, b, alternative="greater").pvalue
    elif res.statistic < half:
        direction = "a < b"
        p_one = scipy.stats.mannwhitneyu(a, b, alternative="less").pvalue
    else:
        direction, p_one = "a = b", 1.0
    return Comparison(
        "mann-whitney", float(res.statistic), float(res.pvalue), float(p_one), direction,
        stars(float(res.pvalue)), int(a.size + b.size),
    )


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

REPORT_FIELDS = ("subject", "story", "model", "condition", "segment_length", "accuracy", "n_decisions")


@dataclass
class EvalReport:
    """One row per evaluated (subject, story, model, condition)."""

    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, subject, story, model, condition, segment_length, accuracy, n_decisions=None):
        if not 0.0 <= accuracy <= 1.0:
            raise ArgumentError(f"accuracy {accuracy} outside [0, 1]")
        key = (subject, story, model, condition, segment_length)
        if any(tuple(r[k] for k in REPORT_FIELDS[:5]) == key for r in self.rows):
            raise ArgumentError(f"duplicate report row for {key}")
        self.rows.append(
            dict(zip(REPORT_FIELDS, (subject, story, model, condition, segment_length,
                                     float(accuracy), n_decisions)))
        )

    def per_subject(self, model: str, condition: str) -> dict[str, float]:
        """Mean accuracy per subject over stories, subjects in sorted order."""
        acc = defaultdict(list)
        for r in self.rows:
            if r["model"] == model and r["condition"] == condition:
                acc[r["subject"]].append(r["accuracy"])
        return {s: float(np.mean(acc[s])) for s in sorted(acc)}

    def groups(self) -> list[tuple[str, str]]:
        return sorted({(r["model"], r["condition"]) for r in self.rows})

    def chance_tests(self) -> dict[tuple[str, str], ChanceTest]:
        out = {}
        for model, cond in self.groups():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                acc = list(self.per_subject(model, cond).values())
                out[model, cond] = _safe_chance(acc)
        return out

    def compare(self, a: tuple[str, str], b: tuple[str, str]) -> Comparison:
        """Compare two (model, condition) groups, paired when subjects match."""
        sa, sb = self.per_subject(*a), self.per_subject(*b)
        paired = list(sa) == list(sb)
        return compare_conditions(list(sa.values()), list(sb.values()), paired=paired)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(rows=[dict(r) for r in d["rows"]], meta=dict(d.get("meta", {})))

    def significance_table(self, comparisons=()) -> str:
        """Plain-text summary: per group median accuracy and stars vs chance,
        then the requested pairwise comparisons."""
        lines = [
            f"{'model':<14}{'condition':<10}{'n':>4}{'median':>9}{'p (vs 0.5)':>13}  sig",
        ]
        for (model, cond), t in self.chance_tests().items():
            lines.append(f"{model:<14}{cond:<10}{t.n:>4}{t.median:>9.3f}{t.p:>13.3g}  {t.stars}")
        for a, b in comparisons:
            c = self.compare(a, b)
            lines.append(
                f"{'/'.join(a)} vs {'/'.join(b)}: {c.test} p={c.p:.3g} ({c.stars}), {c.direction}"
            )
        lines.append("one-sided vs chance; two-sided between conditions; *: p<0.05, **: p<0.01, ***: p<0.001")
        return "\n".join(lines) + "\n"


def _safe_chance(acc) -> ChanceTest:
    try:
        return test_vs_chance(acc)
    except ArgumentError as exc:
        arr = np.asarray(acc, dtype=float)
        med = float(np.median(arr)) if arr.size else float("nan")
        return ChanceTest("ns", 1.0, int(arr.size), med, None, f"untestable: {exc}")


def comparison_rows(report: EvalReport, pairs) -> list[dict]:
    rows = []
    for a, b in pairs:
        c = report.compare(a, b)
        rows.append({"a": "/".join(a), "b": "/".join(b), **asdict(c)})
    return rows
