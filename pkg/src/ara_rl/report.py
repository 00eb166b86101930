"""CSV output and markdown tables for experiment results.

Everything renders from per-replication rows (dicts as written to
``results.csv``), so a report re-rendered from CSV is identical to the one
written at the end of a run.
"""

from __future__ import annotations

import csv
import math
import string
from typing import Iterable, Sequence

import numpy as np

from .harness import summarize
from .stats import MetricMatrix, SignificanceResult, significance

METRIC_TITLES = {
    "sum_reward": "Sum Reward",
    "steps_to_goal_mean": "Avg. Steps to Goal",
    "queue_length_mean": "Queue Length",
}
BASE_COLUMNS = (
    "algorithm", "replication", "sum_reward", "reward_per_step", "steps_to_goal_mean",
    "queue_length_mean", "final_rho", "learn_steps_used", "converged",
)


def _num(v) -> float:
    if v is None or v == "":
        return math.nan
    return float(v)


def _cell(v) -> str:
    if isinstance(v, float) and math.isnan(v):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


# -- CSV ---------------------------------------------------------------------

def write_rows(path, rows: Sequence[dict]) -> None:
    """Per-replication CSV; extra columns (learned values) follow the fixed ones."""
    extra = []
    for r in rows:
        extra += [k for k in r if k not in BASE_COLUMNS and k not in extra]
    cols = list(BASE_COLUMNS) + extra
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in cols])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


# -- aggregation -------------------------------------------------------------

def algorithm_order(rows: Sequence[dict]) -> list[str]:
    out = []
    for r in rows:
        if r["algorithm"] not in out:
            out.append(r["algorithm"])
    return out


def column(rows: Sequence[dict], label: str, key: str) -> list[float]:
    picked = sorted((r for r in rows if r["algorithm"] == label), key=lambda r: int(r["replication"]))
    return [_num(r.get(key)) for r in picked]


def present_metrics(rows: Sequence[dict]) -> list[str]:
    """Metric columns that carry values for every row."""
    keys = [k for k in BASE_COLUMNS[2:] if k != "converged"] + [k for k in rows[0] if k.startswith("value[")]
    return [k for k in keys if rows and all(not math.isnan(_num(r.get(k))) for r in rows)]


def aggregate(rows: Sequence[dict]) -> list[tuple]:
    """``(algorithm, metric, mean, stddev, n)`` for every present metric."""
    out = []
    for label in algorithm_order(rows):
        for m in present_metrics(rows):
            vals = column(rows, label, m)
            mean, sd = summarize(vals)
            out.append((label, m, mean, sd, len(vals)))
    return out


def significance_tests(rows: Sequence[dict], alpha: float = 0.05) -> dict[str, SignificanceResult]:
    """Friedman/Conover/BH per tabulated metric, when there are enough replications."""
    labels = algorithm_order(rows)
    present = present_metrics(rows)
    cols = {m: [column(rows, l, m) for l in labels] for m in METRIC_TITLES if m in present}
    out = {}
    for m, per_alg in cols.items():
        n = {len(c) for c in per_alg}
        if len(labels) < 2 or len(n) != 1 or n.pop() < 2:
            continue
        out[m] = significance(MetricMatrix(np.array(per_alg).T, tuple(labels)), alpha)
    return out


def pairwise_rows(res: SignificanceResult) -> list[tuple]:
    k = len(res.labels)
    return [
        (res.labels[i], res.labels[j], float(res.pairwise_p[i, j]), float(res.adjusted_p[i, j]))
        for i in range(k) for j in range(i + 1, k)
    ]


# -- markdown ----------------------------------------------------------------

def _fmt(v: float, digits: int = 3) -> str:
    return "" if math.isnan(v) else f"{v:.{digits}f}"


def _table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines)


def group_letters(res: SignificanceResult) -> dict[str, str]:
    """Letter codes per algorithm; algorithms sharing a letter are not significantly different."""
    letters = string.ascii_uppercase
    return {
        label: ",".join(letters[g - 1] if g <= len(letters) else str(g) for g in res.group_of(label))
        for label in res.labels
    }


def results_table(rows: Sequence[dict], tests: dict[str, SignificanceResult]) -> str:
    labels = algorithm_order(rows)
    metrics = [m for m in METRIC_TITLES if m in present_metrics(rows)]
    header = ["Algorithm"]
    for m in metrics:
        header += [f"{METRIC_TITLES[m]} Mean", f"{METRIC_TITLES[m]} StdDev"]
    header += [f"Group ({METRIC_TITLES[m]})" for m in metrics if m in tests]
    letters = {m: group_letters(tests[m]) for m in metrics if m in tests}
    body = []
    for label in labels:
        line = [label]
        for m in metrics:
            mean, sd = summarize(column(rows, label, m))
            line += [_fmt(mean), _fmt(sd)]
        line += [letters[m][label] for m in metrics if m in tests]
        body.append(line)
    return _table(header, body)


def rho_caption(rows: Sequence[dict]) -> str:
    parts = []
    for label in algorithm_order(rows):
        vals = [v for v in column(rows, label, "final_rho") if not math.isnan(v)]
        if vals:
            parts.append(f"{label} {np.mean(vals):.3f}")
    return "Inferred average reward: " + ", ".join(parts) + "." if parts else ""


def convergence_table(rows: Sequence[dict], state_label: str | None = None) -> str:
    """Learned values at the reported state per algorithm plus the steps needed to converge."""
    labels = algorithm_order(rows)
    value_cols = [k for k in rows[0] if k.startswith("value[") and k.endswith("]")]
    header = [""] + labels
    body = []
    for k in value_cols:
        action = k[len("value["):-1]
        name = f"State ({state_label}, {action})" if state_label is not None else f"({action})"
        body.append([name] + [_fmt(float(np.mean(column(rows, l, k)))) for l in labels])
    steps = [float(np.mean(column(rows, l, "learn_steps_used"))) / 1e6 for l in labels]
    body.append(["Steps in 10^6"] + [_fmt(s, 3) for s in steps])
    conv = []
    for l in labels:
        flags = column(rows, l, "converged")
        conv.append("yes" if all(f == 1 for f in flags) else f"{sum(f == 1 for f in flags)}/{len(flags)}")
    body.append(["Converged"] + conv)
    return _table(header, body)


def render_markdown(rows: Sequence[dict], title: str = "", state_label: str | None = None,
                    alpha: float = 0.05) -> str:
    """Full markdown report: result table, caption and significance details."""
    if not rows:
        return f"# {title or 'Results'}\n\nNo completed replications.\n"
    out = [f"# {title or 'Results'}", ""]
    n_reps = len({r["replication"] for r in rows})
    is_conv = any(r.get("converged", "") != "" for r in rows)
    if is_conv:
        out += [convergence_table(rows, state_label), ""]
        cap = rho_caption(rows)
        if cap:
            out += [cap, ""]
        return "\n".join(out)
    tests = significance_tests(rows, alpha)
    out += [results_table(rows, tests), ""]
    cap = rho_caption(rows)
    out += [f"Means and standard deviations over {n_reps} replications." + (f" {cap}" if cap else ""), ""]
    if tests:
        out += [f"Algorithms sharing a group letter are not significantly different "
                f"(Friedman, Conover post-hoc, Benjamini-Hochberg, FDR {alpha}).", ""]
    for m, res in tests.items():
        out += [f"## {METRIC_TITLES[m]}", "",
                f"Friedman chi-square {res.friedman_stat:.4f}, p = {res.friedman_p:.4g}.", ""]
        body = [[a, b, f"{p:.4g}", f"{q:.4g}"] for a, b, p, q in pairwise_rows(res)]
        out += [_table(["Algorithm A", "Algorithm B", "p", "adjusted p"], body), ""]
    return "\n".join(out)
