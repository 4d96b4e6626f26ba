"""Per-step metrics log (CSV) and gradient-norm trend reports.

Floats are written with repr so the log round-trips bit-exactly; the
trend report consumes the grad_sq_norm column to check the two stepsize
regimes: a fixed stepsize should drive the running average of applied
squared gradient norms down to a positive plateau, a 1/(1+t) stepsize
should drive the stepsize-weighted average toward zero.
"""

import csv
from dataclasses import dataclass

CSV_HEADER = ["step", "wall_ms", "logical", "loss", "grad_sq_norm", "lr"]


@dataclass
class MetricsRow:
    step: int
    wall_ms: float
    logical: float
    loss: float
    grad_sq_norm: float
    lr: float


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._fh.write(",".join(CSV_HEADER) + "\n")

    def write(self, row):
        self._fh.write(
            f"{row.step},{row.wall_ms!r},{row.logical!r},{row.loss!r},"
            f"{row.grad_sq_norm!r},{row.lr!r}\n"
        )

    def close(self):
        self._fh.close()


def read_metrics(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected metrics header in {path}: {reader.fieldnames}")
        for rec in reader:
            rows.append(
                MetricsRow(
                    int(rec["step"]),
                    float(rec["wall_ms"]),
                    float(rec["logical"]),
                    float(rec["loss"]),
                    float(rec["grad_sq_norm"]),
                    float(rec["lr"]),
                )
            )
    return rows


def running_average(values):
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        out.append(acc / (i + 1))
    return out


def weighted_average(values, weights, upto):
    num = 0.0
    den = 0.0
    for v, w in zip(values[:upto], weights[:upto]):
        num += w * v
        den += w
    return num / den if den else 0.0


def gradient_norm_report(rows):
    """Trend summary over the applied squared gradient norms.

    The norms come from the assembled delayed packets, i.e. what the
    optimizer actually applied; that is a proxy for the true full-batch
    gradient norm, which is not observable during training.
    """
    grad_sq = [r.grad_sq_norm for r in rows]
    lrs = [r.lr for r in rows]
    n = len(grad_sq)
    if n == 0:
        raise ValueError("empty metrics log")
    run_avg = running_average(grad_sq)

    report = {
        "steps": n,
        "running_avg_final": run_avg[-1],
        "all_zero": all(v == 0.0 for v in grad_sq),
    }
    if n >= 9:
        first = sum(grad_sq[: n // 3]) / (n // 3)
        mid = sum(grad_sq[n // 3 : 2 * n // 3]) / (2 * n // 3 - n // 3)
        last = sum(grad_sq[2 * n // 3 :]) / (n - 2 * n // 3)
        report["thirds"] = [first, mid, last]
        denom = max(mid, 1e-300)
        report["plateau_ratio"] = abs(last - mid) / denom
        report["plateaus"] = (
            last > 0.0 and report["plateau_ratio"] < 0.25 and first >= last * 0.5
        )
    tenth = max(n // 10, 1)
    report["weighted_avg_early"] = weighted_average(grad_sq, lrs, tenth)
    report["weighted_avg_final"] = weighted_average(grad_sq, lrs, n)
    report["weighted_trending_down"] = (
        report["weighted_avg_final"] < report["weighted_avg_early"]
        or report["all_zero"]
    )
    return report
