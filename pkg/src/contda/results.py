"""Run results: CSV persistence, aggregation, report tables, and plots."""

from __future__ import annotations

import csv
import dataclasses
import statistics
from pathlib import Path

from .errors import InputValidationError

RESULTS_COLUMNS = [
    "method",
    "backbone",
    "eta0",
    "grad_norm",
    "seed",
    "final_accuracy",
    "chunk_accuracies",
]


@dataclasses.dataclass
class RunResult:
    method: str
    backbone: str
    eta0: float
    grad_norm: bool
    seed: int
    final_accuracy: float
    chunk_accuracies: list

    def validate(self):
        accs = [self.final_accuracy, *self.chunk_accuracies]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise InputValidationError("accuracies must lie in [0, 1]")


def write_results_csv(rows: list, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_COLUMNS)
        for row in rows:
            row.validate()
            writer.writerow(
                [
                    row.method,
                    row.backbone,
                    f"{row.eta0:g}",
                    "on" if row.grad_norm else "off",
                    row.seed,
                    repr(row.final_accuracy),
                    " ".join(repr(a) for a in row.chunk_accuracies),
                ]
            )


def read_results_csv(path) -> list:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_COLUMNS:
            raise InputValidationError(
                f"{path}: unexpected results schema {reader.fieldnames}"
            )
        for rec in reader:
            rows.append(
                RunResult(
                    method=rec["method"],
                    backbone=rec["backbone"],
                    eta0=float(rec["eta0"]),
                    grad_norm=rec["grad_norm"] == "on",
                    seed=int(rec["seed"]),
                    final_accuracy=float(rec["final_accuracy"]),
                    chunk_accuracies=[float(v) for v in rec["chunk_accuracies"].split()],
                )
            )
    return rows


def _group(rows: list) -> dict:
    grouped: dict = {}
    for row in rows:
        key = (row.method, row.backbone, row.eta0, row.grad_norm)
        grouped.setdefault(key, []).append(row.final_accuracy)
    return grouped


def summarize_rows(rows: list) -> list:
    """Mean and stdev of final accuracy over seeds per configuration."""
    out = []
    for (method, backbone, eta0, grad_norm), accs in sorted(_group(rows).items()):
        out.append(
            {
                "method": method,
                "backbone": backbone,
                "eta0": eta0,
                "grad_norm": grad_norm,
                "n_seeds": len(accs),
                "mean_accuracy": statistics.fmean(accs),
                "std_accuracy": statistics.stdev(accs) if len(accs) > 1 else 0.0,
            }
        )
    return out


def build_report(rows: list) -> tuple:
    """Aggregate rows into a method x setting table with the best (and
    second best) per setting column marked; returns (text, csv rows)."""
    if not rows:
        raise InputValidationError("no result rows to report")
    summary = summarize_rows(rows)
    settings = sorted({(s["eta0"], s["grad_norm"]) for s in summary})
    methods = sorted({(s["method"], s["backbone"]) for s in summary})
    cell = {
        ((s["method"], s["backbone"]), (s["eta0"], s["grad_norm"])): s for s in summary
    }

    # rank within each setting column by mean accuracy
    for setting in settings:
        ranked = sorted(
            (m for m in methods if (m, setting) in cell),
            key=lambda m: cell[(m, setting)]["mean_accuracy"],
            reverse=True,
        )
        for rank, m in enumerate(ranked, start=1):
            cell[(m, setting)]["rank"] = rank

    header = ["method (backbone)"] + [
        f"eta0={eta0:g} gn={'on' if gn else 'off'}" for eta0, gn in settings
    ]
    lines = []
    csv_rows = []
    for m in methods:
        row_text = [f"{m[0]} ({m[1]})"]
        for setting in settings:
            s = cell.get((m, setting))
            if s is None:
                row_text.append("-")
                continue
            text = f"{s['mean_accuracy']:.4f}±{s['std_accuracy']:.4f}"
            if s["rank"] == 1:
                text = f"**{text}**"
            elif s["rank"] == 2:
                text = f"_{text}_"
            row_text.append(text)
            csv_rows.append(s)
        lines.append(row_text)

    widths = [max(len(r[i]) for r in [header, *lines]) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = "\n".join([fmt.format(*header)] + [fmt.format(*r) for r in lines])
    return text, csv_rows


def write_report_csv(csv_rows: list, path) -> None:
    fields = [
        "method",
        "backbone",
        "eta0",
        "grad_norm",
        "n_seeds",
        "mean_accuracy",
        "std_accuracy",
        "rank",
    ]
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in csv_rows:
            writer.writerow({k: rec[k] for k in fields})


def plot_accuracy_comparison(traces_by_setting: dict, path, title: str = "") -> None:
    """Accuracy-vs-chunk-index line plot, one line per grad-norm setting."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for grad_norm, trace in sorted(traces_by_setting.items()):
        accs = trace.chunk_accuracies()
        label = f"grad norm {'on' if grad_norm else 'off'}"
        ax.plot(range(1, len(accs) + 1), accs, marker="o", markersize=3, label=label)
    ax.set_xlabel("incoming chunk")
    ax.set_ylabel("target accuracy")
    ax.set_ylim(0.0, 1.0)
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
