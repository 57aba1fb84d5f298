"""Plain-text summary of the CSV artifacts in an output directory."""

from __future__ import annotations

from pathlib import Path

from .pipeline import GRAD_CSV, KL_CSV, ORACLE_CSV, SAMPLER_CSV, SCORE_CSV, TRAIN_CSV, VALIDATE_CSV, read_csv

SECTIONS = (
    (SCORE_CSV, "Score recovery (relative RMSE per node)"),
    (SAMPLER_CSV, "Sampler terminal moments"),
    (TRAIN_CSV, "Fine-tuning progress"),
    (ORACLE_CSV, "Exact LQG references for the fine-tuned policy"),
    (KL_CSV, "Path-space and terminal KL"),
    (GRAD_CSV, "Gradient estimators against finite differences"),
    (VALIDATE_CSV, "Invariant suite"),
)
MAX_ROWS = 60


def _short(value: str) -> str:
    try:
        x = float(value)
    except ValueError:
        return value
    return value if value.lstrip("-").isdigit() else format(x, ".6g")


def format_table(rows: list[dict], columns=None) -> str:
    if not rows:
        return "(empty)"
    columns = list(columns or rows[0].keys())
    cells = [columns] + [[_short(str(r.get(c, ""))) for c in columns] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _thin(rows: list[dict]) -> list[dict]:
    if len(rows) <= MAX_ROWS:
        return rows
    stride = -(-len(rows) // MAX_ROWS)
    kept = rows[::stride]
    return kept if kept[-1] is rows[-1] else kept + [rows[-1]]


def build_report(out_dir) -> tuple[str, list[str]]:
    """Return the report text and the list of CSV files it summarized."""
    out = Path(out_dir)
    parts, present = [], []
    for name, title in SECTIONS:
        path = out / name
        if not path.is_file():
            continue
        present.append(name)
        rows = read_csv(path)
        parts.append(f"== {title} [{name}, {len(rows)} rows]\n{format_table(_thin(rows))}\n")
    if VALIDATE_CSV in present:
        counts: dict = {}
        for r in read_csv(out / VALIDATE_CSV):
            ok, total = counts.get(r["module"], (0, 0))
            counts[r["module"]] = (ok + (r["passed"] == "true"), total + 1)
        summary = [{"module": m, "passed": f"{ok}/{total}"} for m, (ok, total) in counts.items()]
        parts.append("== Invariant pass counts per module\n" + format_table(summary) + "\n")
    return "\n".join(parts), present
