"""Survey report rendering: fixture loading, text report, delimited
output files, and matplotlib figures.

Fixture formats (CSV, UTF-8, header row):

  crosstabs:   group,row_factor,row_level_1,row_level_2,
               col_factor,col_level_1,col_level_2,a,b,c,d
  frequencies: group,label,count,base    (empty base = sum of the group)

``run_report`` prints the cross-tabulation results (counts, X^2, p, and a
significance flag at alpha = 0.05) plus the frequency tables, and when an
output directory is given also writes ``crosstabs_results.csv`` and
``frequencies.csv`` alongside one PNG figure per table.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .domain import BrokerError
from .stats import (
    ALPHA,
    ChiSquareResult,
    ContingencyTable2x2,
    FrequencyTable,
    pearson_chi_square,
    tabulate,
)


class FixtureError(BrokerError):
    pass


@dataclass(frozen=True)
class CrosstabEntry:
    group: str
    table: ContingencyTable2x2


@dataclass(frozen=True)
class FrequencyGroup:
    group: str
    counts: Dict[str, int]
    base: Optional[int]


def default_crosstabs_path() -> Path:
    return Path(str(resources.files("medbroker").joinpath("data/survey_crosstabs.csv")))


def default_frequencies_path() -> Path:
    return Path(str(resources.files("medbroker").joinpath("data/survey_frequencies.csv")))


def load_crosstabs(path: Union[str, Path]) -> List[CrosstabEntry]:
    entries: List[CrosstabEntry] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                table = ContingencyTable2x2(
                    a=int(row["a"]),
                    b=int(row["b"]),
                    c=int(row["c"]),
                    d=int(row["d"]),
                    row_factor=row["row_factor"],
                    col_factor=row["col_factor"],
                    row_labels=(row["row_level_1"], row["row_level_2"]),
                    col_labels=(row["col_level_1"], row["col_level_2"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FixtureError(f"{path}:{lineno}: bad crosstab row ({exc})") from exc
            entries.append(CrosstabEntry(group=row["group"], table=table))
    if not entries:
        raise FixtureError(f"{path}: no contingency tables found")
    return entries


def load_frequencies(path: Union[str, Path]) -> List[FrequencyGroup]:
    groups: Dict[str, FrequencyGroup] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                group = row["group"]
                label = row["label"]
                count = int(row["count"])
                base = int(row["base"]) if (row.get("base") or "").strip() else None
            except (KeyError, TypeError, ValueError) as exc:
                raise FixtureError(f"{path}:{lineno}: bad frequency row ({exc})") from exc
            if group not in groups:
                groups[group] = FrequencyGroup(group=group, counts={}, base=base)
            if label in groups[group].counts:
                raise FixtureError(f"{path}:{lineno}: duplicate label {label!r} in {group!r}")
            groups[group].counts[label] = count
    if not groups:
        raise FixtureError(f"{path}: no frequency groups found")
    return list(groups.values())


def analyze_crosstabs(entries: List[CrosstabEntry]) -> List[Tuple[CrosstabEntry, ChiSquareResult]]:
    return [(entry, pearson_chi_square(entry.table)) for entry in entries]


def analyze_frequencies(groups: List[FrequencyGroup]) -> List[Tuple[FrequencyGroup, FrequencyTable]]:
    return [(group, tabulate(group.counts, base=group.base)) for group in groups]


# ---------------------------------------------------------------------------
# Text report


def format_crosstab_report(results: List[Tuple[CrosstabEntry, ChiSquareResult]]) -> str:
    lines = ["Cross-tabulation analysis (Pearson chi-square, df=1)", ""]
    for entry, result in results:
        t = entry.table
        flag = "associated (p <= 0.05)" if result.significant else "independent"
        lines.append(f"[{entry.group}] {t.row_factor} x {t.col_factor}")
        width = max(len(t.row_labels[0]), len(t.row_labels[1]), 4)
        lines.append(f"  {'':{width}}  {t.col_labels[0]:>14} {t.col_labels[1]:>14}")
        lines.append(f"  {t.row_labels[0]:{width}}  {t.a:>14} {t.b:>14}")
        lines.append(f"  {t.row_labels[1]:{width}}  {t.c:>14} {t.d:>14}")
        lines.append(
            f"  X^2 = {result.statistic:.3f}   p = {result.p_value:.3f}   -> {flag}"
        )
        lines.append("")
    return "\n".join(lines)


def format_frequency_report(results: List[Tuple[FrequencyGroup, FrequencyTable]]) -> str:
    lines = ["Frequency tables (N, %)", ""]
    for group, table in results:
        lines.append(f"[{group.group}] N = {table.base}")
        width = max((len(r.label) for r in table.rows), default=4)
        for row in table.rows:
            lines.append(f"  {row.label:{width}}  {row.count:>6}  {row.percent:>6.1f}%")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Delimited outputs


def write_crosstab_csv(
    path: Union[str, Path], results: List[Tuple[CrosstabEntry, ChiSquareResult]]
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["group", "row_factor", "col_factor", "a", "b", "c", "d",
             "chi_square", "p_value", "significant"]
        )
        for entry, result in results:
            t = entry.table
            writer.writerow(
                [entry.group, t.row_factor, t.col_factor, t.a, t.b, t.c, t.d,
                 f"{result.statistic:.3f}", f"{result.p_value:.3f}",
                 "yes" if result.significant else "no"]
            )


def write_frequency_csv(
    path: Union[str, Path], results: List[Tuple[FrequencyGroup, FrequencyTable]]
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "label", "count", "base", "percent"])
        for group, table in results:
            for row in table.rows:
                writer.writerow([group.group, row.label, row.count, table.base, row.percent])


# ---------------------------------------------------------------------------
# Figures


def render_figures(
    out_dir: Union[str, Path],
    crosstab_results: List[Tuple[CrosstabEntry, ChiSquareResult]],
    frequency_results: List[Tuple[FrequencyGroup, FrequencyTable]],
) -> List[Path]:
    """One grouped-bar figure per contingency table and one percentage bar
    chart per frequency group; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    for entry, result in crosstab_results:
        t = entry.table
        fig, ax = plt.subplots(figsize=(5.5, 3.6))
        x = [0, 1]
        ax.bar([i - 0.18 for i in x], [t.a, t.c], width=0.36, label=t.col_labels[0])
        ax.bar([i + 0.18 for i in x], [t.b, t.d], width=0.36, label=t.col_labels[1])
        ax.set_xticks(x)
        ax.set_xticklabels(t.row_labels)
        ax.set_ylabel("respondents")
        ax.set_title(
            f"{t.row_factor} x {t.col_factor}\n"
            f"X$^2$={result.statistic:.3f}, p={result.p_value:.3f}"
            f"{' *' if result.significant else ''}",
            fontsize=10,
        )
        ax.legend(title=t.col_factor, fontsize=8)
        fig.tight_layout()
        path = out_dir / f"crosstab_{entry.group}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    for group, table in frequency_results:
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        labels = [r.label for r in table.rows]
        ax.barh(range(len(labels)), [r.percent for r in table.rows])
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels, fontsize=8)
        ax.invert_yaxis()
        ax.set_xlabel(f"% of N={table.base}")
        ax.set_title(group.group, fontsize=10)
        fig.tight_layout()
        path = out_dir / f"frequencies_{group.group}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    return written


def run_report(
    crosstabs_path: Optional[Union[str, Path]] = None,
    frequencies_path: Optional[Union[str, Path]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    figures: bool = True,
) -> str:
    """Analyze the fixtures and return the text report; optionally write
    the delimited results and figures under ``out_dir``."""
    crosstab_results = analyze_crosstabs(
        load_crosstabs(crosstabs_path or default_crosstabs_path())
    )
    frequency_results = analyze_frequencies(
        load_frequencies(frequencies_path or default_frequencies_path())
    )
    text = (
        format_crosstab_report(crosstab_results)
        + "\n"
        + format_frequency_report(frequency_results)
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_crosstab_csv(out_dir / "crosstabs_results.csv", crosstab_results)
        write_frequency_csv(out_dir / "frequencies.csv", frequency_results)
        if figures:
            render_figures(out_dir / "figures", crosstab_results, frequency_results)
    return text
