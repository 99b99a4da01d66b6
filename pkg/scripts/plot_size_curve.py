#!/usr/bin/env python3
"""Plot test metrics against extracted model width from a curve.tsv table.

Reads the tab-separated table written by `nestrec curve --out` or by
scripts/run_desk_experiment.py: a header row of widths, one row per metric,
comment lines starting with # ignored. A trailing "popularity baseline" line
(when present) is drawn as a dashed floor for each plotted metric.
"""

import argparse
import sys
from pathlib import Path


def read_curve(path):
    widths = None
    rows = {}
    floor = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = line.split("\t")
        if cells[0] == "metric":
            widths = [int(c) for c in cells[1:]]
        elif cells[0] == "popularity baseline":
            for cell in cells[1:]:
                name, _, value = cell.rpartition(" ")
                floor[name] = float(value)
        else:
            rows[cells[0]] = [float(c) for c in cells[1:]]
    if widths is None or not rows:
        raise SystemExit(f"{path} does not look like a curve table")
    return widths, rows, floor


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("curve", help="curve.tsv produced by the curve command")
    p.add_argument("--metrics", default="",
                   help="comma-separated subset, e.g. Recall@10,NDCG@10")
    p.add_argument("--out", default="size_curve.png")
    p.add_argument("--title", default="metrics by extracted width")
    args = p.parse_args(argv)

    widths, rows, floor = read_curve(args.curve)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if wanted:
        missing = [m for m in wanted if m not in rows]
        if missing:
            raise SystemExit(f"metrics not in {args.curve}: {missing} "
                             f"(have {sorted(rows)})")
        rows = {m: rows[m] for m in wanted}

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in rows.items():
        line, = ax.plot(widths, values, marker="o", label=name)
        if name in floor:
            ax.axhline(floor[name], linestyle="--", linewidth=0.8,
                       color=line.get_color(), alpha=0.6)
    ax.set_xscale("log", base=2)
    ax.set_xticks(widths)
    ax.set_xticklabels([str(w) for w in widths])
    ax.set_xlabel("extracted width")
    ax.set_ylabel("test metric")
    ax.set_title(args.title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
