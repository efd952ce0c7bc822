"""Plot the per-epoch columns of one or more metrics CSVs written by ``confmix``.

    python scripts/plot_metrics.py runs/default/metrics_adapt.csv --out adapt.png
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_columns(path: Path) -> dict[str, list[float]]:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols: dict[str, list[float]] = {}
    for name in rows[0] if rows else []:
        try:
            cols[name] = [float(r[name]) for r in rows]
        except ValueError:
            continue  # non-numeric column
    return cols


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("csv", nargs="+", type=Path)
    parser.add_argument("--columns", nargs="+", help="columns to plot (default: every numeric one)")
    parser.add_argument("--out", type=Path, default=Path("metrics.png"))
    args = parser.parse_args(argv)

    tables = {p: read_columns(p) for p in args.csv}
    names = args.columns or sorted({c for t in tables.values() for c in t if c not in ("epoch", "t")})
    fig, axes = plt.subplots(len(names), 1, figsize=(7, 2.2 * len(names)), sharex=True, squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        for path, cols in tables.items():
            if name in cols:
                ax.plot(cols.get("epoch", range(1, len(cols[name]) + 1)), cols[name], label=path.parent.name)
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("epoch")
    axes[0, 0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.out, dpi=100)
    print(args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
