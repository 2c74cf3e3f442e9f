"""Plot-data tables and matplotlib figures from metrics logs.

Two kinds:

``clients-vs-score``
    one series per (scheme, method): mean and std of the metric across
    clients against the number of clients.
``ncl-best-vs-simclr``
    per (scheme, client count): the best non-contrastive method's mean
    next to SimCLR's.

Every figure is rendered from the same TSV rows it is saved next to.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .losses import NON_CONTRASTIVE  # noqa: E402
from .runner import cell_stats, final_client_records  # noqa: E402

KINDS = ("clients-vs-score", "ncl-best-vs-simclr")
SCHEME_LABELS = {"fedavg": "FedAVG", "fedbn": "FedBN", "fedprox": "FedProx"}
METHOD_LABELS = {"simclr": "SimCLR", "simsiam": "SimSiam", "barlow": "Barlow",
                 "vicreg": "VICReg", "tico": "TiCo"}

plt.rcParams.update({
    "figure.dpi": 100,
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
})


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def clients_vs_score_rows(records: Iterable[dict], metric: str = "weighted_f1") -> list[tuple]:
    """Rows ``(dataset, scheme, method, n_clients, mean, std)`` sorted by key."""
    cells = final_client_records(records)
    rows = []
    for (dataset, method, scheme, k), recs in cells.items():
        mean, std = cell_stats(recs, metric)
        rows.append((dataset, scheme, method, k, mean, std))
    return sorted(rows, key=lambda r: r[:4])


def ncl_best_rows(records: Iterable[dict], metric: str = "weighted_f1") -> tuple[list[tuple], list[tuple]]:
    """Rows ``(dataset, scheme, n_clients, ncl_best, ncl_best_method, simclr)`` and missing cells.

    A (dataset, scheme, K) group is emitted only when SimCLR and at least one
    non-contrastive method are present; otherwise it is reported as missing.
    """
    groups: dict[tuple, dict[str, float]] = {}
    for dataset, scheme, method, k, mean, _ in clients_vs_score_rows(records, metric):
        groups.setdefault((dataset, scheme, k), {})[method] = mean
    rows, missing = [], []
    for key in sorted(groups):
        means = groups[key]
        ncl = {m: v for m, v in means.items() if m in NON_CONTRASTIVE}
        absent = [m for m in ("simclr", *NON_CONTRASTIVE) if m not in means]
        if "simclr" not in means or not ncl:
            missing.append((*key, ",".join(absent)))
            continue
        best = max(sorted(ncl), key=lambda m: ncl[m])
        rows.append((*key, ncl[best], best, means["simclr"]))
        if absent:
            missing.append((*key, ",".join(absent)))
    return rows, missing


def write_tsv(path, header: Sequence[str], rows: Iterable[tuple]) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _plot_clients_vs_score(rows, out_dir: Path, metric: str) -> list[Path]:
    written = []
    for dataset, scheme in sorted({(r[0], r[1]) for r in rows}):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        sub = [r for r in rows if r[0] == dataset and r[1] == scheme]
        for method in sorted({r[2] for r in sub}):
            pts = sorted((r[3], r[4], r[5]) for r in sub if r[2] == method)
            xs, ys, es = zip(*pts)
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=METHOD_LABELS.get(method, method))
        ax.set_xlabel("number of clients")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_xticks(sorted({r[3] for r in sub}))
        ax.set_title(f"{dataset}: {SCHEME_LABELS.get(scheme, scheme)}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"clients_vs_score_{dataset}_{scheme}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def _plot_ncl_best(rows, out_dir: Path, metric: str) -> list[Path]:
    written = []
    for dataset, k in sorted({(r[0], r[2]) for r in rows}):
        sub = sorted((r for r in rows if r[0] == dataset and r[2] == k), key=lambda r: r[1])
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        xs = range(len(sub))
        width = 0.38
        ax.bar([x - width / 2 for x in xs], [r[3] for r in sub], width, label="NCL-Best")
        ax.bar([x + width / 2 for x in xs], [r[5] for r in sub], width, label="SimCLR")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([SCHEME_LABELS.get(r[1], r[1]) for r in sub])
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_title(f"{dataset}: {k} clients")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"ncl_best_vs_simclr_{dataset}_K{k}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def emit_plots(records: Sequence[dict], kind: str, out_dir, metric: str = "weighted_f1",
               figures: bool = True) -> dict:
    """Write the TSV for ``kind`` (and its PNG figures) into ``out_dir``.

    Returns ``{"data": path, "figures": [...], "missing": [...]}``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {', '.join(KINDS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(records)
    if kind == "clients-vs-score":
        rows = clients_vs_score_rows(records, metric)
        data = out / "clients_vs_score.tsv"
        write_tsv(data, ("dataset", "scheme", "method", "n_clients", "mean", "std"), rows)
        missing: list = []
        figs = _plot_clients_vs_score(rows, out, metric) if figures and rows else []
    else:
        rows, missing = ncl_best_rows(records, metric)
        data = out / "ncl_best_vs_simclr.tsv"
        write_tsv(data, ("dataset", "scheme", "n_clients", "ncl_best", "ncl_best_method", "simclr"), rows)
        figs = _plot_ncl_best(rows, out, metric) if figures and rows else []
    return {"data": data, "figures": figs, "missing": missing}
