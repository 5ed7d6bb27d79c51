"""Chart emission: accuracy-vs-epoch and privacy-spend-vs-epoch SVGs.

Output is deterministic: text stays text (no font paths), element ids are
salted with a fixed string, and no creation date is embedded, so reruns on
the same metrics produce identical bytes.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .metrics import SummaryRow

# fixed per-method colors so the two charts and reruns agree
_COLORS = {
    "c": "#1f77b4",
    "cdp": "#d62728",
    "f": "#2ca02c",
    "fpdp": "#9467bd",
    "dopamine": "#ff7f0e",
}
_DETERMINISTIC_SVG = {"svg.fonttype": "none", "svg.hashsalt": "privfl"}


def _method_series(rows: list[SummaryRow], method: str):
    mine = sorted((r for r in rows if r.method == method), key=lambda r: r.round_index)
    return (
        [r.round_index for r in mine],
        [r.test_accuracy_mean for r in mine],
        [r.test_accuracy_std for r in mine],
    )


def _methods_in(rows: list[SummaryRow]) -> list[str]:
    seen: list[str] = []
    for r in rows:
        if r.method not in seen:
            seen.append(r.method)
    return seen


def _save(fig: Figure, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        with matplotlib.rc_context(_DETERMINISTIC_SVG):
            fig.savefig(tmp, format="svg", metadata={"Date": None}, bbox_inches="tight")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def chart_accuracy(rows: list[SummaryRow], path, delta: float | None = None) -> None:
    """Mean test accuracy per round for every method, one std band each."""
    if not rows:
        raise ValueError("no summary rows to chart")
    fig = Figure(figsize=(7, 4.5))
    ax = fig.subplots()
    for method in _methods_in(rows):
        rounds, mean, std = _method_series(rows, method)
        color = _COLORS.get(method, "#7f7f7f")
        ax.plot(rounds, mean, label=method, color=color)
        ax.fill_between(
            rounds,
            [m - s for m, s in zip(mean, std)],
            [m + s for m, s in zip(mean, std)],
            color=color, alpha=0.15, linewidth=0,
        )
    ax.set_xlabel("epoch (global round)")
    ax.set_ylabel("test accuracy")
    ax.set_title("Accuracy per epoch (mean and std across seeds)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    if delta is not None:
        fig.text(0.01, 0.01, f"DP methods use delta = {delta:g}", fontsize=8)
    _save(fig, path)


def chart_privacy(rows: list[SummaryRow], path, delta: float | None = None) -> None:
    """Cumulative privacy spend per round; only methods that reported one."""
    dp_methods = [
        m for m in _methods_in(rows)
        if any(r.method == m and r.epsilon_hat_mean is not None for r in rows)
    ]
    if not dp_methods:
        raise ValueError("no rows with a privacy spend to chart")
    fig = Figure(figsize=(7, 4.5))
    ax = fig.subplots()
    for method in dp_methods:
        mine = sorted(
            (r for r in rows if r.method == method and r.epsilon_hat_mean is not None),
            key=lambda r: r.round_index,
        )
        ax.plot(
            [r.round_index for r in mine],
            [r.epsilon_hat_mean for r in mine],
            label=method, color=_COLORS.get(method, "#7f7f7f"),
        )
    ax.set_xlabel("epoch (global round)")
    ax.set_ylabel("privacy spend (epsilon)")
    ax.set_title("Cumulative privacy spend per epoch")
    ax.legend()
    ax.grid(True, alpha=0.3)
    caption = f"delta = {delta:g}" if delta is not None else "delta as configured per run"
    fig.text(0.01, 0.01, caption, fontsize=8)
    _save(fig, path)
