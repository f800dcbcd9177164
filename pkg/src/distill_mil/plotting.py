"""Loss curves and AUROC-vs-bag-count figures from saved series files."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .types import ConfigError


class SeriesParseError(ConfigError):
    pass


def read_loss_log(path) -> list:
    """Epoch records from a JSON-lines training log."""
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise SeriesParseError(f"{path}:{n}: {e.msg}") from None
        if not isinstance(rec, dict) or "epoch" not in rec:
            raise SeriesParseError(f"{path}:{n}: record without an 'epoch' field")
        records.append(rec)
    if not records:
        raise SeriesParseError(f"{path}: empty series")
    return records


def read_sweep_series(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SeriesParseError(f"{path}:{e.lineno}: {e.msg}") from None
    series = data.get("series") if isinstance(data, dict) else None
    if not series:
        raise SeriesParseError(f"{path}: empty series")
    return series


def plot_loss_curves(records: list, out_path, title: str = "") -> Path:
    keys = [k for k in records[0] if k not in ("epoch", "valid_auroc")]
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in keys:
        ax.plot(epochs, [r.get(k, float("nan")) for r in records], label=k, lw=2 if k == "total" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_sweep(series: dict, out_dir, fmt: str = "png") -> list:
    """One figure per mean bag size, a VAT and a no-VAT curve in each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, conds in sorted(series.items(), key=lambda kv: int(kv[0])):
        fig, ax = plt.subplots(figsize=(6, 4))
        for cond, label in (("no_vat", "without VAT"), ("vat", "with VAT")):
            s = conds[cond]
            ax.errorbar(s["N"], s["mean"], yerr=s.get("std"), marker="o", capsize=3, label=label)
        ax.set_xlabel("number of training bags N")
        ax.set_ylabel("bag AUROC")
        ax.set_title(f"{k} instances per bag on average")
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"sweep_K{k}.{fmt}"
        fig.savefig(p)
        plt.close(fig)
        paths.append(p)
    return paths
