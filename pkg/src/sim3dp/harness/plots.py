"""Bar charts and summary tables from metrics records."""
from __future__ import annotations

from pathlib import Path

import numpy as np

SETUP_ORDER = ("Original", "R+Su", "R+Sn", "R+Sn+P")


def group_label(rec: dict, split_demos: bool) -> str:
    label = rec.get("variant", "policy")
    if split_demos and "n_demos" in rec:
        label += f" ({rec['n_demos']} demos)"
    return label


def aggregate(records: list) -> dict:
    """{(label, setup): (mean, std, n_seeds)} over per-seed mean rewards.

    Each run seed's episodes (and checkpoints) are averaged first; the bar is
    the mean of those per-seed means and the error bar their population std.
    """
    split = len({r.get("n_demos") for r in records}) > 1
    per_seed = {}
    for r in records:
        key = (group_label(r, split), r["setup"])
        per_seed.setdefault(key, {}).setdefault(r.get("run_seed", 0), []).append(r["final_reward"])
    out = {}
    for key, seeds in per_seed.items():
        means = [float(np.mean(v)) for _, v in sorted(seeds.items())]
        out[key] = (float(np.mean(means)), float(np.std(means)), len(means))
    return out


def summary_table(agg: dict) -> str:
    labels = sorted({k[0] for k in agg})
    setups = [s for s in SETUP_ORDER if any(k[1] == s for k in agg)]
    setups += sorted({k[1] for k in agg} - set(setups))
    width = max(len(x) for x in labels + ["variant"])
    lines = ["variant".ljust(width) + "".join(f"  {s:>17s}" for s in setups)]
    for lab in labels:
        cells = []
        for s in setups:
            if (lab, s) in agg:
                m, sd, n = agg[(lab, s)]
                cells.append(f"  {m:7.3f} ± {sd:5.3f} ({n})")
            else:
                cells.append(f"  {'-':>17s}")
        lines.append(lab.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def plot_metrics(records: list, out_dir, name: str = "rewards") -> tuple:
    """Write ``<name>.png`` and ``<name>.txt``; returns their paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        raise ValueError("no metrics records to plot")
    agg = aggregate(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = sorted({k[0] for k in agg})
    setups = [s for s in SETUP_ORDER if any(k[1] == s for k in agg)]
    setups += sorted({k[1] for k in agg} - set(setups))

    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(setups), 3.2), dpi=100)
    width = 0.8 / len(labels)
    x = np.arange(len(setups))
    for i, lab in enumerate(labels):
        means = [agg.get((lab, s), (np.nan, 0, 0))[0] for s in setups]
        stds = [agg.get((lab, s), (0, 0, 0))[1] for s in setups]
        ax.bar(x + (i - (len(labels) - 1) / 2) * width, means, width, yerr=stds, capsize=3, label=lab)
    ax.set_xticks(x)
    ax.set_xticklabels(setups)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean final reward")
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    png = out / f"{name}.png"
    fig.savefig(png, metadata={"Software": None})
    plt.close(fig)
    txt = out / f"{name}.txt"
    txt.write_text(summary_table(agg))
    return png, txt
