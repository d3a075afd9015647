"""Report figures (matplotlib, non-interactive backend)."""

import hashlib
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _metadata(configs):
    text = json.dumps(configs, sort_keys=True)
    return {"Description": "config sha256 " + hashlib.sha256(text.encode()).hexdigest(),
            "Software": "minecomplex"}


def _step(x, y, x_end=None):
    """Staircase coordinates for a best-so-far change-point series."""
    x = list(x)
    y = list(y)
    if x_end is not None and x_end > x[-1]:
        x.append(x_end)
        y.append(y[-1])
    return x, y


def solve_figures(header, body, npv, out):
    """progress.png (best so far vs iteration and wall time) and npv.png."""
    s = body["series"]
    t = body["timing"]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 3.8))
    x, y = _step(s["iteration"], s["best"], t["iterations"])
    a1.step(x, y, where="post")
    a1.set_xlabel("iteration")
    a1.set_ylabel("best objective")
    x, y = _step(t["series_wall_s"], s["best"], t["wall_time_s"])
    a2.step(x, y, where="post", color="C1")
    a2.set_xlabel("wall time (s)")
    fig.suptitle(f"{header['method']}  seed {header['seed']}")
    fig.tight_layout()
    fig.savefig(out / "progress.png", dpi=110, metadata=_metadata(header["config"]))
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.8))
    ax.hist(np.asarray(npv), bins=min(40, max(5, len(npv) // 10)), color="0.7", edgecolor="0.4")
    for name, style in (("P10", ":"), ("P50", "-"), ("P90", "--")):
        v = body["npv_quantiles"][name]
        ax.axvline(v, color="k", linestyle=style, label=f"{name} {v:.3e}")
    ax.set_xlabel("NPV over joint scenarios")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "npv.png", dpi=110, metadata=_metadata(header["config"]))
    plt.close(fig)


def compare_figure(reports, reference, out):
    """Suboptimality relative to the cross-method best, log scale."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    colors = {}
    floor = None
    for h, b in reports:
        sub = (reference - np.asarray(b["series"]["best"])) / abs(reference)
        pos = sub[sub > 0]
        if len(pos):
            floor = pos.min() if floor is None else min(floor, pos.min())
    floor = 1e-6 if floor is None else floor / 2
    for h, b in reports:
        m = h["method"]
        c = colors.setdefault(m, f"C{len(colors)}")
        sub = (reference - np.asarray(b["series"]["best"])) / abs(reference)
        x, y = _step(b["series"]["iteration"], np.maximum(sub, floor), b["timing"]["iterations"])
        ax.step(x, y, where="post", color=c, alpha=0.7, label=m)
    handles, labels = ax.get_legend_handles_labels()
    seen = dict(zip(labels, handles))
    ax.legend(seen.values(), seen.keys())
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("primal suboptimality")
    fig.tight_layout()
    fig.savefig(out / "suboptimality.png", dpi=110,
                metadata=_metadata([h["config"] for h, _ in reports]))
    plt.close(fig)
