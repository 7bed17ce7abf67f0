"""Report figures, written straight to image files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curve(rows, path):
    """Total loss per logged step for both phases, plus held-out PSNR when present."""
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(rows))
    for phase, style in (("init", "C0"), ("joint", "C1")):
        idx = [i for i, r in enumerate(rows) if r["phase"] == phase]
        if idx:
            ax.plot(x[idx], [rows[i]["total"] for i in idx], style, label=f"{phase} loss")
    ax.set_xlabel("log entry")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ps = [(i, r["heldout_psnr"]) for i, r in enumerate(rows) if r.get("heldout_psnr") not in ("", None)]
    if ps:
        ax2 = ax.twinx()
        ax2.plot([p[0] for p in ps], [p[1] for p in ps], "C2.-", label="held-out PSNR")
        ax2.set_ylabel("PSNR (dB)")
        ax2.legend(loc="upper center")
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_tracks_3d(points, path, labels=None, title="3D trajectories"):
    """``points`` is ``(Q, F, 3)``; each trajectory is a polyline, start marked."""
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    for q, traj in enumerate(points):
        c = f"C{labels[q] % 10}" if labels is not None else f"C{q % 10}"
        ax.plot(traj[:, 0], traj[:, 2], -traj[:, 1], color=c, lw=1)
        ax.scatter(traj[0, 0], traj[0, 2], -traj[0, 1], color=c, s=6)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_zlabel("-y")
    ax.set_title(title)
    return _save(fig, path)


def plot_eval(names, values, path, ylabel="PSNR (dB)"):
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 4))
    ax.bar(range(len(values)), values, color="C0")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    return _save(fig, path)
