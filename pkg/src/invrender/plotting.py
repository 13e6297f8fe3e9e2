"""Report figures written to image files (matplotlib, non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .images import GAMMA  # noqa: E402


def _display(img, exposure=1.0):
    return np.clip(np.asarray(img, dtype=np.float64) * exposure, 0, 1) ** (1 / GAMMA)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_history(history, path):
    """Composite loss, mean reconstruction loss and masked RMSE per epoch."""
    ep = np.array([h.epoch for h in history])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].semilogy(ep, [h.composite for h in history], label="composite")
    axes[0].semilogy(ep, [float(np.mean(h.recon)) for h in history], "--", label="mean recon")
    axes[0].set_xlabel("epoch")
    axes[0].legend()
    axes[1].plot(ep, [h.rmse for h in history], label="masked RMSE")
    mv = [float(np.mean(h.mvcl)) for h in history]
    if any(mv):
        ax2 = axes[1].twinx()
        ax2.plot(ep, mv, color="tab:red", alpha=0.6)
        ax2.set_ylabel("mean MVCL", color="tab:red")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("RMSE")
    split = [h.epoch for h in history if h.stage == 2]
    if split:
        for ax in axes:
            ax.axvline(split[0] - 0.5, color="gray", lw=0.8)
    _save(fig, path)


def plot_maps(maps, env, path, gt_maps=None, gt_env=None):
    """Diffuse, specular, roughness and environment, with ground truth underneath when given."""
    rows = 2 if gt_maps is not None else 1
    fig, axes = plt.subplots(rows, 4, figsize=(12, 3 * rows), squeeze=False)
    sets = [(maps, env, "estimate")]
    if gt_maps is not None:
        sets.append((gt_maps, gt_env, "ground truth"))
    for r, (m, e, label) in enumerate(sets):
        axes[r, 0].imshow(np.clip(m.diffuse, 0, 1), origin="upper")
        axes[r, 1].imshow(np.clip(m.specular, 0, 1), origin="upper")
        axes[r, 2].imshow(m.roughness, origin="upper", cmap="viridis", vmin=0, vmax=1)
        if e is not None:
            axes[r, 3].imshow(_display(e.radiance, 1.0 / max(1e-6, float(np.percentile(e.radiance, 99)))))
        for c, title in enumerate(("diffuse", "specular", "roughness", "environment")):
            axes[r, c].set_title(f"{title} ({label})", fontsize=9)
            axes[r, c].axis("off")
    _save(fig, path)


def plot_gradcheck(report, path):
    """Analytic versus finite-difference derivatives, one colour per map."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name in ("diffuse", "specular", "roughness", "environment"):
        rows = [r for r in report.rows if r.map == name]
        if rows:
            ax.scatter([r.fd for r in rows], [r.analytic for r in rows], s=12, label=name)
    vals = [abs(r.fd) for r in report.rows] + [abs(r.analytic) for r in report.rows]
    lim = max(vals) if vals else 1.0
    ax.plot([-lim, lim], [-lim, lim], color="gray", lw=0.8)
    ax.set_xlabel("finite difference")
    ax.set_ylabel("analytic")
    ax.set_title(f"p95 rel err {report.p95_rel:.2e}", fontsize=9)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_renders(images, path, titles=None, exposure=1.0):
    """A row of linear images, tone mapped for display."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    for i, img in enumerate(images):
        axes[0, i].imshow(_display(img, exposure))
        axes[0, i].axis("off")
        if titles:
            axes[0, i].set_title(titles[i], fontsize=9)
    _save(fig, path)


def plot_atlas(mesh, path, width=512):
    """Chart layout in uv space, each chart in its own colour."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ids = mesh.chart_ids if mesh.chart_ids is not None else np.zeros(mesh.n_faces, dtype=int)
    cmap = plt.get_cmap("tab20")
    from matplotlib.collections import PolyCollection

    polys = mesh.uvs
    ax.add_collection(PolyCollection(polys, facecolors=[cmap(i % 20) for i in ids], edgecolors="k", linewidths=0.1))
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_aspect("equal")
    ax.set_title(f"{int(ids.max()) + 1 if len(ids) else 0} charts", fontsize=9)
    _save(fig, path)
