"""Report figures: ablation bars, per-class PR curves, tubelet score traces."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import EvalReport, match_detections  # noqa: E402
from .geometry import Detection, GroundTruthObject, boxes_to_array, iou_matrix  # noqa: E402
from .tubelets import Tubelet  # noqa: E402

# PNG metadata off so reruns produce identical bytes
_SAVE = dict(dpi=100, metadata={"Software": None})

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def ablation_bars(reports: Sequence[EvalReport], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        names = [r.method for r in reports]
        values = [100 * r.mean_ap for r in reports]
        ax.set_axisbelow(True)
        bars = ax.bar(range(len(names)), values, color="#4c72b0")
        for bar, v in zip(bars, values):
            ax.text(bar.get_x() + bar.get_width() / 2, v, f"{v:.1f}", ha="center", va="bottom", fontsize=8)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("mean AP (%)")
        fig.tight_layout()
        return _save(fig, path)


def pr_curves(per_method: dict[str, Sequence[Detection]], gts: Sequence[GroundTruthObject],
              class_id: int, class_name: str, path: Path, iou_thresh: float = 0.5) -> Optional[Path]:
    cgts = [g for g in gts if g.class_id == class_id]
    if not cgts:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.5))
        for method, dets in per_method.items():
            cdets = [d for d in dets if d.class_id == class_id]
            if not cdets:
                continue
            _, tp = match_detections(cdets, cgts, iou_thresh)
            ctp = np.cumsum(tp)
            ax.plot(ctp / len(cgts), ctp / np.arange(1, len(tp) + 1), label=method, lw=1.2)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(class_name)
        ax.legend(loc="lower left", fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def tubelet_traces(tubelets: Sequence[Tubelet], gts: Sequence[GroundTruthObject], path: Path,
                   limit: int = 4, class_names: Optional[Sequence[str]] = None) -> Optional[Path]:
    """Detector, tracker, offset and TCN scores of the longest tubelets against gt overlap."""
    picked = sorted((t for t in tubelets if t.boxes[0].tcn_score is not None), key=lambda t: -len(t))[:limit]
    if not picked:
        return None
    gt_by = {}
    for g in gts:
        gt_by.setdefault((g.video_id, g.class_id, g.frame), []).append(g.box)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(picked), 1, figsize=(6, 1.8 * len(picked)), squeeze=False)
        for ax, t in zip(axes[:, 0], picked):
            frames = [tb.frame for tb in t.boxes]
            overlap = []
            for tb in t.boxes:
                boxes = gt_by.get((t.video_id, t.class_id, tb.frame))
                overlap.append(float(iou_matrix(boxes_to_array([tb.box]), boxes_to_array(boxes)).max()) if boxes else 0.0)
            ax.plot(frames, [tb.det_score for tb in t.boxes], color="tab:red", lw=1, label="detection")
            ax.plot(frames, [tb.track_score for tb in t.boxes], color="goldenrod", lw=1, label="tracking")
            ax.plot(frames, [tb.anchor_offset_norm for tb in t.boxes], color="tab:green", lw=1, label="offset")
            ax.plot(frames, overlap, color="tab:blue", lw=1, label="gt overlap")
            ax.plot(frames, [tb.tcn_score for tb in t.boxes], color="purple", lw=1.6, label="tcn")
            label = class_names[t.class_id] if class_names else f"class {t.class_id}"
            ax.set_title(f"{t.video_id} {label}, anchor frame {t.anchor_frame}", fontsize=8)
        handles, labels = axes[0, 0].get_legend_handles_labels()
        fig.legend(handles, labels, ncol=5, fontsize=7, loc="upper center")
        axes[-1, 0].set_xlabel("frame")
        fig.tight_layout(rect=(0, 0, 1, 1 - 0.25 / len(picked)))
        return _save(fig, path)


def render_run_figures(out_dir: Path, reports: Sequence[EvalReport], method_dets: dict[str, Sequence[Detection]],
                       gts: Sequence[GroundTruthObject], class_names: Sequence[str],
                       rescored: Optional[Sequence[Tubelet]], iou_thresh: float = 0.5) -> list[Path]:
    out_dir = Path(out_dir)
    written = [ablation_bars(reports, out_dir / "ablation_map.png")]
    for c, name in enumerate(class_names):
        written.append(pr_curves(method_dets, gts, c, name, out_dir / f"pr_{name}.png", iou_thresh))
    if rescored:
        written.append(tubelet_traces(rescored, gts, out_dir / "tubelet_scores.png", class_names=class_names))
    return [p for p in written if p is not None]
