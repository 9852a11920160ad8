"""Intersection-over-union evaluation and report serialization."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .losses import IGNORE_LABEL
from .protocol import to_channel_space


@dataclass
class IoUReport:
    per_class_iou: dict  # class id -> iou in [0, 1]
    groups: dict  # class id -> "old" | "new" | "background"
    miou_old: float
    miou_new: float
    miou_all: float

    def rows(self):
        for cls in sorted(self.per_class_iou):
            yield cls, self.per_class_iou[cls], self.groups[cls]


def _group_mean(values):
    return float(np.mean(values)) if values else float("nan")


def evaluate(net, pool, sched, t, batch_size=16):
    """Per-class IoU over the validation pool at step t.

    Masks keep their original (never relabeled) ids; prediction happens in
    channel space and is mapped back for reporting.  Pixels of classes not
    yet learned are excluded, as are classes absent from both prediction and
    ground truth.  The old group includes background, mirroring the usual
    0..N / N+1..M / all column layout.
    """
    seen = sched.seen_classes(t)
    channel_map = sched.channel_of()
    n_channels = 1 + len(seen) if sched.mode == "class_incremental" else 1 + sched.n_classes
    tp = np.zeros(n_channels)
    fp = np.zeros(n_channels)
    fn = np.zeros(n_channels)
    for start in range(0, len(pool), batch_size):
        images = pool.images[start : start + batch_size]
        masks = pool.masks[start : start + batch_size]
        gt = to_channel_space(masks, sched)
        with no_grad():
            logits, _ = net.forward(Tensor(images), training=False)
        pred = logits.data.argmax(axis=1)
        valid = (gt != IGNORE_LABEL) & (gt < n_channels)
        for ch in range(n_channels):
            p = pred == ch
            g = gt == ch
            tp[ch] += np.sum(p & g & valid)
            fp[ch] += np.sum(p & ~g & valid)
            fn[ch] += np.sum(~p & g & valid)

    old_set = {0} | {channel_map[c] for c in sched.classes_before(t)}
    new_set = {channel_map[c] for c in sched.classes_at(t)}
    if sched.mode == "domain_incremental":
        old_set, new_set = {0}, set(range(1, n_channels))

    inverse = {ch: cls for cls, ch in channel_map.items()}
    per_class, groups = {}, {}
    old_vals, new_vals, all_vals = [], [], []
    for ch in range(n_channels):
        union = tp[ch] + fp[ch] + fn[ch]
        if union == 0:
            continue  # absent from prediction and ground truth alike
        iou = float(tp[ch] / union)
        cls = inverse[ch]
        per_class[cls] = iou
        groups[cls] = "background" if ch == 0 else ("old" if ch in old_set else "new")
        all_vals.append(iou)
        if ch in old_set:
            old_vals.append(iou)
        elif ch in new_set:
            new_vals.append(iou)
    return IoUReport(
        per_class_iou=per_class,
        groups=groups,
        miou_old=_group_mean(old_vals),
        miou_new=_group_mean(new_vals),
        miou_all=_group_mean(all_vals),
    )


def write_report_csv(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "iou", "group"])
        for cls, iou, group in report.rows():
            writer.writerow([cls, f"{iou:.6f}", group])
