"""Continual-learning step schedules, filtering, and relabeling.

An "X-Y" notation expands into one initial step of X classes followed by
Y-class steps until the class pool is exhausted.  Class-incremental steps
carry object class ids; domain-incremental steps carry domain ids and never
relabel.  Head channels are assigned in learning order, so the schedule also
owns the class-id <-> channel mapping used by the losses and metrics.
"""

from dataclasses import dataclass, field

import numpy as np

from .losses import IGNORE_LABEL, ClassPartition


@dataclass(frozen=True)
class TaskSchedule:
    mode: str  # "class_incremental" | "domain_incremental"
    steps: tuple  # per step: tuple of class ids (or domain ids)
    labeling: str = "overlapped"  # "disjoint" | "overlapped"; class mode only
    n_classes: int = 0  # total object classes (class mode: len of union)

    def __post_init__(self):
        flat = [c for step in self.steps for c in step]
        if len(set(flat)) != len(flat):
            raise ValueError("schedule steps must be pairwise disjoint")

    @property
    def n_steps(self):
        return len(self.steps)

    def classes_before(self, t):
        return [c for step in self.steps[:t] for c in step]

    def classes_at(self, t):
        return list(self.steps[t])

    def future_classes(self, t):
        return [c for step in self.steps[t + 1:] for c in step]

    def seen_classes(self, t):
        return self.classes_before(t) + self.classes_at(t)

    def channel_of(self, t=None):
        """class id -> head channel, in learning order (background stays 0).

        In domain mode every class is learned at step 0 in ascending order.
        """
        if self.mode == "domain_incremental":
            return {c: c for c in range(self.n_classes + 1)}
        order = [c for step in self.steps for c in step]
        mapping = {0: 0}
        mapping.update({c: i + 1 for i, c in enumerate(order)})
        return mapping

    def partition(self, t):
        """Channel-space class partition for step t."""
        if self.mode == "domain_incremental":
            return ClassPartition(n_old=0, n_new=self.n_classes)
        return ClassPartition(
            n_old=len(self.classes_before(t)), n_new=len(self.steps[t]))


def _parse_notation(notation, total):
    if notation == "joint":
        return None
    try:
        x, y = notation.split("-")
        x, y = int(x), int(y)
    except ValueError:
        raise ValueError(f"notation {notation!r} is not of the form X-Y") from None
    if x < 1 or y < 1:
        raise ValueError("X and Y must be positive")
    rem = total - x
    if rem <= 0 or rem % y != 0:
        raise ValueError(
            f"{notation} does not tile {total} items: {total} - {x} must be a positive multiple of {y}")
    return x, y


def build_schedule(notation, n_classes, labeling="overlapped", order=None):
    """Class-incremental schedule from "X-Y" notation (or "joint").

    ``order`` permutes object class ids 1..n_classes; a leading background 0
    (the convention used by published class orders) is tolerated and dropped.
    """
    if labeling not in ("disjoint", "overlapped"):
        raise ValueError(f"unknown labeling mode {labeling!r}")
    if order is None:
        order = list(range(1, n_classes + 1))
    order = [int(c) for c in order]
    if order and order[0] == 0:
        order = order[1:]
    if sorted(order) != list(range(1, n_classes + 1)):
        raise ValueError("order must be a permutation of the object class ids")
    parsed = _parse_notation(notation, n_classes)
    if parsed is None:
        steps = (tuple(order),)
    else:
        x, y = parsed
        steps = [tuple(order[:x])]
        for start in range(x, n_classes, y):
            steps.append(tuple(order[start : start + y]))
        steps = tuple(steps)
    return TaskSchedule(mode="class_incremental", steps=steps,
                        labeling=labeling, n_classes=n_classes)


def build_domain_schedule(notation, n_domains, n_classes):
    """Domain-incremental schedule: steps partition domain ids, the class set
    is fixed, and masks are never relabeled."""
    parsed = _parse_notation(notation, n_domains)
    domains = list(range(n_domains))
    if parsed is None:
        steps = (tuple(domains),)
    else:
        x, y = parsed
        steps = [tuple(domains[:x])]
        for start in range(x, n_domains, y):
            steps.append(tuple(domains[start : start + y]))
        steps = tuple(steps)
    return TaskSchedule(mode="domain_incremental", steps=steps,
                        labeling="overlapped", n_classes=n_classes)


def class_orders():
    """The five published 21-class orders (background leading) for 15-1 runs."""
    return {
        "A": [[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15],
              [16], [17], [18], [19], [20]],
        "B": [[0, 12, 9, 20, 7, 15, 8, 14, 16, 5, 19, 4, 1, 13, 2, 11],
              [17], [3], [6], [18], [10]],
        "C": [[0, 13, 19, 15, 17, 9, 8, 5, 20, 4, 3, 10, 11, 18, 16, 7],
              [12], [14], [6], [1], [2]],
        "D": [[0, 15, 3, 2, 12, 14, 18, 20, 16, 11, 1, 19, 8, 10, 7, 17],
              [6], [5], [13], [9], [4]],
        "E": [[0, 7, 5, 3, 9, 13, 12, 14, 19, 10, 2, 1, 4, 16, 8, 17],
              [15], [18], [6], [11], [20]],
    }


@dataclass
class StepDataset:
    images: np.ndarray  # (n, 3, h, w)
    masks: np.ndarray  # (n, h, w), labels in {0} | C_t | {ignore}
    provenance: list = field(default_factory=list)  # source pool indices

    def __len__(self):
        return self.images.shape[0]


def scene_classes(mask):
    present = np.unique(mask)
    return {int(c) for c in present if c != 0 and c != IGNORE_LABEL}


def filter_and_relabel(pool, sched, t):
    """Select the step-t training scenes and remap their masks.

    disjoint: drop scenes containing any future-step class, then map old
    classes to background.  overlapped: keep scenes containing at least one
    current class, map everything not current to background.
    """
    if t >= sched.n_steps:
        raise ValueError(f"step {t} out of range for a {sched.n_steps}-step schedule")
    if sched.mode == "domain_incremental":
        current = set(sched.steps[t])
        keep = [i for i in range(len(pool)) if int(pool.domains[i]) in current]
        if not keep:
            raise ValueError(f"no scenes for domains {sorted(current)} at step {t}")
        return StepDataset(images=pool.images[keep].copy(),
                           masks=pool.masks[keep].copy(), provenance=keep)

    current = set(sched.classes_at(t))
    future = set(sched.future_classes(t))
    keep = []
    for i in range(len(pool)):
        present = scene_classes(pool.masks[i])
        if sched.labeling == "disjoint":
            if present & future:
                continue
        else:
            if not (present & current):
                continue
        keep.append(i)
    if not keep:
        raise ValueError(f"step {t} selected no scenes; schedule or seed is degenerate")
    masks = pool.masks[keep].copy()
    relabel = ~np.isin(masks, list(current) + [0, IGNORE_LABEL])
    masks[relabel] = 0
    return StepDataset(images=pool.images[keep].copy(), masks=masks, provenance=keep)


def to_channel_space(mask, sched):
    """Map a class-id mask into head-channel space (ignore passes through)."""
    mapping = sched.channel_of()
    lut = np.zeros(IGNORE_LABEL + 1, dtype=np.int64)
    lut[IGNORE_LABEL] = IGNORE_LABEL
    for cls, ch in mapping.items():
        lut[cls] = ch
    return lut[mask]
