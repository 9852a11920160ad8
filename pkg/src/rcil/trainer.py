"""Per-step training loop and the experiment driver.

A method is a named bundle of flags: branch structure (parallel branches,
merge/freeze at transitions, drop-path), which objectives run (plain or
background-absorbing cross-entropy and distillation), and whether feature
distillation participates.  The full method enables everything.
"""

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import distill as distill_mod
from . import losses as losses_mod
from .autograd import Tensor, no_grad
from .distill import DistillConfig
from .losses import ClassPartition, LossWeights
from .model import ArchSpec, SegNetwork, StepModel, make_step_model
from .optim import SGD, OptimizerState
from .protocol import filter_and_relabel, to_channel_space


class NanLossError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class MethodSpec:
    name: str
    two_branch: bool = False
    merge: bool = False
    freeze: bool = False
    drop_path: bool = False
    unbiased: bool = False
    logit_kd: bool = False
    pcd: bool = False

    def loss_terms(self, step):
        """Names of the objective terms active at a step (teacher terms need
        a previous step)."""
        terms = ["unce" if self.unbiased else "ce"]
        if step > 0:
            if self.logit_kd:
                terms.append("unkd" if self.unbiased else "kd")
            if self.pcd:
                terms.append("pcd")
        return tuple(terms)


METHODS = {
    "finetune": MethodSpec(name="finetune"),
    "lwf_logit_kd": MethodSpec(name="lwf_logit_kd", logit_kd=True),
    "mib": MethodSpec(name="mib", unbiased=True, logit_kd=True),
    "rc_only": MethodSpec(name="rc_only", two_branch=True, merge=True, freeze=True,
                          drop_path=True, unbiased=True, logit_kd=True),
    "pcd_only": MethodSpec(name="pcd_only", unbiased=True, logit_kd=True, pcd=True),
    "rc_pcd": MethodSpec(name="rc_pcd", two_branch=True, merge=True, freeze=True,
                         drop_path=True, unbiased=True, logit_kd=True, pcd=True),
}


def method_from_name(name, **overrides):
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(METHODS)}")
    spec = METHODS[name]
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(spec, **overrides) if overrides else spec


@dataclass
class TrainHyper:
    batch_size: int = 8
    epochs: int = 10
    lr_step0: float = 0.02
    lr_later: float = 0.001
    momentum: float = 0.9
    poly_power: float = 0.9
    flip: bool = True


def _flip_batch(images, labels, rng):
    out_i, out_l = images.copy(), labels.copy()
    for i in range(images.shape[0]):
        if rng.random() < 0.5:
            out_i[i] = out_i[i, :, :, ::-1]
            out_l[i] = out_l[i, :, ::-1]
    return out_i, out_l


def _domain_partitions(n_classes):
    # domain steps add no classes: cross-entropy sees everything as current,
    # distillation sees everything as old; the adaptive factor degenerates to 1
    return ClassPartition(n_old=0, n_new=n_classes), ClassPartition(n_old=n_classes, n_new=0)


def train_step(model, dataset, sched, t, method, hyper, weights, distill_cfg,
               seed, count_background=False, outdir=None):
    """Train the student for one continual step; returns (student, history).

    Every batch runs: student forward with fresh drop-path masks, a no-grad
    teacher forward when any teacher term is active, loss assembly per the
    method flags, backward, and one scheduled SGD step.
    """
    student, teacher = model.student, model.teacher
    if sched.mode == "domain_incremental":
        # every class is current for the CE, every class is old for the KD;
        # the adaptive factor then degenerates to 1
        part_ce, part_kd = _domain_partitions(sched.n_classes)
    else:
        part_ce = part_kd = sched.partition(t)
    labels_all = to_channel_space(dataset.masks, sched)

    n = len(dataset)
    order_rng = np.random.default_rng([seed, t, 0xB00])
    aug_rng = np.random.default_rng([seed, t, 0xF11])
    drop_rng = np.random.default_rng([seed, t, 0xD20]) if method.drop_path else None

    params = student.parameters()
    batches_per_epoch = (n + hyper.batch_size - 1) // hyper.batch_size
    opt_state = OptimizerState(
        base_lr=hyper.lr_step0 if t == 0 else hyper.lr_later,
        momentum=hyper.momentum,
        total_iterations=hyper.epochs * batches_per_epoch,
        poly_power=hyper.poly_power,
    )
    opt = SGD(params, opt_state)

    need_teacher = t > 0 and teacher is not None and (method.logit_kd or method.pcd)
    history = {"epochs": [], "iterations": []}
    for epoch in range(hyper.epochs):
        perm = order_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            images, labels = dataset.images[idx], labels_all[idx]
            if hyper.flip:
                images, labels = _flip_batch(images, labels, aug_rng)
            x = Tensor(images)
            logits_s, taps_s = student.forward(x, training=True, drop_path_rng=drop_rng)

            if method.unbiased:
                ce = losses_mod.unce_loss(logits_s, labels, part_ce)
            else:
                ce = losses_mod.unce_loss(logits_s, labels, ClassPartition(
                    n_old=0, n_new=logits_s.data.shape[1] - 1))
            unkd = skd = ckd = None
            if need_teacher:
                with no_grad():
                    logits_t, taps_t = teacher.forward(x, training=False)
                if method.logit_kd:
                    if method.unbiased:
                        unkd = losses_mod.unkd_loss(logits_s, logits_t, part_kd, labels=labels)
                    else:
                        unkd = losses_mod.plain_kd_loss(logits_s, logits_t, labels=labels)
                if method.pcd:
                    if distill_cfg.variant == "avg_cube":
                        skd = distill_mod.skd_loss(taps_t, taps_s, distill_cfg)
                        ckd = distill_mod.ckd_loss(taps_t, taps_s, distill_cfg)
                    else:
                        skd = distill_mod.distill_loss(taps_t, taps_s, distill_cfg)

            total = losses_mod.total_loss(
                ce, unkd, skd, ckd, part_ce, weights, count_background)

            value = total.item()
            if not np.isfinite(value):
                dump = {
                    "step": t, "epoch": epoch, "iteration": opt_state.iteration,
                    "loss": value, "method": method.name,
                }
                if outdir is not None:
                    Path(outdir).mkdir(parents=True, exist_ok=True)
                    (Path(outdir) / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                raise NanLossError(f"non-finite loss at step {t}, epoch {epoch}: {dump}")

            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_losses.append(value)
            history["iterations"].append(value)
        history["epochs"].append(float(np.mean(epoch_losses)))
    return student, history, opt


def build_network(arch, sched, rng, use_rc):
    n0 = sched.n_classes if sched.mode == "domain_incremental" else len(sched.steps[0])
    return SegNetwork(arch, n0, rng, use_rc=use_rc)


def next_step_model(prev_net, sched, t, method, head_shift):
    new_classes = 0 if sched.mode == "domain_incremental" else len(sched.steps[t])
    return make_step_model(prev_net, new_classes, merge=method.merge,
                           freeze=method.freeze, head_shift=head_shift)


# -- experiment driver --------------------------------------------------------

CHECKPOINT_FORMAT = 1
RESULTS_FORMAT = 1


def save_checkpoint(path, student, opt, step, config_hash, seed):
    """Versioned container: parameters with normalization statistics,
    optimizer state, the per-step rng derivation material, and the config
    hash that guards loading."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in student.state().items()}
    snap = opt.snapshot()
    for i, v in enumerate(snap["velocities"]):
        arrays[f"opt/v{i}"] = v
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "step": step,
        "optimizer": {"iteration": snap["iteration"],
                      "total_iterations": opt.state.total_iterations,
                      "base_lr": opt.state.base_lr},
        "rng": {"scheme": "per-step-derived", "seed": seed, "next_step": step + 1},
    }
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path, config_hash=None, force=False):
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta["format_version"] != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta['format_version']}")
        if config_hash is not None and meta["config_hash"] != config_hash and not force:
            raise ValueError(
                "checkpoint was written under a different configuration "
                "(pass force=True to load anyway)")
        params = {k[6:]: archive[k] for k in archive.files if k.startswith("param/")}
    return params, meta


def reconstruct_student(cfg, sched, t):
    """Rebuild the step-t network structure (transitions replayed, head grown)
    so a checkpoint's arrays can be loaded into it."""
    method = cfg.method()
    net = build_network(cfg.arch(), sched, np.random.default_rng([cfg.seed, 0x11A7]),
                        method.two_branch)
    for k in range(1, t + 1):
        net = next_step_model(net, sched, k, method, cfg.get("model.head_shift")).student
    return net


def _pool_cache_dir(root, spec, n, salt, domains):
    key = f"{spec.content_hash()}:{n}:{salt}:{tuple(domains)}"
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    return Path(root) / "cache" / digest


def _get_pool(cfg, salt, cache_root):
    from .data import build_pool, load_pool, save_pool

    spec = cfg.scene_spec()
    domain_mode = cfg.get("schedule.mode") == "domain"
    domains = tuple(range(cfg.get("schedule.n_domains"))) if domain_mode else (0,)
    n = cfg.get("data.n_train") if salt == 0 else cfg.get("data.n_val")
    if cfg.get("data.cache") and cache_root is not None:
        cache_dir = _pool_cache_dir(cache_root, spec, n, salt, domains)
        if (cache_dir / "manifest.json").exists():
            return load_pool(cache_dir, spec.content_hash())
        pool = build_pool(spec, n, salt=salt, domains=domains)
        save_pool(cache_dir, pool, spec.content_hash())
        return pool
    return build_pool(spec, n, salt=salt, domains=domains)


def _flush_results(run_dir, rows, curves):
    lines = ["format,step,group,miou"]
    lines += [f"{RESULTS_FORMAT},{t},{g},{v:.6f}" for t, g, v in rows]
    (Path(run_dir) / "results.csv").write_text("\n".join(lines) + "\n")
    lines = ["format,step,miou_old,miou_new,miou_all"]
    lines += [
        f"{RESULTS_FORMAT},{t},{o:.6f},{n:.6f},{a:.6f}" for t, o, n, a in curves]
    (Path(run_dir) / "curves.csv").write_text("\n".join(lines) + "\n")


def run_experiment(cfg, run_dir, resume=False, cache_root=None, log=None):
    """Iterate the schedule: build the step dataset, train, evaluate on the
    untouched validation pool, and persist metrics plus a checkpoint after
    every step.  Partial results are on disk before any abort."""
    from .metrics import evaluate, write_report_csv

    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    sched = cfg.schedule()
    method = cfg.method()
    hyper = cfg.hyper()
    weights = cfg.weights()
    dcfg = cfg.distill_config()
    head_shift = cfg.get("model.head_shift")
    count_bg = cfg.get("loss.count_background")
    train_pool = _get_pool(cfg, salt=0, cache_root=cache_root)
    val_pool = _get_pool(cfg, salt=1, cache_root=cache_root)

    rows, curves = [], []
    start_step, prev = 0, None
    if resume:
        for t in range(sched.n_steps - 1, -1, -1):
            ck = run_dir / "checkpoints" / f"step{t}.npz"
            if ck.exists():
                params, _ = load_checkpoint(ck, cfg.config_hash())
                prev = reconstruct_student(cfg, sched, t)
                prev.load_state(params)
                start_step = t + 1
                break
        if start_step and (run_dir / "results.csv").exists():
            for line in (run_dir / "results.csv").read_text().splitlines()[1:]:
                fmt, t, group, miou = line.split(",")
                if int(t) < start_step:
                    rows.append((int(t), group, float(miou)))
        if start_step and (run_dir / "curves.csv").exists():
            for line in (run_dir / "curves.csv").read_text().splitlines()[1:]:
                fmt, t, o, n, a = line.split(",")
                if int(t) < start_step:
                    curves.append((int(t), float(o), float(n), float(a)))

    reports = []
    for t in range(start_step, sched.n_steps):
        dataset = filter_and_relabel(train_pool, sched, t)
        if t == 0:
            net = build_network(cfg.arch(), sched,
                                np.random.default_rng([cfg.seed, 0x11A7]), method.two_branch)
            model = StepModel(student=net, teacher=None)
        else:
            model = next_step_model(prev, sched, t, method, head_shift)
        if log:
            log(f"step {t}: {len(dataset)} scenes, method={method.name}")
        student, history, opt = train_step(
            model, dataset, sched, t, method, hyper, weights, dcfg,
            seed=cfg.seed, count_background=count_bg, outdir=run_dir)
        report = evaluate(student, val_pool, sched, t)
        reports.append(report)
        rows += [(t, "old", report.miou_old), (t, "new", report.miou_new),
                 (t, "all", report.miou_all)]
        curves.append((t, report.miou_old, report.miou_new, report.miou_all))
        write_report_csv(report, run_dir / f"iou_step{t}.csv")
        (run_dir / f"history_step{t}.json").write_text(json.dumps(history))
        save_checkpoint(run_dir / "checkpoints" / f"step{t}.npz", student, opt,
                        t, cfg.config_hash(), cfg.seed)
        _flush_results(run_dir, rows, curves)
        if log:
            log(f"step {t}: mIoU old={report.miou_old:.3f} new={report.miou_new:.3f} "
                f"all={report.miou_all:.3f}")
        prev = student
    return rows, reports
