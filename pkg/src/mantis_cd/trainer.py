"""Training: multitask loss, Adam, the evolving-depth schedule, metrics and Pareto selection."""
from dataclasses import asdict, dataclass, field
import math
from pathlib import Path
import time

import numpy as np

from .ftnmt import FTConfig, ftnmt_avg, ftnmt_loss
from .pipeline import iterate_batches, stack_batch
from .substrate import no_grad, save_checkpoint

TASKS = ("segmentation", "boundary", "distance")
DEFAULT_STAGES = ((1e-3, 0), (1e-4, 10), (1e-5, 20))
FOURTH_STAGE = (1e-6, 30)
LOG_FIELDS = ("epoch", "stage", "lr", "depth", "train_loss", "val_loss", "val_mcc", "val_ftnmt", "train_f1",
              "elapsed")


class NumericalError(FloatingPointError):
    pass


def multitask_loss(preds, targets, depth=0):
    """Equal-weight mean of the segmentation, boundary and distance losses."""
    for task in TASKS:
        if task not in preds or task not in targets:
            raise KeyError(f"missing task {task!r}")
    total = None
    for task in TASKS:
        term = ftnmt_loss(preds[task], targets[task], depth)
        total = term if total is None else total + term
    return total * (1.0 / len(TASKS))


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if getattr(p, "trainable", True)]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.constraint is not None:
                np.clip(p.data, *p.constraint, out=p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class EvolveSchedule:
    stages: tuple = DEFAULT_STAGES
    patience: int = 10

    def __post_init__(self):
        self.stages = tuple((float(lr), int(d)) for lr, d in self.stages)
        if not self.stages:
            raise ValueError("at least one stage is required")
        lrs = [lr for lr, _ in self.stages]
        depths = [d for _, d in self.stages]
        if any(b >= a for a, b in zip(lrs, lrs[1:])):
            raise ValueError(f"learning rates must strictly decrease: {lrs}")
        if any(b < a for a, b in zip(depths, depths[1:])):
            raise ValueError(f"depths must not decrease: {depths}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    @classmethod
    def with_fourth_stage(cls, patience=10):
        return cls(DEFAULT_STAGES + (FOURTH_STAGE,), patience)


class PlateauTracker:
    """Advances through the schedule when the validation loss stops improving.

    After ``patience`` consecutive epochs without a new best the stage index
    moves forward once and the best value is reset, since the loss depth
    (and therefore its scale) changes with the stage.
    """

    def __init__(self, schedule):
        self.schedule = schedule
        self.stage = 0
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self):
        return self.schedule.stages[self.stage][0]

    @property
    def depth(self):
        return self.schedule.stages[self.stage][1]

    @property
    def last_stage(self):
        return self.stage == len(self.schedule.stages) - 1

    def update(self, val_loss):
        """Feed one epoch's validation loss; returns True when the stage advanced."""
        if val_loss < self.best:
            self.best, self.bad_epochs = val_loss, 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.schedule.patience and not self.last_stage:
            self.stage += 1
            self.best, self.bad_epochs = math.inf, 0
            return True
        return False


# metrics --------------------------------------------------------------------------------

def confusion_counts(pred_mask, gt_mask):
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    return tp, tn, fp, fn


def _ratio(num, den):
    return num / den if den else 0.0


def metrics_from_counts(tp, tn, fp, fn):
    """Precision, recall, F1, MCC and IoU; any zero denominator gives 0."""
    den = math.sqrt(float(tp + fp) * float(tp + fn) * float(tn + fp) * float(tn + fn))
    return {
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "mcc": _ratio(float(tp) * tn - float(fp) * fn, den),
        "iou": _ratio(tp, tp + fp + fn),
    }


def metrics(pred_mask, gt_mask):
    return metrics_from_counts(*confusion_counts(pred_mask, gt_mask))


# checkpoint selection -------------------------------------------------------------------

@dataclass
class CheckpointRecord:
    epoch: int
    mcc: float
    ftnmt: float
    path: str = None
    stage: int = 0
    lr: float = 0.0
    depth: int = 0
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    train_f1: float = float("nan")
    elapsed: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.mcc) and -1.0 <= self.mcc <= 1.0):
            raise ValueError(f"mcc {self.mcc} outside [-1, 1]")
        if not (math.isfinite(self.ftnmt) and 0.0 <= self.ftnmt <= 1.0):
            raise ValueError(f"ftnmt {self.ftnmt} outside [0, 1]")


def _point(r):
    return (r.mcc, r.ftnmt) if isinstance(r, CheckpointRecord) else tuple(r)


def dominates(a, b):
    return a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1])


def pareto_front(records):
    """Records not dominated by any other when maximising (mcc, ftnmt), in input order.

    Sorting by the first coordinate (descending, ties by the second) and
    sweeping with a running maximum of the second gives O(n log n).
    """
    records = list(records)
    if not records:
        raise ValueError("pareto_front of an empty set")
    pts = [_point(r) for r in records]
    order = sorted(range(len(pts)), key=lambda i: (-pts[i][0], -pts[i][1]))
    keep = set()
    best_y = -math.inf
    i = 0
    while i < len(order):
        # points with equal x: only those with maximal y in the group can survive
        j = i
        x = pts[order[i]][0]
        while j < len(order) and pts[order[j]][0] == x:
            j += 1
        group_y = pts[order[i]][1]
        if group_y > best_y:
            keep.update(k for k in order[i:j] if pts[k][1] == group_y)
            best_y = group_y
        i = j
    return [r for k, r in enumerate(records) if k in keep]


# training loop --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    augment: object = None
    out_dir: str = None
    val_depth: int = None
    checkpoint: bool = True
    threshold: float = 0.5


@dataclass
class StageSwitch:
    epoch: int
    stage: int
    depth: int
    baseline: float


@dataclass
class TrainRun:
    records: list = field(default_factory=list)
    switches: list = field(default_factory=list)
    stopped: str = "epochs"

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _predict_batches(model, chips, batch_size):
    with no_grad():
        for start in range(0, len(chips), batch_size):
            batch = stack_batch(chips[start : start + batch_size])
            yield batch, model(batch["t1"], batch["t2"])


def evaluate(model, chips, depth, batch_size=4, threshold=0.5):
    """Validation multitask loss, MCC and mean segmentation <FT>^depth."""
    counts = np.zeros(4, dtype=np.int64)
    loss_sum, ft_sum, n = 0.0, 0.0, 0
    for batch, out in _predict_batches(model, chips, batch_size):
        b = batch["t1"].shape[0]
        loss_sum += multitask_loss(out, batch, depth).item() * b
        ft = ftnmt_avg(out["segmentation"], batch["segmentation"], FTConfig(depth, (1, 2, 3)))
        ft_sum += float(ft.data.sum())
        pred = out["segmentation"].data[:, 1] > threshold
        counts += confusion_counts(pred, batch["segmentation"][:, 1] > 0.5)
        n += b
    stats = metrics_from_counts(*counts)
    return {"loss": loss_sum / n, "ftnmt": min(1.0, ft_sum / n), **stats}


def _check_finite(value, where):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at {where}")


def train(model, train_chips, val_chips, schedule=None, cfg=None, stop=None, log=None):
    """Fit ``model`` with the evolving schedule; returns a :class:`TrainRun`.

    Each epoch: one pass of Adam over shuffled (optionally augmented) train
    chips at the current stage depth, then validation loss, MCC and <FT> at
    the current depth (or ``cfg.val_depth``), a checkpoint and a log row.
    A plateau advances the stage; at that moment the validation 1 - <FT> at
    the new depth is recorded as the stage's baseline.  ``stop(record, run)``
    ends training early when it returns a reason string.
    """
    if not train_chips or not val_chips:
        raise ValueError("train and validation sets must be non-empty")
    schedule = schedule or EvolveSchedule()
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    tracker = PlateauTracker(schedule)
    opt = Adam(model.parameters(), lr=tracker.lr)
    run = TrainRun()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        if not log_path.exists():
            log_path.write_text(",".join(LOG_FIELDS) + "\n")
    model_config = model.cfg.to_dict() if hasattr(model, "cfg") else {}
    start = time.perf_counter()

    for epoch in range(cfg.epochs):
        depth = tracker.depth
        opt.lr = tracker.lr
        counts = np.zeros(4, dtype=np.int64)
        loss_sum, n = 0.0, 0
        for bi, batch in enumerate(iterate_batches(train_chips, cfg.batch_size, rng, cfg.augment)):
            opt.zero_grad()
            out = model(batch["t1"], batch["t2"])
            loss = multitask_loss(out, batch, depth)
            _check_finite(loss.item(), f"epoch {epoch} batch {bi} stage {tracker.stage} depth {depth}")
            loss.backward()
            opt.step()
            b = batch["t1"].shape[0]
            loss_sum += loss.item() * b
            n += b
            counts += confusion_counts(out["segmentation"].data[:, 1] > cfg.threshold,
                                       batch["segmentation"][:, 1] > 0.5)

        val_depth = depth if cfg.val_depth is None else cfg.val_depth
        val = evaluate(model, val_chips, val_depth, cfg.batch_size, cfg.threshold)
        _check_finite(val["loss"], f"validation after epoch {epoch}")
        path = None
        if out_dir is not None and cfg.checkpoint:
            path = str(out_dir / f"epoch_{epoch:04d}")
            save_checkpoint(path, model, model_config,
                            extra={"epoch": epoch, "mcc": val["mcc"], "ftnmt": val["ftnmt"], "depth": val_depth})
        record = CheckpointRecord(
            epoch=epoch, mcc=val["mcc"], ftnmt=val["ftnmt"], path=path, stage=tracker.stage, lr=opt.lr,
            depth=depth, train_loss=loss_sum / n, val_loss=val["loss"],
            train_f1=metrics_from_counts(*counts)["f1"], elapsed=time.perf_counter() - start,
        )
        run.records.append(record)
        row = {**asdict(record), "val_mcc": record.mcc, "val_ftnmt": record.ftnmt}
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(",".join(f"{row[k]}" for k in LOG_FIELDS) + "\n")
        if log is not None:
            log(record)

        if tracker.update(val["loss"]):
            new_depth = tracker.depth
            base = evaluate(model, val_chips, new_depth, cfg.batch_size, cfg.threshold)
            run.switches.append(StageSwitch(epoch, tracker.stage, new_depth, 1.0 - base["ftnmt"]))
        if stop is not None:
            reason = stop(record, run)
            if reason:
                run.stopped = reason
                break
    return run
