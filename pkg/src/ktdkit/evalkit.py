"""Accuracy, AUROC / ROC points, pairwise discrimination tasks and the sweep harness."""
from __future__ import annotations

import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from . import losses, pipeline
from .datakit import Dataset
from .losses import ArcFaceConfig, DistillConfig, PCConfig
from .nets import NetworkSpec, WeightBundle


def accuracy(predictions, labels):
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError("predictions and labels must be equal-length non-empty sequences")
    return float(np.mean(p == y))


def argmax_predictions(scores):
    """Row-wise argmax; ``np.argmax`` already breaks ties towards the lowest index."""
    return np.argmax(np.asarray(scores), axis=1)


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be 0 or 1")
    pos = int(y.sum())
    if pos == 0 or pos == len(y):
        raise ValueError("AUROC needs both positive and negative examples")
    return s, y.astype(bool)


def auroc(scores, binary_labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Equal scores share their mid-rank, i.e. a tied positive/negative pair
    counts one half.
    """
    s, y = _binary(scores, binary_labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, binary_labels):
    """``(fpr, tpr)`` pairs from (0, 0) to (1, 1), one per distinct threshold."""
    s, y = _binary(scores, binary_labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    fpr = np.r_[0.0, fp / fp[-1]]
    tpr = np.r_[0.0, tp / tp[-1]]
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points):
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


@dataclass(frozen=True)
class BinaryTask:
    positive_class: str
    negative_classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "negative_classes", tuple(self.negative_classes))
        if self.positive_class in self.negative_classes:
            raise ValueError("positive class also listed as negative")
        if not self.negative_classes:
            raise ValueError("need at least one negative class")

    @property
    def name(self):
        return f"{self.positive_class}_vs_{'+'.join(self.negative_classes)}"


TRIAGE_TASKS = (
    BinaryTask("covid", ("normal",)),
    BinaryTask("covid", ("pneumonia",)),
    BinaryTask("covid", ("pneumonia", "normal")),
)
TRAJECTORY_TASKS = (
    BinaryTask("Worse", ("Improved",)),
    BinaryTask("Worse", ("Stable",)),
    BinaryTask("Worse", ("Improved", "Stable")),
)


def scores_for_task(probs, class_names, labels, task: BinaryTask):
    """Filter to the task's classes and score by the positive-class probability."""
    names = list(class_names)
    for c in (task.positive_class, *task.negative_classes):
        if c not in names:
            raise ValueError(f"task class {c!r} not among {names}")
    labels = np.asarray(labels)
    pos = names.index(task.positive_class)
    neg = [names.index(c) for c in task.negative_classes]
    keep = (labels == pos) | np.isin(labels, neg)
    return np.asarray(probs)[keep, pos], (labels[keep] == pos).astype(np.int64)


def task_scores(bundle: WeightBundle, spec: NetworkSpec, dataset: Dataset, task: BinaryTask):
    """Positive-class softmax probability (T=1) for every item in the task's classes."""
    present = set(it.class_label for it in dataset.items)
    for c in (task.positive_class, *task.negative_classes):
        if c not in present:
            raise ValueError(f"task class {c!r} has no items in the dataset")
    x, y = dataset.arrays()
    probs = losses.softmax(pipeline.predict_logits(spec, bundle, x))
    return scores_for_task(probs, dataset.class_names, y, task)


@dataclass
class EvalReport:
    accuracy: float
    auroc: dict = field(default_factory=dict)
    roc: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["roc"] = {k: [tuple(p) for p in v] for k, v in d["roc"].items()}
        return cls(**d)


def report_from_probs(probs, labels, class_names, tasks=(), config=None):
    labels = np.asarray(labels)
    rep = EvalReport(accuracy(argmax_predictions(probs), labels), config=dict(config or {}))
    for task in tasks:
        s, b = scores_for_task(probs, class_names, labels, task)
        rep.auroc[task.name] = auroc(s, b)
        rep.roc[task.name] = roc_points(s, b)
    return rep


def evaluate(spec: NetworkSpec, bundle: WeightBundle, dataset: Dataset, tasks=TRIAGE_TASKS, config=None):
    """Accuracy plus AUROC and ROC points for every task."""
    x, y = dataset.arrays()
    probs = losses.softmax(pipeline.predict_logits(spec, bundle, x))
    return report_from_probs(probs, y, dataset.class_names, tasks, config)


def write_roc_points(points, path):
    Path(path).write_text("".join(f"{f:.10f} {t:.10f}\n" for f, t in points))


# ---------------------------------------------------------------- sweep

@dataclass(frozen=True)
class LossVariant:
    kind: str
    xi: float = 0.8
    label: str = ""

    @property
    def name(self):
        if self.label:
            return self.label
        if self.kind == "pc":
            return f"PC(xi={self.xi})"
        return {"arcface": "ArcFace", "softmax": "SM"}[self.kind]


DEFAULT_LOSSES = (LossVariant("pc", 0.8), LossVariant("pc", 0.995), LossVariant("arcface"),
                  LossVariant("softmax"))


@dataclass(frozen=True)
class SweepGrid:
    alphas: tuple = (0.2, 0.4, 0.6, 0.8)
    temperatures: tuple = (5.0,)
    losses: tuple = DEFAULT_LOSSES
    seeds: tuple = (0,)

    def __post_init__(self):
        for name in ("alphas", "temperatures", "losses", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise ValueError(f"sweep axis {name!r} is empty")

    def cells(self):
        return [(a, t, l, s) for a in self.alphas for t in self.temperatures
                for l in self.losses for s in self.seeds]


def default_grids(seeds=(0,), losses=DEFAULT_LOSSES):
    """The two blocks: alpha rows at T=5, and T rows at alpha=0.8."""
    return (SweepGrid((0.2, 0.4, 0.6, 0.8), (5.0,), losses, seeds),
            SweepGrid((0.8,), (1.0, 5.0, 10.0), losses, seeds))


@dataclass
class SweepInputs:
    """Data and frozen teachers shared by every cell.

    ``teachers`` maps a seed to the fine-tuned teacher bundle used for
    that seed, so cells differ only in the distillation settings.
    """

    train: Dataset
    val: Dataset | None
    test: Dataset
    rf_spec: NetworkSpec
    teachers: dict
    train_config: pipeline.TrainConfig
    ms_builder: Callable = pipeline.ms_spec
    tasks: tuple = TRIAGE_TASKS
    arcface: ArcFaceConfig = ArcFaceConfig()


@dataclass
class SweepCell:
    alpha: float
    temperature: float
    loss: LossVariant
    seed: int
    report: EvalReport | None = None
    error: str | None = None
    detail: str | None = None

    @property
    def key(self):
        return (self.alpha, self.temperature, self.loss.name, self.seed)

    @property
    def failed(self):
        return self.error is not None


def distill_config_for(alpha, temperature, loss: LossVariant, arcface=ArcFaceConfig()):
    pc = PCConfig(loss.xi) if loss.kind == "pc" else PCConfig()
    return DistillConfig(alpha=alpha, temperature=temperature, student_loss=loss.kind, pc=pc, arcface=arcface)


def run_cell(inputs: SweepInputs, alpha, temperature, loss: LossVariant, seed) -> SweepCell:
    """One distillation run plus its evaluation; failures are captured, not raised."""
    cell = SweepCell(alpha, temperature, loss, seed)
    try:
        dc = distill_config_for(alpha, temperature, loss, inputs.arcface)
        ms = inputs.ms_builder(loss_kind=loss.kind, arcface_scale=inputs.arcface.scale_s)
        tc = replace(inputs.train_config, seed=seed)
        res = pipeline.distill_ms(inputs.teachers[seed], inputs.rf_spec, ms, inputs.train, dc, tc, val=inputs.val)
        echo = {"alpha": alpha, "temperature": temperature, "loss": loss.kind, "xi": loss.xi,
                "seed": seed, "best_epoch": res.state.best_epoch}
        cell.report = evaluate(ms, res.bundle, inputs.test, inputs.tasks, echo)
    except Exception as exc:  # noqa: BLE001 -- a bad cell must not sink the sweep
        cell.error = f"{type(exc).__name__}: {exc}"
        cell.report = None
        cell.detail = traceback.format_exc()
    return cell


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class SweepTable:
    cells: list

    def get(self, alpha, temperature, loss_name, seed):
        for c in self.cells:
            if c.key == (alpha, temperature, loss_name, seed):
                return c
        raise KeyError((alpha, temperature, loss_name, seed))

    def values(self, alpha, temperature, loss_name, metric="accuracy"):
        """Per-seed metric values for one (alpha, T, loss) combination, failed cells skipped."""
        out = []
        for c in sorted(self.cells, key=lambda c: c.seed):
            if (c.alpha, c.temperature, c.loss.name) == (alpha, temperature, loss_name) and not c.failed:
                out.append(c.report.accuracy if metric == "accuracy" else c.report.auroc[metric])
        return out

    def to_json(self):
        rows = [{"alpha": c.alpha, "temperature": c.temperature, "loss": asdict(c.loss), "seed": c.seed,
                 "report": None if c.report is None else asdict(c.report), "error": c.error}
                for c in self.cells]
        return json.dumps(rows, sort_keys=True, indent=1)


def run_sweep(grid, inputs: SweepInputs, jobs=1) -> SweepTable:
    """Run every (alpha, T, loss, seed) cell of one or more grids.

    Cells are independent, so they may run in ``jobs`` worker processes;
    duplicate cells across grids are run once. Results are sorted by key,
    making the table independent of execution order.
    """
    grids = grid if isinstance(grid, (list, tuple)) else (grid,)
    todo = {}
    for g in grids:
        for a, t, l, s in g.cells():
            todo.setdefault((a, t, l.name, s), (a, t, l, s))
    args = [(inputs, *v) for v in todo.values()]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            cells = list(ex.map(_run_cell_args, args))
    else:
        cells = [_run_cell_args(a) for a in args]
    cells.sort(key=lambda c: (c.alpha, c.temperature, c.loss.name, c.seed))
    return SweepTable(cells)


def _fmt(vals):
    if not vals:
        return "failed"
    per = "/".join(f"{v:.3f}" for v in vals)
    return f"{float(np.mean(vals)):.3f} [{per}]" if len(vals) > 1 else f"{vals[0]:.3f}"


def format_table(table: SweepTable, rows, row_name, fixed, losses=DEFAULT_LOSSES, metric="accuracy"):
    """Plain-text block: one row per alpha (or T), one column per loss variant.

    ``fixed`` is ``("T", value)`` or ``("alpha", value)``. Each cell shows
    the mean over seeds followed by the per-seed values.
    """
    fname, fval = fixed
    head = [row_name] + [l.name for l in losses]
    lines = [f"# {metric} ({fname}={fval:g})", "\t".join(head)]
    for r in rows:
        a, t = (r, fval) if fname == "T" else (fval, r)
        lines.append("\t".join([f"{r:g}"] + [_fmt(table.values(a, t, l.name, metric)) for l in losses]))
    return "\n".join(lines) + "\n"


def format_sweep(table: SweepTable, metric="accuracy", losses=DEFAULT_LOSSES,
                 alphas=(0.2, 0.4, 0.6, 0.8), temperatures=(1.0, 5.0, 10.0),
                 fixed_temperature=5.0, fixed_alpha=0.8):
    return (format_table(table, alphas, "alpha", ("T", fixed_temperature), losses, metric) + "\n"
            + format_table(table, temperatures, "T", ("alpha", fixed_alpha), losses, metric))
