"""Datasets, patient-grouped splits, manifests and synthetic generators.

The synthetic triage images model the hard-sample setting: every image
shares one structured chest-like background, and class identity lives
only in a small jittered ROI patch. Longitudinal patients get an opacity
score per timepoint and an ROI opacity blob that grows with the score.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

POSITIONS = ("PA", "AP", "unknown")
MANIFEST_COLUMNS = ("path", "class", "patient_id", "position", "timepoint", "score")

#: The eight source-task diseases used for the multi-head pretraining set.
AP_DISEASES = ("atelectasis", "cardiomegaly", "effusion", "infiltration",
               "mass", "nodule", "pneumonia", "pneumothorax")
TRIAGE_CLASSES = ("covid", "pneumonia", "normal")
TRAJECTORY_LABELS = ("Worse", "Stable", "Improved")


@dataclass
class LabeledImage:
    pixels: np.ndarray
    class_label: str
    patient_id: str
    position: str = "unknown"
    timepoint: int | None = None
    opacity_score: float | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be a 2-D grid, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.position not in POSITIONS:
            raise ValueError(f"position must be one of {POSITIONS}, got {self.position!r}")

    def meta(self):
        return (self.class_label, self.patient_id, self.position, self.timepoint, self.opacity_score)


@dataclass
class Dataset:
    items: list
    class_names: tuple

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate class names")
        known = set(self.class_names)
        for i, item in enumerate(self.items):
            if item.class_label not in known:
                raise ValueError(f"item {i} has label {item.class_label!r} outside {self.class_names}")

    def __len__(self):
        return len(self.items)

    @property
    def num_classes(self):
        return len(self.class_names)

    def labels(self):
        index = {c: i for i, c in enumerate(self.class_names)}
        return np.array([index[it.class_label] for it in self.items], dtype=np.int64)

    def images(self):
        """``(N, 1, H, W)`` float64 array of all pixels."""
        if not self.items:
            return np.zeros((0, 1, 0, 0))
        return np.stack([it.pixels for it in self.items])[:, None]

    def arrays(self):
        return self.images(), self.labels()

    def class_index(self):
        """``{class name: item indices}``, the per-class partition."""
        out = {c: [] for c in self.class_names}
        for i, it in enumerate(self.items):
            out[it.class_label].append(i)
        return out

    def subset(self, indices):
        return Dataset([self.items[i] for i in indices], self.class_names)

    def filter_classes(self, names):
        keep = set(names)
        return Dataset([it for it in self.items if it.class_label in keep],
                       tuple(c for c in self.class_names if c in keep))


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.7, 0.1, 0.2)
    seed: int = 0
    group_by_patient: bool = True
    stratify: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


def apportion(total, ratios):
    """Largest-remainder integer split of ``total`` (ties go to the earlier slot)."""
    exact = [total * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_patient(items, spec: SplitSpec = SplitSpec(), patient_of: Callable | None = None,
                     class_of: Callable | None = None):
    """Partition ``items`` (a :class:`Dataset` or a plain list) into train/val/test.

    Patients are sorted by id, shuffled with ``spec.seed`` and handed out
    one at a time to whichever split is furthest below its largest-remainder
    target, separately per class when ``spec.stratify`` is set. A patient
    with images in several classes is stratified under its most frequent
    class. All of a patient's items land in the same split.
    """
    dataset = items if isinstance(items, Dataset) else None
    seq = dataset.items if dataset is not None else list(items)
    patient_of = patient_of or (lambda it: it.patient_id)
    class_of = class_of or (lambda it: getattr(it, "class_label", ""))
    groups: dict = {}
    for i, it in enumerate(seq):
        if spec.group_by_patient:
            key = patient_of(it)
            if key is None or key == "":
                raise ValueError(f"item {i} has no patient id")
            key = str(key)
        else:
            key = f"#{i:09d}"
        groups.setdefault(key, []).append(i)

    class_order = list(dataset.class_names) if dataset is not None else sorted({class_of(it) for it in seq})
    strata: dict = {c: [] for c in class_order} if spec.stratify else {"": []}
    for key in sorted(groups):
        if spec.stratify:
            labels = [class_of(seq[i]) for i in groups[key]]
            primary = max(class_order, key=lambda c: (labels.count(c), -class_order.index(c)))
            strata[primary].append(key)
        else:
            strata[""].append(key)
    if dataset is not None and spec.stratify:
        empty = [c for c in class_order if not strata[c]]
        if empty:
            raise ValueError(f"classes with no items: {empty}")

    rng = np.random.default_rng(spec.seed)
    out = ([], [], [])
    for name in strata:
        keys = list(strata[name])
        if not keys:
            continue
        perm = rng.permutation(len(keys))
        keys = [keys[i] for i in perm]
        total = sum(len(groups[k]) for k in keys)
        target = apportion(total, spec.ratios)
        have = [0, 0, 0]
        for k in keys:
            size = len(groups[k])
            split = max(range(3), key=lambda s: (target[s] - have[s], -s))
            have[split] += size
            out[split].extend(groups[k])
    parts = tuple(sorted(o) for o in out)
    if dataset is not None:
        return tuple(dataset.subset(p) for p in parts)
    return tuple([seq[i] for i in p] for p in parts)


# ---------------------------------------------------------------- synthetic data

def _name_rng(seed, *names):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF] + [zlib.crc32(n.encode()) for n in names])


def background_template(size, world_seed=0):
    """Shared chest-like background: bright body, two darker lung fields, ribs."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    rng = _name_rng(world_seed, "background")
    img = 0.55 + 0.1 * (1 - yy) + 0.03 * rng.standard_normal()
    for cx in (0.3, 0.7):
        lung = ((xx - cx) / 0.17) ** 2 + ((yy - 0.5) / 0.33) ** 2
        img -= 0.25 * np.exp(-lung ** 2)
    img += 0.03 * np.sin(2 * np.pi * 5.5 * yy + rng.uniform(0, np.pi))
    return np.clip(img, 0.05, 0.95)


def class_template(name, roi_size, world_seed=0, empty=()):
    """Fixed ROI signature of a class: a few signed Gaussian bumps, max |value| 1."""
    if name in empty:
        return np.zeros((roi_size, roi_size))
    rng = _name_rng(world_seed, "class", name)
    yy, xx = np.mgrid[0:roi_size, 0:roi_size] + 0.5
    patch = np.zeros((roi_size, roi_size))
    for _ in range(3):
        cy, cx = rng.uniform(1, roi_size - 1, size=2)
        sigma = rng.uniform(0.8, 2.0)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
        patch += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return patch / np.abs(patch).max()


@dataclass(frozen=True)
class TriageConfig:
    class_names: tuple = TRIAGE_CLASSES
    images_per_class: int = 200
    image_size: int = 32
    seed: int = 0
    world_seed: int = 0
    roi_size: int = 8
    roi_center: tuple = (14, 10)
    contrast: float = 0.24
    noise: float = 0.10
    jitter: int = 2
    images_per_patient: int = 1
    empty_classes: tuple = ("normal",)
    #: per-image ROI strength is ``contrast * U(*contrast_range)``
    contrast_range: tuple = (0.8, 1.2)
    #: fraction of items whose recorded label is replaced by another class
    label_noise: float = 0.0


def synth_triage(config: TriageConfig = TriageConfig()) -> Dataset:
    """Generate a hard-sample classification set (deterministic per config).

    Images differ only in noise, a small global brightness jitter, and the
    ROI patch (class template, position jitter). ``world_seed`` fixes the
    background and templates, so sets generated with different ``seed``
    share them, and a class name means the same pattern in every set.
    """
    c = config
    if c.images_per_class < 1 or not c.class_names:
        raise ValueError("need at least one class and one image per class")
    if c.roi_size + 2 * c.jitter > c.image_size:
        raise ValueError("image is smaller than the ROI plus its jitter")
    cy, cx = c.roi_center
    half = c.roi_size // 2
    if not (c.jitter <= cy - half and cy - half + c.roi_size + c.jitter <= c.image_size
            and c.jitter <= cx - half and cx - half + c.roi_size + c.jitter <= c.image_size):
        raise ValueError("ROI does not fit inside the image")
    bg = background_template(c.image_size, c.world_seed)
    rng = np.random.default_rng(c.seed)
    items = []
    for name in c.class_names:
        tpl = class_template(name, c.roi_size, c.world_seed, c.empty_classes)
        for i in range(c.images_per_class):
            img = bg + c.noise * rng.standard_normal(bg.shape) + rng.normal(0.0, 0.02)
            dy, dx = rng.integers(-c.jitter, c.jitter + 1, size=2)
            y0, x0 = cy - half + dy, cx - half + dx
            img[y0:y0 + c.roi_size, x0:x0 + c.roi_size] += c.contrast * rng.uniform(*c.contrast_range) * tpl
            pid = f"{name}-{c.seed}-{i // c.images_per_patient:04d}"
            pos = POSITIONS[int(rng.integers(0, 2))]
            label = name
            if c.label_noise > 0 and rng.random() < c.label_noise:
                others = [o for o in c.class_names if o != name]
                label = others[int(rng.integers(0, len(others)))]
            items.append(LabeledImage(np.clip(img, 0.0, 1.0), label, pid, pos))
    return Dataset(items, c.class_names)


@dataclass
class ScoredImage:
    image: LabeledImage
    opacity_score: float
    timepoint: int

    def __post_init__(self):
        if not math.isfinite(self.opacity_score):
            raise ValueError("opacity score must be finite")


@dataclass(frozen=True)
class LongitudinalConfig:
    n_patients: int = 100
    #: how many patients have 2, 3, 4, 5 ... timepoints (index 0 -> 2 timepoints)
    timepoint_counts: tuple = (56, 33, 7, 4)
    #: relative frequency of Worse / Stable / Improved steps
    mix: tuple = (80, 28, 51)
    reversal_fraction: float = 0.25
    image_size: int = 32
    seed: int = 0
    world_seed: int = 0
    roi_size: int = 8
    roi_center: tuple = (14, 10)
    contrast: float = 0.22
    noise: float = 0.06
    score_max: float = 8.0
    opacity_gain: float = 0.045
    #: half-width of the noise-free window around the ROI
    roi_window: int = 6
    #: how strongly a patient's net trend sets their severity level
    #: (0: level uniform over the admissible range; larger: worsening
    #: patients sit low on the scale and improving ones high)
    level_coupling: float = 3.0


def _step_increment(label, rng):
    if label == "Worse":
        return rng.uniform(0.4, 1.0)
    if label == "Improved":
        return -rng.uniform(0.4, 1.0)
    return rng.uniform(-0.2, 0.2)


def opacity_image(bg, score, config: LongitudinalConfig, offset, rng):
    """Render one follow-up image; ROI intensity rises strictly with ``score``."""
    c = config
    size = c.image_size
    cy, cx = c.roi_center[0] + offset[0], c.roi_center[1] + offset[1]
    half = c.roi_size // 2
    img = bg.copy()
    tpl = class_template("covid", c.roi_size, c.world_seed)
    img[cy - half:cy - half + c.roi_size, cx - half:cx - half + c.roi_size] += c.contrast * tpl
    yy, xx = np.mgrid[0:size, 0:size]
    sigma = 1.5 + 0.25 * score
    img += c.opacity_gain * score * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    window = roi_window_mask(config, offset)
    img += (~window) * c.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def roi_window_mask(config: LongitudinalConfig, offset=(0, 0)):
    c = config
    cy, cx = c.roi_center[0] + offset[0], c.roi_center[1] + offset[1]
    mask = np.zeros((c.image_size, c.image_size), dtype=bool)
    w = c.roi_window
    mask[max(cy - w, 0):cy + w, max(cx - w, 0):cx + w] = True
    return mask


def synth_longitudinal(config: LongitudinalConfig = LongitudinalConfig()):
    """Per-patient chronological :class:`ScoredImage` lists.

    Step labels are apportioned exactly to ``config.mix`` over all
    consecutive pairs, laid out so most patients follow one trend, then a
    ``reversal_fraction`` of random swaps between patients adds reversals.
    Score increments are at least 0.4 in magnitude for Worse/Improved
    steps and at most 0.2 for Stable ones, so the +-0.3 rule recovers them.
    """
    c = config
    if len(c.mix) != 3 or any(m < 0 for m in c.mix) or sum(c.mix) <= 0:
        raise ValueError("mix must be three non-negative weights with a positive sum")
    if sum(c.timepoint_counts) != c.n_patients:
        raise ValueError(f"timepoint_counts {c.timepoint_counts} must sum to n_patients={c.n_patients}")
    if not c.timepoint_counts:
        raise ValueError("need at least one patient group")
    rng = np.random.default_rng(c.seed)
    lengths = [k + 2 for k, n in enumerate(c.timepoint_counts) for _ in range(n)]
    lengths = [lengths[i] for i in rng.permutation(len(lengths))]
    steps_total = sum(n - 1 for n in lengths)
    total_mix = sum(c.mix)
    counts = apportion(steps_total, [m / total_mix for m in c.mix])
    pool = [lab for lab, k in zip(TRAJECTORY_LABELS, counts) for _ in range(k)]
    plans, pos = [], 0
    for n in lengths:
        plans.append(pool[pos:pos + n - 1])
        pos += n - 1
    for _ in range(int(round(c.reversal_fraction * c.n_patients))):
        a, b = rng.integers(0, len(plans), size=2)
        i, j = rng.integers(0, len(plans[a])), rng.integers(0, len(plans[b]))
        plans[a][i], plans[b][j] = plans[b][j], plans[a][i]

    bg = background_template(c.image_size, c.world_seed)
    patients = []
    for p, plan in enumerate(plans):
        incs = np.array([_step_increment(lab, rng) for lab in plan])
        cum = np.concatenate([[0.0], np.cumsum(incs)])
        lo, hi = -cum.min(), c.score_max - cum.max()
        net = plan.count("Worse") - plan.count("Improved")
        k = c.level_coupling
        a, b = (1.0, 1.0 + k) if net > 0 else (1.0 + k, 1.0) if net < 0 else (1.0, 1.0)
        scores = lo + (hi - lo) * rng.beta(a, b) + cum
        offset = tuple(int(v) for v in rng.integers(-1, 2, size=2))
        pid = f"patient-{c.seed}-{p:03d}"
        seq = []
        for t, s in enumerate(scores):
            pixels = opacity_image(bg, s, c, offset, rng)
            pos = POSITIONS[int(rng.integers(0, 2))]
            img = LabeledImage(pixels, "covid", pid, pos, timepoint=t, opacity_score=float(s))
            seq.append(ScoredImage(img, float(s), t))
        patients.append(seq)
    return patients


# ---------------------------------------------------------------- manifests

class ManifestError(ValueError):
    def __init__(self, row, message):
        super().__init__(f"manifest row {row}: {message}")
        self.row = row


def write_pgm(path, pixels):
    """16-bit binary PGM (lossless for 1/65535 steps)."""
    q = np.round(np.clip(pixels, 0.0, 1.0) * 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(q.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    raw = parts[4]
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h).reshape(h, w)
    return arr.astype(np.float64) / maxval


def save_manifest(dataset: Dataset, path, image_dir="images", provenance: dict | None = None):
    """Write images as PGM files plus a CSV manifest next to them.

    The first line declares the class list (``# classes: a,b,c``), then a
    header row and one row per item. ``provenance`` (e.g. the generator
    config) is echoed into ``<manifest>.provenance.json``.
    """
    path = Path(path)
    img_root = path.parent / image_dir
    img_root.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# classes: " + ",".join(dataset.class_names) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for i, it in enumerate(dataset.items):
            rel = f"{image_dir}/{i:06d}.pgm"
            write_pgm(path.parent / rel, it.pixels)
            writer.writerow([rel, it.class_label, it.patient_id, it.position,
                             "" if it.timepoint is None else it.timepoint,
                             "" if it.opacity_score is None else repr(float(it.opacity_score))])
    if provenance is not None:
        Path(str(path) + ".provenance.json").write_text(
            json.dumps(provenance, indent=2, sort_keys=True, default=list) + "\n")


def load_manifest(path, class_names: Sequence[str] | None = None) -> Dataset:
    """Load a manifest written by :func:`save_manifest` (or by hand).

    ``class_names`` overrides the declared class list. Any bad row raises
    :class:`ManifestError` carrying the 0-based data row index.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    declared = None
    while lines and lines[0].startswith("#"):
        line = lines.pop(0)
        if line.startswith("# classes:"):
            declared = tuple(c.strip() for c in line.split(":", 1)[1].split(",") if c.strip())
    classes = tuple(class_names) if class_names is not None else declared
    if not classes:
        raise ValueError(f"{path}: no class list declared")
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(header) != MANIFEST_COLUMNS:
        raise ValueError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
    items = []
    for row_no, row in enumerate(reader):
        if len(row) != len(MANIFEST_COLUMNS):
            raise ManifestError(row_no, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
        rel, cls, pid, position, tp, score = row
        if cls not in classes:
            raise ManifestError(row_no, f"class {cls!r} not in declared classes {classes}")
        img_path = path.parent / rel
        if not img_path.is_file():
            raise ManifestError(row_no, f"image {rel!r} not found")
        try:
            pixels = read_pgm(img_path)
            items.append(LabeledImage(pixels, cls, pid, position or "unknown",
                                      int(tp) if tp else None, float(score) if score else None))
        except ValueError as exc:
            raise ManifestError(row_no, str(exc)) from exc
    return Dataset(items, classes)


def longitudinal_dataset(patients) -> Dataset:
    """Flatten per-patient ScoredImage lists into one Dataset of their images."""
    items = [si.image for seq in patients for si in seq]
    return Dataset(items, ("covid",))


def config_dict(config):
    return asdict(config)
