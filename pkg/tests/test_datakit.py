import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

import oracles
from ktdkit import datakit
from ktdkit.datakit import Dataset, LabeledImage, SplitSpec


def _singletons(per_class, classes=("covid", "pneumonia", "normal")):
    px = np.zeros((2, 2))
    return Dataset([LabeledImage(px, c, f"{c}-{i}") for c in classes for i in range(per_class)], classes)


def test_apportion_examples():
    assert datakit.apportion(179, (0.7, 0.1, 0.2)) == [125, 18, 36]
    assert datakit.apportion(159, (0.7, 0.1, 0.2)) == [111, 16, 32]
    assert datakit.apportion(0, (0.7, 0.1, 0.2)) == [0, 0, 0]


def test_split_179_per_class():
    train, val, test = datakit.split_by_patient(_singletons(179))
    for part, n in zip((train, val, test), (125, 18, 36)):
        assert Counter(it.class_label for it in part.items) == {"covid": n, "pneumonia": n, "normal": n}


def test_split_159_sequences_unstratified():
    items = [(f"p{i}", "x") for i in range(159)]
    parts = datakit.split_by_patient(items, SplitSpec(stratify=False), patient_of=lambda t: t[0],
                                     class_of=lambda t: t[1])
    assert [len(p) for p in parts] == [111, 16, 32]


def test_split_one_patient_owning_a_class():
    px = np.zeros((2, 2))
    items = [LabeledImage(px, "covid", "solo") for _ in range(10)]
    items += [LabeledImage(px, "normal", f"n{i}") for i in range(10)]
    parts = datakit.split_by_patient(Dataset(items, ("covid", "normal")))
    holders = [p for p in parts if any(it.class_label == "covid" for it in p.items)]
    assert len(holders) == 1 and sum(it.class_label == "covid" for it in holders[0].items) == 10


def test_split_errors():
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        datakit.split_by_patient(Dataset(_singletons(3).items, ("covid", "pneumonia", "normal", "flu")))
    px = np.zeros((2, 2))
    with pytest.raises(ValueError):
        datakit.split_by_patient(Dataset([LabeledImage(px, "a", "")], ("a",)))


@pytest.mark.parametrize("trial", range(1000))
def test_split_never_leaks_patients(trial):
    rng = np.random.default_rng(trial)
    px = np.zeros((1, 1))
    items = []
    for p in range(int(rng.integers(3, 40))):
        cls = ("a", "b")[int(rng.integers(0, 2))]
        for _ in range(int(rng.integers(1, 6))):
            items.append(LabeledImage(px, cls, f"pt{p}"))
    ds = Dataset(items, ("a", "b"))
    if not all(ds.class_index().values()):
        return
    parts = datakit.split_by_patient(ds, SplitSpec(seed=trial))
    owners = [set(it.patient_id for it in p.items) for p in parts]
    assert not (owners[0] & owners[1]) and not (owners[0] & owners[2]) and not (owners[1] & owners[2])
    assert sum(len(p) for p in parts) == len(items)


def test_split_deterministic_and_permutation_stable():
    ds = _singletons(30)
    a = datakit.split_by_patient(ds, SplitSpec(seed=4))
    perm = np.random.default_rng(0).permutation(len(ds))
    b = datakit.split_by_patient(ds.subset(perm), SplitSpec(seed=4))
    for pa, pb in zip(a, b):
        assert sorted(it.patient_id for it in pa.items) == sorted(it.patient_id for it in pb.items)


# ---------------------------------------------------------------- triage generator

def test_triage_shapes_range_and_determinism():
    cfg = datakit.TriageConfig(images_per_class=5)
    a, b = datakit.synth_triage(cfg), datakit.synth_triage(cfg)
    assert len(a) == 15 and a.class_names == datakit.TRIAGE_CLASSES
    x, y = a.arrays()
    assert x.shape == (15, 1, 32, 32) and x.min() >= 0 and x.max() <= 1
    assert x.tobytes() == b.images().tobytes()
    assert not np.array_equal(x, datakit.synth_triage(replace(cfg, seed=1)).images())


def test_triage_same_class_differs_only_near_roi():
    cfg = datakit.TriageConfig(images_per_class=2, noise=0.0)
    ds = datakit.synth_triage(cfg)
    a, b = ds.items[0].pixels, ds.items[1].pixels
    diff = np.abs(a - b - np.median(a - b)) > 1e-9
    rows, cols = np.nonzero(diff)
    cy, cx = cfg.roi_center
    reach = cfg.roi_size // 2 + cfg.jitter
    assert rows.min() >= cy - reach and rows.max() < cy + reach
    assert cols.min() >= cx - reach and cols.max() < cx + reach


def test_triage_rejects_oversized_roi():
    with pytest.raises(ValueError):
        datakit.synth_triage(datakit.TriageConfig(image_size=8, roi_size=8))
    with pytest.raises(ValueError):
        datakit.synth_triage(datakit.TriageConfig(images_per_class=0))


def test_triage_label_noise_flips_roughly_the_fraction():
    cfg = datakit.TriageConfig(images_per_class=300, label_noise=0.2, image_size=16, roi_center=(8, 8))
    ds = datakit.synth_triage(cfg)
    flipped = np.mean([not it.patient_id.startswith(it.class_label) for it in ds.items])
    assert 0.15 < flipped < 0.25


# ---------------------------------------------------------------- longitudinal generator

def test_longitudinal_counts_and_mix():
    pats = datakit.synth_longitudinal()
    assert len(pats) == 100
    assert sum(len(p) - 1 for p in pats) == 159
    labels = Counter(oracles.trajectory_label(b.opacity_score - a.opacity_score)
                     for p in pats for a, b in zip(p, p[1:]))
    assert labels == {"Worse": 80, "Stable": 28, "Improved": 51}


def test_longitudinal_scores_and_images_consistent():
    cfg = datakit.LongitudinalConfig(seed=3)
    for p in datakit.synth_longitudinal(cfg)[:30]:
        tps = [si.timepoint for si in p]
        assert tps == sorted(set(tps))
        scores = [si.opacity_score for si in p]
        assert all(0 <= s <= cfg.score_max for s in scores)
        assert len({si.image.patient_id for si in p}) == 1
        # mean intensity over the noise-free window rises strictly with score
        off = _offset_of(p[0], cfg)
        mask = datakit.roi_window_mask(cfg, off)
        means = [si.image.pixels[mask].mean() for si in p]
        order = np.argsort(scores)
        assert np.all(np.diff(np.array(means)[order]) > 0)


def _offset_of(si, cfg):
    # recover the per-patient ROI offset by matching the noise-free window
    bg = datakit.background_template(cfg.image_size, cfg.world_seed)
    best = None
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ref = datakit.opacity_image(bg, si.opacity_score, cfg, (dy, dx), np.random.default_rng(0))
            m = datakit.roi_window_mask(cfg, (dy, dx))
            err = np.abs(ref[m] - si.image.pixels[m]).max()
            if best is None or err < best[0]:
                best = (err, (dy, dx))
    assert best[0] < 1e-12
    return best[1]


def test_longitudinal_rising_scores_all_worse():
    cfg = datakit.LongitudinalConfig(n_patients=5, timepoint_counts=(0, 0, 5), mix=(1, 0, 0))
    for p in datakit.synth_longitudinal(cfg):
        d = np.diff([si.opacity_score for si in p])
        assert np.all(d >= 0.4)


def test_longitudinal_errors():
    with pytest.raises(ValueError):
        datakit.synth_longitudinal(datakit.LongitudinalConfig(mix=(1, -1, 0)))
    with pytest.raises(ValueError):
        datakit.synth_longitudinal(datakit.LongitudinalConfig(n_patients=3))


def test_longitudinal_determinism():
    a = datakit.synth_longitudinal(datakit.LongitudinalConfig(seed=2))
    b = datakit.synth_longitudinal(datakit.LongitudinalConfig(seed=2))
    assert all(x.image.pixels.tobytes() == y.image.pixels.tobytes() for pa, pb in zip(a, b) for x, y in zip(pa, pb))


# ---------------------------------------------------------------- manifests

def test_manifest_round_trip(tmp_path):
    ds = datakit.synth_triage(datakit.TriageConfig(images_per_class=4))
    extra = LabeledImage(ds.items[0].pixels, "covid", "z", "PA", timepoint=3, opacity_score=1.25)
    ds = Dataset(ds.items + [extra], ds.class_names)
    path = tmp_path / "m.csv"
    datakit.save_manifest(ds, path, provenance={"generator": "triage"})
    back = datakit.load_manifest(path)
    assert back.class_names == ds.class_names
    assert [it.meta() for it in back.items] == [it.meta() for it in ds.items]
    assert max(np.abs(a.pixels - b.pixels).max() for a, b in zip(ds.items, back.items)) <= 0.5 / 65535
    assert json.loads((tmp_path / "m.csv.provenance.json").read_text()) == {"generator": "triage"}


def test_manifest_replica_class_sizes(tmp_path):
    items = _singletons(179).items
    path = tmp_path / "m.csv"
    datakit.save_manifest(Dataset(items, datakit.TRIAGE_CLASSES), path)
    back = datakit.load_manifest(path)
    assert {c: len(ix) for c, ix in back.class_index().items()} == {"covid": 179, "pneumonia": 179, "normal": 179}


def test_manifest_bad_rows_name_the_row(tmp_path):
    ds = datakit.synth_triage(datakit.TriageConfig(images_per_class=2))
    path = tmp_path / "m.csv"
    datakit.save_manifest(ds, path)
    lines = path.read_text().splitlines()
    lines[2 + 3] = lines[2 + 3].replace("pneumonia", "flu")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(datakit.ManifestError) as err:
        datakit.load_manifest(path)
    assert err.value.row == 3
    lines = path.read_text().splitlines()
    lines[2 + 3] = "images/missing.pgm,covid,p,PA,,"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(datakit.ManifestError) as err:
        datakit.load_manifest(path)
    assert err.value.row == 3
    lines[2 + 1] = "only,two"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(datakit.ManifestError) as err:
        datakit.load_manifest(path)
    assert err.value.row == 1


def test_labeled_image_validation():
    with pytest.raises(ValueError):
        LabeledImage(np.full((2, 2), 1.5), "a", "p")
    with pytest.raises(ValueError):
        LabeledImage(np.zeros((2, 2)), "a", "p", position="lateral")
    with pytest.raises(ValueError):
        Dataset([LabeledImage(np.zeros((2, 2)), "b", "p")], ("a",))
