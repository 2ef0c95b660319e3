import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ktdkit import datakit, evalkit, nets, pipeline
from ktdkit.evalkit import BinaryTask, EvalReport, LossVariant, SweepGrid


def test_accuracy_examples():
    assert evalkit.accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert evalkit.accuracy([0, 0], [1, 1]) == 0.0
    assert evalkit.accuracy([0, 1, 2, 2], [0, 1, 2, 1]) == 0.75
    with pytest.raises(ValueError):
        evalkit.accuracy([0, 1], [0])


def test_majority_predictor_scores_majority_fraction():
    labels = np.array([0] * 50 + [1] * 28 + [2] * 21)
    assert evalkit.accuracy(np.zeros_like(labels), labels) == pytest.approx(50 / 99)


def test_argmax_ties_go_low():
    assert evalkit.argmax_predictions([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]).tolist() == [0, 1]


def test_auroc_examples():
    assert evalkit.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert evalkit.auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert evalkit.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    pts = evalkit.roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert evalkit.trapezoid_area(pts) == pytest.approx(0.75, abs=1e-12)
    assert (0.0, 1.0) in evalkit.roc_points([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])


def test_auroc_needs_both_classes():
    with pytest.raises(ValueError):
        evalkit.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        evalkit.roc_points([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        evalkit.auroc([0.1, 0.2], [0, 2])


def _instance(rng):
    n = int(rng.integers(2, 200))
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    # coarse grid forces plenty of ties
    s = rng.integers(0, int(rng.integers(2, 30)), size=n) / 7.0
    return s, y


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_auroc_properties(seed):
    rng = np.random.default_rng(seed)
    s, y = _instance(rng)
    a = evalkit.auroc(s, y)
    assert a == oracles.auroc_pairs(s.tolist(), y.tolist())
    assert evalkit.auroc(np.exp(3 * s) + 1, y) == pytest.approx(a, abs=1e-12)
    assert evalkit.auroc(s, 1 - y) == pytest.approx(1 - a, abs=1e-12)
    pts = evalkit.roc_points(s, y)
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert len(pts) == len(np.unique(s)) + 1
    arr = np.array(pts)
    assert np.all(np.diff(arr[:, 0]) >= 0) and np.all(np.diff(arr[:, 1]) >= 0)
    assert abs(evalkit.trapezoid_area(pts) - a) <= 1e-9


def test_binary_task_validation_and_names():
    t = BinaryTask("covid", ["pneumonia", "normal"])
    assert t.name == "covid_vs_pneumonia+normal"
    with pytest.raises(ValueError):
        BinaryTask("covid", ("covid",))
    with pytest.raises(ValueError):
        BinaryTask("covid", ())


def test_scores_for_task_filters():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.5, 0.25, 0.25]])
    labels = np.array([0, 1, 2, 0])
    s, b = evalkit.scores_for_task(probs, ("covid", "pneumonia", "normal"), labels,
                                   BinaryTask("covid", ("normal",)))
    assert s.tolist() == [0.7, 0.2, 0.5]
    assert b.tolist() == [1, 0, 1]
    with pytest.raises(ValueError):
        evalkit.scores_for_task(probs, ("covid", "pneumonia", "normal"), labels, BinaryTask("covid", ("flu",)))


@pytest.fixture(scope="module")
def small_model():
    cfg = datakit.TriageConfig(images_per_class=20, seed=5)
    data = datakit.synth_triage(cfg)
    spec = pipeline.ms_spec()
    bundle = pipeline.train_plain(spec, data, "softmax", pipeline.TrainConfig(epochs=2, seed=0)).bundle
    return spec, bundle, data


def test_task_scores_and_evaluate(small_model):
    spec, bundle, data = small_model
    s, b = evalkit.task_scores(bundle, spec, data, BinaryTask("covid", ("normal",)))
    assert len(s) == 40 and b.sum() == 20
    assert np.all((s >= 0) & (s <= 1))
    rep = evalkit.evaluate(spec, bundle, data, config={"seed": 0})
    assert set(rep.auroc) == {t.name for t in evalkit.TRIAGE_TASKS}
    assert 0 <= rep.accuracy <= 1
    again = EvalReport.from_json(rep.to_json())
    assert again == rep
    no_normal = datakit.Dataset([it for it in data.items if it.class_label != "normal"], data.class_names)
    with pytest.raises(ValueError):
        evalkit.task_scores(bundle, spec, no_normal, BinaryTask("covid", ("normal",)))


def test_write_roc_points(tmp_path):
    p = tmp_path / "roc.txt"
    evalkit.write_roc_points([(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)], p)
    rows = np.loadtxt(p)
    assert rows.shape == (3, 2) and rows[1].tolist() == [0.5, 1.0]


def test_grid_shapes():
    upper, lower = evalkit.default_grids()
    assert len(upper.cells()) == 16
    assert len(lower.cells()) == 12
    with pytest.raises(ValueError):
        SweepGrid(alphas=())
    assert LossVariant("pc", 0.995).name == "PC(xi=0.995)"


@pytest.fixture(scope="module")
def sweep_inputs():
    tcfg = datakit.TriageConfig(images_per_class=12)
    train = datakit.synth_triage(tcfg)
    test = datakit.synth_triage(datakit.TriageConfig(images_per_class=8, seed=3))
    rf = pipeline.rf_spec()
    teachers = {s: nets.init_weights(rf, 100 + s) for s in (0, 1)}
    return evalkit.SweepInputs(train, None, test, rf, teachers, pipeline.TrainConfig(epochs=1))


def test_single_cell_sweep_equals_direct_run(sweep_inputs):
    loss = LossVariant("pc", 0.8)
    table = evalkit.run_sweep(SweepGrid((0.8,), (5.0,), (loss,), (0,)), sweep_inputs)
    assert len(table.cells) == 1
    direct = evalkit.run_cell(sweep_inputs, 0.8, 5.0, loss, 0)
    assert table.cells[0].report == direct.report


def test_sweep_is_order_insensitive_and_isolates_failures(sweep_inputs):
    losses = (LossVariant("softmax"), LossVariant("arcface"))
    a = evalkit.run_sweep(SweepGrid((0.2, 0.8), (5.0,), losses, (0, 1)), sweep_inputs)
    b = evalkit.run_sweep(SweepGrid((0.8, 0.2), (5.0,), losses[::-1], (1, 0)), sweep_inputs)
    assert a.to_json() == b.to_json()
    # seed 7 has no teacher: those cells fail, the rest still run
    c = evalkit.run_sweep(SweepGrid((0.8,), (5.0,), losses, (0, 7)), sweep_inputs)
    assert sum(cell.failed for cell in c.cells) == 2
    assert all(cell.report is not None for cell in c.cells if cell.seed == 0)
    assert "KeyError" in c.get(0.8, 5.0, "SM", 7).error


def test_sweep_with_worker_processes_matches_serial(sweep_inputs):
    grid = SweepGrid((0.5,), (1.0, 5.0), (LossVariant("softmax"),), (0,))
    assert evalkit.run_sweep(grid, sweep_inputs, jobs=2).to_json() == \
        evalkit.run_sweep(grid, sweep_inputs).to_json()


def test_format_sweep_layout(sweep_inputs):
    grids = evalkit.default_grids(seeds=(0, 1))
    cells = []
    for g in grids:
        for a, t, l, s in g.cells():
            rep = EvalReport(accuracy=round(a + t / 100 + s / 1000, 6))
            cells.append(evalkit.SweepCell(a, t, l, s, rep))
    text = evalkit.format_sweep(evalkit.SweepTable(cells))
    blocks = text.strip().split("\n\n")
    assert len(blocks) == 2
    upper = blocks[0].splitlines()
    lower = blocks[1].splitlines()
    assert len(upper) == 2 + 4 and len(lower) == 2 + 3
    assert upper[1].split("\t") == ["alpha", "PC(xi=0.8)", "PC(xi=0.995)", "ArcFace", "SM"]
    assert all(len(r.split("\t")) == 5 for r in upper[1:] + lower[1:])
    # per-seed values and their mean are both shown
    assert "0.2505 " not in upper[2] and "[0.250/0.251]" in upper[2]
    json.loads(evalkit.SweepTable(cells).to_json())
