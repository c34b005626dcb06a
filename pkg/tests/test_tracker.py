import numpy as np
import pytest

from dcffnet import tracker as trk
from dcffnet.backbone import shape_table
from dcffnet.config import TOY, TrackerConfig
from dcffnet.data import SynthSpec, load_sequence, make_synth_sequence, parse_groundtruth
from dcffnet.evaluation import iou
from dcffnet.heads import BBox, argmax_location
from dcffnet.model import init_params
from dcffnet.tracker import TrackerModel, TrackingError, cosine_window, score_map


@pytest.fixture(scope="module")
def model():
    return TrackerModel(TOY, init_params(TOY, np.random.default_rng(0), np.float32))


@pytest.fixture(scope="module")
def seq():
    return make_synth_sequence(SynthSpec(length=8, seed=2))


def test_init_caches_template_taps(model, seq):
    state = trk.init(seq.frame(0), seq.boxes[0], model)
    table = shape_table(TOY)["template"]
    assert {k: v.shape for k, v in state.template.items()} == {k: table[k] for k in state.template}
    assert set(state.template) == {"after_conv3", "after_block2", "final"}
    assert state.box == seq.boxes[0] and state.frame_index == 0


def test_init_twice_identical(model, seq):
    a = trk.init(seq.frame(0), seq.boxes[0], model)
    b = trk.init(seq.frame(0), seq.boxes[0], model)
    for k in a.template:
        assert a.template[k].tobytes() == b.template[k].tobytes()


def test_init_rejects_bad_boxes(model, seq):
    with pytest.raises(ValueError, match="area"):
        trk.init(seq.frame(0), BBox(10, 10, 10, 30), model)
    with pytest.raises(ValueError, match="outside"):
        trk.init(seq.frame(0), BBox(500, 500, 520, 520), model)


def test_full_window_on_uniform_scores_picks_centre():
    score = score_map(np.zeros((2, 9, 9)), 1.0)
    assert argmax_location(score) == (4, 4)
    assert cosine_window((9, 9))[4, 4] == 1.0


def test_zero_window_influence_ignores_the_window(model, seq, monkeypatch):
    settings = TrackerConfig(window_influence=0.0)
    state = trk.init(seq.frame(0), seq.boxes[0], model, settings)
    _, box_a = trk.update(state, seq.frame(1), model)
    monkeypatch.setattr(trk, "cosine_window", lambda extent: np.random.default_rng(0).random(extent))
    _, box_b = trk.update(state, seq.frame(1), model)
    assert box_a == box_b
    logits = np.random.default_rng(1).standard_normal((2, 9, 9))
    assert np.array_equal(score_map(logits, 0.0), 1 / (1 + np.exp(logits[0] - logits[1])))


def test_updates_stay_in_frame_with_constant_cost(model, seq):
    state = trk.init(seq.frame(0), seq.boxes[0], model)
    cache = {k: v.tobytes() for k, v in state.template.items()}
    nodes = []
    h, w = seq.frame(0).shape[:2]
    for i in range(1, len(seq)):
        state, box = trk.update(state, seq.frame(i), model)
        assert box.area > 0
        assert 0 <= box.x0 < box.x1 <= w and 0 <= box.y0 < box.y1 <= h
        nodes.append(state.nodes_last_update)
    assert len(set(nodes)) == 1
    assert state.frame_index == len(seq) - 1
    assert {k: v.tobytes() for k, v in state.template.items()} == cache
    assert not any(v.flags.writeable for v in state.template.values())


def test_box_clamped_when_target_leaves_frame(model):
    frame = np.full((80, 80, 3), 0.5)
    state = trk.init(frame, BBox(60, 60, 79, 79), model)
    for _ in range(3):
        state, box = trk.update(state, frame, model)
        assert 0 <= box.x0 < box.x1 <= 80 and 0 <= box.y0 < box.y1 <= 80


def test_non_finite_scores_abort(seq):
    params = init_params(TOY, np.random.default_rng(0), np.float32)
    params["head.cls.out.bias"][...] = np.nan
    bad = TrackerModel(TOY, params)
    state = trk.init(seq.frame(0), seq.boxes[0], bad)
    with pytest.raises(TrackingError, match="frame 1"):
        trk.update(state, seq.frame(1), bad)


def test_track_sequence_writes_results_and_overlays(model, seq, tmp_path):
    boxes = trk.track_sequence(model, seq, overlay_dir=tmp_path / "ov")
    assert len(boxes) == len(seq) and boxes[0] == seq.boxes[0]
    path = trk.write_results(boxes, tmp_path / "res.txt")
    back = parse_groundtruth(path.read_text())
    for a, b in zip(boxes, back):
        np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-9)
    assert len(list((tmp_path / "ov").glob("*.ppm"))) == len(seq)


def test_tracking_from_disk_matches_memory(model, seq, tmp_path):
    from dcffnet.data import write_sequence

    disk = load_sequence(write_sequence(seq, tmp_path / "seq"))
    assert trk.track_sequence(model, disk) == trk.track_sequence(model, seq)


# ---------------------------------------------------------------- trained model

def _shifted(frame, dx):
    out = np.empty_like(frame)
    out[:, dx:] = frame[:, :-dx]
    out[:, :dx] = frame[:, :1]
    return out


@pytest.mark.slow
def test_static_frame_recovers_the_box(trained_models):
    model, _ = trained_models["cf-double"]
    test = make_synth_sequence(SynthSpec(seed=2))
    settings = TrackerConfig(window_influence=0.0, size_smoothing=1.0)
    for i in (0, 17, 33):
        frame, gt = test.frame(i), test.boxes[i]
        state = trk.init(frame, gt, model, settings)
        _, box = trk.update(state, frame, model)
        assert iou([box], [gt])[0] >= 0.9, (i, box, gt)


@pytest.mark.slow
def test_shift_moves_prediction_by_the_shift(trained_models):
    model, _ = trained_models["cf-double"]
    stride = model.geometry.stride
    test = make_synth_sequence(SynthSpec(seed=2))
    settings = TrackerConfig(window_influence=0.0)
    for i in (0, 17, 33):
        frame, gt = test.frame(i), test.boxes[i]
        state = trk.init(frame, gt, model, settings)
        _, still = trk.update(state, frame, model)
        _, moved = trk.update(state, _shifted(frame, 10), model)
        dx = moved.center[0] - still.center[0]
        dy = moved.center[1] - still.center[1]
        assert abs(dx - 10) <= stride / 2 and abs(dy) <= stride / 2, (i, dx, dy)
