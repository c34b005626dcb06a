import hashlib
import math

import numpy as np
import pytest

from dcffnet.data import (CropTransform, DataError, SamplerStats, Sequence, SynthSpec, TrainingSample, augment,
                          context_side, crop, format_box, load_dataset, load_sequence, make_synth_sequence,
                          parse_groundtruth, read_ppm, sample_pair, synth_sequence, write_ppm)
from dcffnet.heads import BBox


def test_ppm_roundtrip_uint8(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img / 255.0)


def test_ppm_header_comments_and_errors(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes([0, 128, 255, 10, 20, 30]))
    img = read_ppm(p)
    assert img.shape == (1, 2, 3) and img[0, 0, 2] == 1.0
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(DataError):
        read_ppm(tmp_path / "bad.ppm")
    with pytest.raises(DataError):
        write_ppm(tmp_path / "gray.ppm", np.zeros((3, 3)))


def test_groundtruth_roundtrip():
    rng = np.random.default_rng(1)
    boxes = [BBox.from_xywh(*rng.uniform(0, 100, 2), *rng.uniform(1, 50, 2)) for _ in range(50)]
    text = "".join(format_box(b) + "\n" for b in boxes)
    back = parse_groundtruth(text)
    for a, b in zip(boxes, back):
        np.testing.assert_allclose(a.as_array(), b.as_array(), rtol=0, atol=1e-12)
    # one-based corner convention
    assert parse_groundtruth("1,1,10,20\n")[0] == BBox(0, 0, 10, 20)
    assert parse_groundtruth("5\t6\t7\t8")[0] == BBox(4, 5, 11, 13)
    with pytest.raises(DataError):
        parse_groundtruth("1,2,3\n")


def test_synth_contract():
    seq = make_synth_sequence(SynthSpec(length=60, step=8))
    assert len(seq) == 60 and len(seq.frames) == 60
    centers = np.array([b.center for b in seq.boxes])
    steps = np.hypot(*np.diff(centers, axis=0).T)
    np.testing.assert_allclose(steps, 8.0, rtol=0, atol=1e-9)
    for b in seq.boxes:
        np.testing.assert_allclose(b.size, (24, 24), rtol=0, atol=1e-9)
        assert 0 <= b.x0 and b.x1 <= 160 and 0 <= b.y0 and b.y1 <= 160
    for f in seq.frames:
        assert f.shape == (160, 160, 3) and 0 <= f.min() and f.max() <= 1


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_directory_deterministic_and_loadable(tmp_path):
    spec = SynthSpec(length=6, seed=3)
    a = synth_sequence(spec, tmp_path / "a" / "seq")
    b = synth_sequence(spec, tmp_path / "b" / "seq")
    assert _digest(a) == _digest(b)
    assert _digest(a) != _digest(synth_sequence(SynthSpec(length=6, seed=4), tmp_path / "c" / "seq"))

    mem = make_synth_sequence(spec)
    disk = load_sequence(a)
    assert disk.boxes == mem.boxes
    for i in range(len(mem)):
        assert np.array_equal(disk.frame(i), mem.frames[i])
    assert [s.name for s in load_dataset(tmp_path / "a")] == ["seq"]


def test_loader_errors(tmp_path):
    with pytest.raises(DataError):
        load_sequence(tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "img").mkdir()
    (tmp_path / "groundtruth_rect.txt").write_text("1,1,5,5\n")
    with pytest.raises(DataError, match="0 frames"):
        load_sequence(tmp_path)


def test_synth_spec_parse():
    assert SynthSpec.parse("length=60, step=8") == SynthSpec(length=60, step=8.0)
    with pytest.raises(DataError):
        SynthSpec.parse("speed=3")
    with pytest.raises(DataError):
        make_synth_sequence(SynthSpec(step=30))


# ---------------------------------------------------------------- crops and pairs

def test_context_crop_arithmetic():
    box = BBox.from_center(100, 100, 64, 64)
    assert context_side(box) == 128.0
    _, t = crop(np.zeros((200, 200, 3)), 100, 100, context_side(box), 127)
    assert t.scale == 128 / 127
    # the target fills 64 * 127/128 template pixels
    w, _ = t.box_to_crop(box).size
    assert abs(w - 64 * 127 / 128) < 1e-12


def test_crop_invertible():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t = CropTransform(*rng.uniform(0, 300, 2), rng.uniform(0.2, 5), int(rng.integers(10, 300)))
        b = BBox.from_center(*rng.uniform(0, 300, 2), *rng.uniform(1, 80, 2))
        back = t.box_to_frame(t.box_to_crop(b))
        assert np.abs(back.as_array() - b.as_array()).max() < 1e-9


def test_crop_resamples_pixels_exactly_at_unit_scale():
    frame = np.random.default_rng(3).random((40, 40, 3))
    patch, _ = crop(frame, 20.0, 20.0, 10.0, 10)
    assert np.allclose(np.transpose(patch, (1, 2, 0)), frame[15:25, 15:25], atol=1e-12)


@pytest.fixture(scope="module")
def synth_seq():
    return make_synth_sequence(SynthSpec(length=12))


def test_sample_pair_without_jitter_is_centred(synth_seq):
    s = sample_pair([synth_seq], np.random.default_rng(0), 31, 63)
    assert s.template.shape == (3, 31, 31) and s.search.shape == (3, 63, 63)
    cx, cy = s.gt.center
    assert abs(cx - 31.5) < 1e-9 and abs(cy - 31.5) < 1e-9
    assert 0 <= s.search.min() and s.search.max() <= 1


def test_sample_pair_deterministic(synth_seq):
    a = sample_pair([synth_seq], np.random.default_rng(5), 31, 63, jitter=8.0)
    b = sample_pair([synth_seq], np.random.default_rng(5), 31, 63, jitter=8.0)
    assert a.template.tobytes() == b.template.tobytes()
    assert a.search.tobytes() == b.search.tobytes()
    assert a.gt == b.gt and a.source == b.source


def test_sample_pair_respects_frame_gap(synth_seq):
    rng = np.random.default_rng(6)
    for _ in range(30):
        _, i, j = sample_pair([synth_seq], rng, 31, 63, max_gap=2).source
        assert abs(i - j) <= 2


def test_degenerate_boxes_are_skipped_and_counted():
    frames = [np.zeros((50, 50, 3))] * 3
    flat = Sequence("flat", [BBox(10, 10, 10, 30)] * 3, frames=frames)
    stats = SamplerStats()
    with pytest.raises(DataError):
        sample_pair([flat], np.random.default_rng(0), 31, 63, stats=stats, max_tries=5)
    assert stats.skipped == 5
    with pytest.raises(DataError):
        sample_pair([], np.random.default_rng(0), 31, 63)


# ---------------------------------------------------------------- augmentation

class ScriptedRng:
    """Stands in for a Generator: fixed coin flips and draws."""

    def __init__(self, coin, shift=(0.0, 0.0), scale=1.0):
        self.coin, self.shift, self.scale = coin, shift, scale

    def random(self):
        return self.coin

    def uniform(self, lo, hi, size=None):
        return np.array(self.shift) if size == 2 else self.scale


def _sample(seed=0):
    rng = np.random.default_rng(seed)
    return TrainingSample(rng.random((3, 31, 31)), rng.random((3, 63, 63)), BBox(20, 22, 40, 38), ("s", 0, 1))


def test_augment_disabled_is_identity():
    s = _sample()
    out = augment(s, np.random.default_rng(0), "pretrain", p_gray=0, p_flip=0, max_translate=0,
                  scale_range=(1.0, 1.0))
    assert out.search.tobytes() == s.search.tobytes() and out.template.tobytes() == s.template.tobytes()
    assert out.gt == s.gt


def test_augment_is_pretrain_only():
    s = _sample()
    out = augment(s, np.random.default_rng(0), "finetune", p_gray=1, p_flip=1)
    assert out.search.tobytes() == s.search.tobytes() and out.gt == s.gt


def test_flip_reflects_gt_and_is_an_involution():
    s = _sample()
    once = augment(s, ScriptedRng(0.0), "pretrain", p_gray=0, p_flip=1, max_translate=0, scale_range=(1, 1))
    assert once.gt == BBox(63 - 40, 22, 63 - 20, 38)
    twice = augment(once, ScriptedRng(0.0), "pretrain", p_gray=0, p_flip=1, max_translate=0, scale_range=(1, 1))
    assert twice.gt == s.gt
    assert np.array_equal(twice.search, s.search) and np.array_equal(twice.template, s.template)


def test_translate_shifts_gt_and_pixels():
    s = _sample()
    out = augment(s, ScriptedRng(1.0, shift=(5.0, 0.0)), "pretrain", p_gray=0.5, p_flip=0.5)
    assert out.gt == BBox(25, 22, 45, 38)
    np.testing.assert_allclose(out.search[:, :, 10:60], s.search[:, :, 5:55], atol=1e-12)


def test_grayscale_and_range():
    s = _sample()
    out = augment(s, ScriptedRng(0.0, scale=1.05), "pretrain", p_gray=1, p_flip=0)
    assert np.array_equal(out.search[0], out.search[1]) and np.array_equal(out.search[1], out.search[2])
    assert 0 <= out.search.min() and out.search.max() <= 1
    gt = out.gt
    assert 0 <= gt.x0 <= gt.x1 <= 63 and 0 <= gt.y0 <= gt.y1 <= 63
    w, _ = gt.size
    assert math.isclose(w, 20 * 1.05, rel_tol=1e-12)


def test_scale_jitter_varies_target_size_in_crop(synth_seq):
    rng = np.random.default_rng(7)
    widths = [sample_pair([synth_seq], rng, 31, 63, scale_jitter=0.25).gt.size[0] for _ in range(40)]
    base = sample_pair([synth_seq], np.random.default_rng(7), 31, 63).gt.size[0]
    assert min(widths) >= base / 1.25 - 1e-9 and max(widths) <= base * 1.25 + 1e-9
    assert max(widths) / min(widths) > 1.3
    # zero jitter draws nothing extra, so existing streams are unchanged
    a = sample_pair([synth_seq], np.random.default_rng(8), 31, 63, scale_jitter=0.0)
    b = sample_pair([synth_seq], np.random.default_rng(8), 31, 63)
    assert a.search.tobytes() == b.search.tobytes()
