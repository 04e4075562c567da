import numpy as np
import pytest
from PIL import Image

from pkgnet.kernels import crop_resize
from pkgnet.data import (DataError, DatasetLayout, IngestReport, ObjectBox, SyntheticConfig, assemble_stclips,
                         generate_synthetic_dataset, load_boxes, load_frame_store, load_labels, memory_store,
                         write_boxes, write_dataset)


def _write_video(root, split, vid, n, h=24, w=32):
    d = root / split / vid
    d.mkdir(parents=True)
    for i in range(n):
        Image.fromarray(np.full((h, w, 3), i % 255, np.uint8)).save(d / f"frame_{i:06d}.png")
    return d


def _box_csv(path, rows):
    path.write_text("video_id,frame_index,x1,y1,x2,y2,confidence\n" + "\n".join(rows) + "\n")
    return path


# ------------------------------------------------------------------ frame store

def test_store_lists_videos_in_order(tmp_path):
    _write_video(tmp_path, "train", "v02", 5)
    _write_video(tmp_path, "train", "v01", 10)
    store = load_frame_store(tmp_path, DatasetLayout("train"))
    assert store.video_ids == ["v01", "v02"]
    assert store.frame_count("v01") == 10 and store.frame_count("v02") == 5
    f = store.frame("v01", 3)
    assert f.shape == (3, 24, 32) and f.dtype == np.float32
    assert 0.0 <= f.min() and f.max() <= 1.0


def test_store_empty_dir(tmp_path):
    (tmp_path / "train").mkdir()
    with pytest.raises(DataError, match="no videos found"):
        load_frame_store(tmp_path)


def test_store_missing_dir(tmp_path):
    with pytest.raises(DataError, match="missing directory"):
        load_frame_store(tmp_path / "nope")


def test_store_zero_frames(tmp_path):
    (tmp_path / "train" / "v01").mkdir(parents=True)
    with pytest.raises(DataError, match="zero frames"):
        load_frame_store(tmp_path)


def test_store_inconsistent_size_names_file(tmp_path):
    d = _write_video(tmp_path, "train", "v01", 3, h=240, w=320)
    Image.fromarray(np.zeros((256, 320, 3), np.uint8)).save(d / "frame_000003.png")
    with pytest.raises(DataError, match="frame_000003.png"):
        load_frame_store(tmp_path)


def test_store_gap_in_numbering(tmp_path):
    d = _write_video(tmp_path, "train", "v01", 3)
    (d / "frame_000001.png").unlink()
    with pytest.raises(DataError, match="non-contiguous"):
        load_frame_store(tmp_path)


def test_grayscale_layout(tmp_path):
    _write_video(tmp_path, "test", "v01", 2)
    store = load_frame_store(tmp_path, DatasetLayout("test", channels=1))
    assert store.frame("v01", 0).shape == (1, 24, 32)


# ------------------------------------------------------------------ boxes

def test_well_formed_row(tmp_path):
    boxes = load_boxes(_box_csv(tmp_path / "b.csv", ["v01,10,5,5,20,30,0.9"]))
    assert boxes == [ObjectBox("v01", 10, 5, 5, 20, 30, 0.9)]


def test_low_confidence_dropped_and_counted(tmp_path):
    rep = IngestReport()
    boxes = load_boxes(_box_csv(tmp_path / "b.csv", ["v01,10,5,5,20,30,0.3", "v01,11,5,5,20,30,0.6"]),
                       threshold=0.5, report=rep)
    assert len(boxes) == 1 and rep.dropped_low_confidence == 1 and rep.kept == 1


def test_degenerate_box(tmp_path):
    with pytest.raises(DataError, match="degenerate box"):
        load_boxes(_box_csv(tmp_path / "b.csv", ["v01,10,5,5,5,30,0.9"]))
    with pytest.raises(DataError, match="degenerate box"):
        ObjectBox("v", 0, 3, 3, 2, 5)


def test_malformed_rows(tmp_path):
    with pytest.raises(DataError, match="malformed"):
        load_boxes(_box_csv(tmp_path / "b.csv", ["v01,ten,5,5,20,30,0.9"]))
    with pytest.raises(DataError, match="expected 7 fields"):
        load_boxes(_box_csv(tmp_path / "c.csv", ["v01,10,5,5,20"]))
    (tmp_path / "d.csv").write_text("v01,10,5,5,20,30,0.9\n")
    with pytest.raises(DataError, match="header"):
        load_boxes(tmp_path / "d.csv")


def test_negative_coordinates_without_store(tmp_path):
    with pytest.raises(DataError, match="negative"):
        load_boxes(_box_csv(tmp_path / "b.csv", ["v01,10,-5,5,20,30,0.9"]))


def test_clamped_to_frame(tmp_path):
    store = memory_store({"v01": np.zeros((12, 3, 24, 32), np.uint8)})
    rep = IngestReport()
    boxes = load_boxes(_box_csv(tmp_path / "b.csv", ["v01,10,-5,5,40,30,0.9", "v01,10,40,5,50,30,0.9"]),
                       store, report=rep)
    assert boxes[0].as_tuple() == (0, 5, 32, 24)
    assert rep.dropped_out_of_frame == 1


def test_box_roundtrip(tmp_path):
    boxes = [ObjectBox("a", 4, 1, 2, 3.5, 4.25, 0.75), ObjectBox("b", 9, 0, 0, 10, 10, 1.0)]
    write_boxes(boxes, tmp_path / "b.csv")
    assert load_boxes(tmp_path / "b.csv") == boxes


# ------------------------------------------------------------------ cubes

def _ramp_store(n=15, h=40, w=40):
    # frame i has constant value i / 255, so crops reveal their source frame
    arr = np.stack([np.full((3, h, w), i, np.uint8) for i in range(n)])
    return memory_store({"v01": arr})


def test_cube_frames_6_to_10():
    store = _ramp_store()
    (clip,) = assemble_stclips(store, [ObjectBox("v01", 10, 2, 3, 30, 35)], 4)
    assert clip.cube.shape == (5, 3, 32, 32)
    np.testing.assert_allclose(clip.cube[:, 0, 0, 0] * 255, [6, 7, 8, 9, 10], atol=1e-4)
    assert clip.frame_index == 10 and clip.video_id == "v01"


def test_short_history_skipped_and_counted():
    rep = IngestReport()
    clips = list(assemble_stclips(_ramp_store(), [ObjectBox("v01", 2, 0, 0, 10, 10)], 4, report=rep))
    assert clips == [] and rep.skipped_short_history == 1


def test_window_one():
    (clip,) = assemble_stclips(_ramp_store(), [ObjectBox("v01", 1, 0, 0, 10, 10)], 1)
    assert clip.t == 2


def test_bad_window():
    with pytest.raises(ValueError):
        list(assemble_stclips(_ramp_store(), [], 0))


def test_clip_order_and_shared_box(small_synth):
    boxes = list(reversed(small_synth.train.boxes))
    clips = list(assemble_stclips(small_synth.train.store, boxes, 4))
    keys = [(c.video_id, c.frame_index) for c in clips]
    assert keys == sorted(keys)
    rng = np.random.default_rng(0)
    store = small_synth.train.store
    for c in rng.choice(clips, 10, replace=False):
        b = c.box
        assert b.video_id == c.video_id and b.frame_index == c.frame_index
        # every crop was taken at the final frame's box
        frames = [store.frame(c.video_id, c.frame_index - 4 + j) for j in range(5)]
        for j in range(5):
            np.testing.assert_array_equal(c.cube[j], crop_resize(frames[j], *b.as_tuple(), 32, 32))


# ------------------------------------------------------------------ synthetic

def test_synthetic_deterministic():
    cfg = SyntheticConfig(n_train_videos=1, n_test_videos=1, frames_per_video=30, seed=7)
    a, b = generate_synthetic_dataset(cfg), generate_synthetic_dataset(cfg)
    for split in ("train", "test"):
        sa, sb = getattr(a, split), getattr(b, split)
        for vid in sa.frames:
            assert sa.frames[vid].tobytes() == sb.frames[vid].tobytes()
            assert sa.labels[vid].labels.tobytes() == sb.labels[vid].labels.tobytes()
        assert sa.boxes == sb.boxes


def test_synthetic_seeds_differ():
    cfg = SyntheticConfig(n_train_videos=1, n_test_videos=1, frames_per_video=30)
    a, b = generate_synthetic_dataset(cfg, seed=1), generate_synthetic_dataset(cfg, seed=2)
    assert a.train.frames["train_00"].tobytes() != b.train.frames["train_00"].tobytes()


def test_zero_rate_all_normal():
    ds = generate_synthetic_dataset(SyntheticConfig(n_train_videos=1, n_test_videos=3, frames_per_video=60,
                                                    anomaly_rate=0.0))
    assert all(t.labels.sum() == 0 for t in ds.test.labels.values())


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_rate_out_of_range(rate):
    with pytest.raises(ValueError, match="anomaly_rate"):
        generate_synthetic_dataset(SyntheticConfig(anomaly_rate=rate))


def test_default_config_has_intervals():
    ds = generate_synthetic_dataset()
    assert len(ds.test.labels) == 4
    for t in ds.test.labels.values():
        assert len(t.labels) == 200 and t.labels.sum() > 0
    for t in ds.train.labels.values():
        assert t.labels.sum() == 0


def test_boxes_exact_and_inside(small_synth):
    size = small_synth.config.image_size
    for b in small_synth.test.boxes:
        assert 0 <= b.x1 < b.x2 <= size and 0 <= b.y1 < b.y2 <= size


def test_written_dataset_loads(tmp_path, small_synth):
    write_dataset(small_synth, tmp_path)
    store = load_frame_store(tmp_path, DatasetLayout("test"))
    assert store.video_ids == small_synth.test.store.video_ids
    vid = store.video_ids[0]
    np.testing.assert_array_equal(store.frame(vid, 5), small_synth.test.store.frame(vid, 5))
    assert load_boxes(tmp_path / "boxes_test.csv", store) == small_synth.test.boxes
    labels = load_labels(tmp_path / "labels_test.json")
    np.testing.assert_array_equal(labels[vid].labels, small_synth.test.labels[vid].labels)
