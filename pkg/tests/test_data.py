import numpy as np
import pytest

from salprop.data import DataError, SampleRecord, SynthConfig, generate, load_dir, save_dir
from salprop.metrics import iou
from salprop.net.losses import compute_class_weights
from salprop.regions import Box


def _tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box.from_corners(cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)


@pytest.mark.parametrize("shape", ["blob", "rect", "ring", "cross"])
def test_noise_free_box_covers_support(shape):
    cfg = SynthConfig(
        num_classes=1, shapes=(shape,), marginals=(1.0,), noise=0.0, intensity_range=(1.0, 1.0), seed=3
    )
    for rec in generate(cfg, 5):
        support = rec.image[0] > 0
        assert rec.labels[0] == 1
        assert rec.boxes[0] == _tight_box(support)


def test_generation_is_deterministic():
    a = generate(SynthConfig(seed=9), 6)
    b = generate(SynthConfig(seed=9), 6)
    for ra, rb in zip(a, b):
        assert ra.image_id == rb.image_id
        assert np.array_equal(ra.image, rb.image)
        assert np.array_equal(ra.labels, rb.labels)
        assert ra.boxes == rb.boxes


def test_marginal_rate():
    cfg = SynthConfig(num_classes=1, shapes=("rect",), marginals=(0.3,), seed=4, image_size=(32, 32), size_range=(4, 8))
    recs = generate(cfg, 1000)
    rate = np.mean([r.labels[0] for r in recs])
    assert abs(rate - 0.3) < 0.05


def test_boxes_present_only_for_positive_labels():
    for rec in generate(SynthConfig(seed=2, annotate_prob=0.5), 50):
        for label, box in zip(rec.labels, rec.boxes):
            if box is not None:
                assert label == 1
    assert rec.image.shape == (3, 128, 128)
    assert 0.0 <= rec.image.min() and rec.image.max() <= 1.0


def test_class_weights_on_generated_data():
    recs = generate(SynthConfig(seed=5, marginals=(0.1, 0.3, 0.5, 0.7)), 400)
    w = compute_class_weights(recs)
    np.testing.assert_allclose(w.beta_p + w.beta_n, 1.0)
    # 3 sigma binomial band at n=400
    np.testing.assert_allclose(w.beta_p, 1 - np.array([0.1, 0.3, 0.5, 0.7]), atol=0.075)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(size_range=(10, 500))
    with pytest.raises(ValueError):
        SynthConfig(marginals=(1.5, 0.1, 0.1, 0.1))
    with pytest.raises(ValueError):
        SynthConfig(shapes=("blob", "rect", "ring", "triangle"))


def test_round_trip(tmp_path):
    recs = generate(SynthConfig(seed=8, annotate_prob=0.7), 12)
    save_dir(recs, tmp_path)
    back = load_dir(tmp_path)
    assert [r.image_id for r in back] == [r.image_id for r in recs]
    for a, b in zip(recs, back):
        assert np.array_equal(a.labels, b.labels)
        assert a.boxes == b.boxes
        assert np.max(np.abs(np.asarray(a.image, float) - np.asarray(b.image, float))) <= 0.5 / 255 + 1e-7
        assert b.image.shape == (3, 128, 128)


def test_generated_boxes_match_own_iou():
    for rec in generate(SynthConfig(seed=1), 20):
        for b in rec.boxes:
            if b is not None:
                assert iou(b, b) == 1.0


def test_unknown_image_id_in_labels(tmp_path):
    save_dir(generate(SynthConfig(seed=1), 2), tmp_path)
    with open(tmp_path / "labels.csv", "a") as fh:
        fh.write("ghost,0,1,0,0\n")
    with pytest.raises(DataError, match="ghost"):
        load_dir(tmp_path)


def test_malformed_rows_report_line_numbers(tmp_path):
    save_dir(generate(SynthConfig(seed=1), 2), tmp_path)
    lines = (tmp_path / "labels.csv").read_text().splitlines()
    lines[2] = lines[2].rsplit(",", 1)[0]
    (tmp_path / "labels.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"labels.csv:3"):
        load_dir(tmp_path)


def test_malformed_box_row(tmp_path):
    recs = generate(SynthConfig(seed=1), 2)
    save_dir(recs, tmp_path)
    with open(tmp_path / "boxes.csv", "a") as fh:
        fh.write(f"{recs[0].image_id},1,abc,2,3,4\n")
    with pytest.raises(DataError, match="malformed"):
        load_dir(tmp_path)


def test_missing_image_file(tmp_path):
    recs = generate(SynthConfig(seed=1), 2)
    save_dir(recs, tmp_path)
    (tmp_path / "images" / f"{recs[1].image_id}.pgm").unlink()
    with pytest.raises(DataError, match=recs[1].image_id):
        load_dir(tmp_path)


def test_empty_boxes_file_means_all_absent(tmp_path):
    save_dir(generate(SynthConfig(seed=1), 3), tmp_path)
    (tmp_path / "boxes.csv").write_text("image_id,class_id,cx,cy,w,h\n")
    back = load_dir(tmp_path)
    assert all(b is None for r in back for b in r.boxes)


def test_png_images_are_accepted(tmp_path):
    from PIL import Image

    (tmp_path / "images").mkdir()
    Image.fromarray(np.full((8, 8), 255, dtype=np.uint8), mode="L").save(tmp_path / "images" / "p.png")
    (tmp_path / "labels.csv").write_text("image_id,c0\np,1\n")
    [rec] = load_dir(tmp_path)
    assert isinstance(rec, SampleRecord)
    assert rec.image.shape == (3, 8, 8) and rec.image.min() == 1.0
    assert rec.boxes == [None]
