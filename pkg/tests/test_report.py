import numpy as np
import pytest

from vcaseg.errors import ShapeError
from vcaseg.metrics import aggregate, confusion, dsc, evaluate_pair, iou, precision, sensitivity
from vcaseg.report import (
    OverlaySpec, decode_overlay, overlay_rgb, read_mask_png, read_rows_csv, render_overlay, write_csv,
    write_mask_png,
)


def _mask(rng, shape=(24, 20), p=0.2):
    return (rng.random(shape) < p).astype(np.uint8)


class TestRowsCsv:
    def test_perfect_row(self, tmp_path):
        m = np.zeros((224, 192), np.uint8)
        m[5:9, 5:9] = 1
        write_csv([evaluate_pair(m, m, "vol1", 10)], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "volume_id,slice_index,dsc,iou,hd,sensitivity,precision,f1,tp,fp,tn,fn"
        assert lines[1].startswith("vol1,10,1.000000,1.000000,0.000000,1.000000,1.000000,1.000000,16,0,")

    def test_both_empty_row_has_blank_fields(self, tmp_path):
        z = np.zeros((4, 4), np.uint8)
        write_csv([evaluate_pair(z, z, "v", 0)], tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[1] == "v,0,,,,,,,0,0,16,0"

    def test_reparse_recompute(self, tmp_path, rng):
        rows = [evaluate_pair(_mask(rng), _mask(rng), "v", k) for k in range(10)]
        write_csv(rows, tmp_path / "r.csv")
        for r in read_rows_csv(tmp_path / "r.csv"):
            c = r.counts
            for value, fn in ((r.dsc, dsc), (r.iou, iou), (r.sensitivity, sensitivity), (r.precision, precision)):
                expect = fn(c)
                assert (value is None) == (expect is None)
                if expect is not None:
                    assert value == pytest.approx(expect, abs=5e-7)

    def test_summary(self, tmp_path, rng):
        rows = [evaluate_pair(_mask(rng), _mask(rng)) for _ in range(3)]
        write_csv({m: aggregate(rows, m) for m in ("exclude_undefined", "count_empty_match_as_one")}, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0].startswith("aggregation,dsc,iou,hd,sensitivity,precision,f1")
        assert [ln.split(",")[0] for ln in lines[1:]] == ["modeA", "modeB"]

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError, match="missing"):
            write_csv([], tmp_path / "missing" / "r.csv")


class TestOverlay:
    def test_identical_only_green(self, tmp_path, rng):
        m = _mask(rng)
        path = render_overlay(OverlaySpec(rng.random(m.shape), m, m, str(tmp_path / "o.png")))
        cls = decode_overlay(path)
        assert set(np.unique(cls)) <= {0, 1} and (cls == 1).sum() == m.sum()

    def test_empty_pred_only_blue(self, tmp_path, rng):
        t = _mask(rng)
        cls = decode_overlay(render_overlay(OverlaySpec(rng.random(t.shape), np.zeros_like(t), t, str(tmp_path / "o.png"))))
        assert set(np.unique(cls)) <= {0, 3} and (cls == 3).sum() == t.sum()

    def test_untinted_pixels_gray(self, rng):
        rgb = overlay_rgb(rng.random((6, 6)), np.zeros((6, 6)), np.zeros((6, 6)))
        assert np.all(rgb[..., 0] == rgb[..., 1]) and np.all(rgb[..., 1] == rgb[..., 2])

    @pytest.mark.parametrize("extreme", [0.0, 1.0])
    def test_classes_survive_extreme_gray(self, extreme, rng):
        p, t = _mask(rng, p=0.5), _mask(rng, p=0.5)
        rgb = overlay_rgb(np.full(p.shape, extreme), p, t)
        assert rgb.shape == p.shape + (3,)
        assert (rgb.max(axis=2) - rgb.min(axis=2) > 0).sum() == (p | t).sum()

    def test_histogram_matches_counts(self, tmp_path, rng):
        for k in range(20):
            p, t = _mask(rng, (224, 192), 0.1), _mask(rng, (224, 192), 0.1)
            cls = decode_overlay(render_overlay(OverlaySpec(rng.random(p.shape), p, t, str(tmp_path / f"{k}.png"))))
            c = confusion(p, t)
            assert np.bincount(cls.ravel(), minlength=4).tolist() == [c.tn, c.tp, c.fp, c.fn]

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ShapeError):
            overlay_rgb(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)))


def test_mask_png_round_trip(tmp_path, rng):
    m = _mask(rng)
    write_mask_png(m, tmp_path / "m.png")
    np.testing.assert_array_equal(read_mask_png(tmp_path / "m.png"), m)
