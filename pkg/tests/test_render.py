import csv
import json
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from ibq import harness, render
from ibq import infoplane as ip

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def artifacts():
    cfg = replace(harness.preset("SYN-TANH-8BIT"), repetitions=2, epochs=3, retry_threshold=None)
    return harness.run_experiment(cfg)


def _traj(xt, ty, epochs=None):
    xt, ty = np.atleast_2d(xt).astype(float), np.atleast_2d(ty).astype(float)
    e = xt.shape[0]
    epochs = np.arange(1, e + 1) if epochs is None else epochs
    return ip.InfoTrajectory(0, epochs, xt, ty, np.zeros(e), np.zeros(e), np.zeros(e))


def _markers(doc):
    root = ET.fromstring(doc)
    return [(float(c.get("cx")), float(c.get("cy"))) for c in root.iter(SVG + "circle")
            if c.get("class") == "marker"]


class TestLogs:
    def test_row_count(self, tmp_path):
        cfg = replace(harness.preset("SYN-TANH-8BIT"), repetitions=1, epochs=2, retry_threshold=None)
        art = harness.run_experiment(cfg)
        render.write_logs(art, tmp_path)
        lines = (tmp_path / "runs.csv").read_text().split("\n")
        assert lines[0] == ",".join(render.RUN_COLUMNS)
        # 2 epochs x 6 layers, plus header and the trailing newline
        assert len(lines) == 14 and lines[-1] == ""

    def test_csv_round_trip_exact(self, tmp_path, artifacts):
        render.write_logs(artifacts, tmp_path)
        back = render.load_logs(tmp_path)
        for a, b in zip(artifacts.trajectories, back.trajectories):
            for f in ("epochs", "i_xt", "i_ty", "train_acc", "test_acc", "loss"):
                assert np.array_equal(getattr(a, f), getattr(b, f))
        assert np.array_equal(back.aggregate.mean_xt, artifacts.aggregate.mean_xt)
        assert back.config == artifacts.config

    def test_aggregate_csv(self, tmp_path, artifacts):
        render.write_logs(artifacts, tmp_path)
        with open(tmp_path / "aggregate.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3 * 6
        first = rows[0]
        assert float(first["mean_i_xt_bits"]) == artifacts.aggregate.mean_xt[0, 0]
        assert float(first["test_acc_ci95"]) == artifacts.accuracy.test_ci[0]

    def test_metadata(self, tmp_path, artifacts):
        render.write_logs(artifacts, tmp_path)
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["preset"] == "SYN-TANH-8BIT"
        assert meta["master_seed"] == 0
        assert meta["config"]["epochs"] == 3
        assert meta["retry_log"] == []
        assert meta["median_deviating_run"] in (0, 1)

    def test_binned_file(self, tmp_path):
        cfg = replace(harness.preset("SYN-TANH-8BIT"), repetitions=1, epochs=2, retry_threshold=None,
                      mi_mode="both", bins=30, bin_quantized=True)
        art = harness.run_experiment(cfg)
        render.write_logs(art, tmp_path)
        back = render.load_logs(tmp_path)
        assert np.array_equal(back.trajectories[0].binned_i_ty, art.trajectories[0].binned_i_ty)

    def test_unwritable(self, tmp_path, artifacts):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            render.write_logs(artifacts, blocker / "sub")


class TestPlane:
    def test_single_point(self):
        doc = render.plot_plane(_traj([[3.0]], [[0.4]]))
        (x, y), = _markers(doc)
        # main panel box
        assert 70 <= x <= 430 and 40 <= y <= 340

    def test_auto_expand(self):
        doc = render.plot_plane(_traj([[15.0], [-1.0]], [[2.5], [0.1]]))
        for x, y in _markers(doc):
            assert 70 <= x <= 430 and 40 <= y <= 340

    def test_deterministic(self):
        t = _traj(np.random.default_rng(0).uniform(0, 12, (5, 3)), np.random.default_rng(1).uniform(0, 1, (5, 3)))
        style = render.PlaneStyle(zoom=((9.0, 12.0), (0.5, 1.0)))
        assert render.plot_plane(t, style) == render.plot_plane(t, style)

    def test_well_formed_with_zoom(self):
        t = _traj([[11.0, 10.0], [11.5, 9.0]], [[0.9, 0.8], [0.95, 0.7]])
        root = ET.fromstring(render.plot_plane(t, render.PlaneStyle(zoom=((9.0, 12.0), (0.5, 1.0)))))
        assert root.tag == SVG + "svg"
        assert len(_markers(ET.tostring(root).decode())) == 8

    def test_empty(self):
        t = ip.InfoTrajectory(0, [], np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0), np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            render.plot_plane(t)

    @pytest.mark.parametrize("bad", [(1.0, 1.0), (0.0, float("inf")), (2.0, 1.0)])
    def test_style_validation(self, bad):
        with pytest.raises(ValueError):
            render.PlaneStyle(x_range=bad)

    def test_epoch_colors(self):
        assert render.epoch_color(0.0) == "#440154"
        assert render.epoch_color(1.0) == "#fde725"
        assert render.epoch_color(0.3) != render.epoch_color(0.7)


class TestCurves:
    def _flat(self, runs):
        ts = [ip.InfoTrajectory(r, [1, 2, 3], np.ones((3, 2)), np.ones((3, 2)) * 0.5,
                                np.full(3, 0.5), np.full(3, 0.5), np.zeros(3)) for r in range(runs)]
        cfg = harness.preset("SYN-TANH-8BIT")
        return harness.assemble(cfg, ts, [])

    def _line_ys(self, doc, cls):
        root = ET.fromstring(doc)
        line = next(p for p in root.iter(SVG + "polyline") if p.get("class") == cls)
        return {pt.split(",")[1] for pt in line.get("points").split()}

    def test_flat_accuracy(self):
        art = self._flat(3)
        doc = render.plot_curves(art, "accuracy")
        ys = self._line_ys(doc, "test")
        assert len(ys) == 1
        # y range [0, 1] mapped onto 300 px starting at 40: 0.5 -> 190
        assert float(ys.pop()) == 190.0
        assert not art.accuracy.test_ci.any()

    def test_single_repetition_band_collapses(self):
        art = self._flat(1)
        assert not art.aggregate.var_xt.any()
        ET.fromstring(render.plot_curves(art, "mi_vs_epoch"))

    def test_deterministic_and_kinds(self, artifacts):
        for kind in ("accuracy", "mi_vs_epoch"):
            doc = render.plot_curves(artifacts, kind)
            assert doc == render.plot_curves(artifacts, kind)
            ET.fromstring(doc)
        with pytest.raises(ValueError):
            render.plot_curves(artifacts, "pie")


class TestFigures:
    def test_render_from_logs_matches(self, tmp_path, artifacts):
        a, b = tmp_path / "a", tmp_path / "b"
        render.write_logs(artifacts, a)
        render.render_figures(artifacts, a)
        render.render_figures(render.load_logs(a), b)
        for name in ("plane.svg", "plane_median_run.svg", "mi_vs_epoch.svg", "accuracy.svg"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
            ET.parse(a / name)
