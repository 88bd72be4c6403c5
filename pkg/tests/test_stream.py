import csv
import math

import numpy as np
import pytest

from delaycomp.depth import SyntheticDepth, synthetic_sequence
from delaycomp.errors import DelayCompError
from delaycomp.geometry import CameraIntrinsics
from delaycomp.kinematics import CommandBuffer, VelocityCommand
from delaycomp.stream import (
    EVAL_COLUMNS,
    FrameLogEntry,
    FrameRef,
    NetworkConditions,
    PipelineConfig,
    StampedFrame,
    delivered_rate,
    emulate_link,
    predict_camera_pose,
    run_live,
    run_offline_eval,
    summarize,
)

INTR = CameraIntrinsics(100.0, 100.0, 79.5, 44.5, 160, 90)


@pytest.fixture(scope="module")
def source():
    return SyntheticDepth(synthetic_sequence("corridor", 24, seed=4, intr=INTR))


def refs(n, rate=30.0):
    return [FrameRef(i, i / rate, i / rate) for i in range(n)]


class TestConfig:
    def test_network_validation(self):
        for bad in (dict(base_delay=-1), dict(jitter_stddev=-0.1), dict(skip=-1), dict(drop_probability=1.5)):
            with pytest.raises(ValueError):
                NetworkConditions(**bad)
        assert NetworkConditions(skip=0).keep_every == 1

    def test_pipeline_validation(self):
        for bad in (dict(display_period=0), dict(method="magic"), dict(horizon="later"), dict(homography_plane="wall")):
            with pytest.raises(ValueError):
                PipelineConfig(**bad)
        assert PipelineConfig(horizon=3).horizon == 3

    def test_frame_times(self):
        with pytest.raises(ValueError):
            FrameRef(0, 1.0, 0.5)
        with pytest.raises(ValueError):
            StampedFrame(None, None, None, 1.0, 0.9)


class TestLink:
    def test_passthrough(self):
        frames = refs(10)
        assert emulate_link(frames, NetworkConditions()) == frames

    def test_drop_everything(self):
        assert emulate_link(refs(10), NetworkConditions(drop_probability=1.0)) == []

    @pytest.mark.parametrize("skip,fps", [(5, 6.0), (10, 3.0)])
    def test_decimation(self, skip, fps):
        out = emulate_link(refs(90), NetworkConditions(skip=skip))
        assert [f.index for f in out] == list(range(0, 90, skip))
        assert delivered_rate(out) == pytest.approx(fps)

    def test_delay_and_jitter(self):
        cond = NetworkConditions(base_delay=0.25, jitter_stddev=0.01, seed=3)
        out = emulate_link(refs(60), cond)
        lat = np.array([f.arrival_time - f.capture_time for f in out])
        assert np.all(lat >= 0) and abs(lat.mean() - 0.25) < 0.01
        assert out == emulate_link(refs(60), cond)
        assert out != emulate_link(refs(60), NetworkConditions(0.25, 0.01, seed=4))

    def test_order_preserved_under_heavy_jitter(self):
        out = emulate_link(refs(200), NetworkConditions(base_delay=0.1, jitter_stddev=0.2, seed=1))
        caps = [f.capture_time for f in out]
        arr = [f.arrival_time for f in out]
        assert caps == sorted(caps) and arr == sorted(arr)
        assert len(out) < 200  # overtaken frames are discarded

    def test_requires_increasing_times(self):
        with pytest.raises(ValueError):
            emulate_link([FrameRef(0, 1.0, 1.0), FrameRef(1, 1.0, 1.0)], NetworkConditions())


class TestLive:
    def test_cadence_causality_and_latency(self, source):
        cond = NetworkConditions(base_delay=0.1, jitter_stddev=0.005, skip=2, seed=2)
        res = run_live(source, cond, PipelineConfig())
        log = res.log
        times = [e.display_time for e in log]
        assert np.allclose(np.diff(times), 1 / 30, rtol=0, atol=1e-12)
        assert log.causality_violations() == 0
        real = [e for e in log if not e.placeholder]
        assert real and log.entries[0].placeholder
        for e in real:
            assert abs(e.effective_latency - 0.1) < 0.03
            assert e.frame_age >= e.effective_latency - 1e-12

    def test_deterministic(self, source):
        cond = NetworkConditions(base_delay=0.1, jitter_stddev=0.01, skip=3, seed=9)
        a = run_live(source, cond, keep_frames=True)
        b = run_live(source, cond, keep_frames=True)
        assert a.log.entries == b.log.entries
        assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))

    def test_starvation_still_emits(self, source):
        res = run_live(source, NetworkConditions(drop_probability=1.0), n_ticks=10, keep_frames=True)
        assert len(res.log) == 10 and all(e.placeholder for e in res.log)
        assert len(res.frames) == 10

    def test_zero_velocity_reduces_to_redisplay(self, source):
        stop = [VelocityCommand(0.0, 0.0, 0.0)]
        res = run_live(source, NetworkConditions(base_delay=0.2), commands=stop, keep_frames=True)
        seq = source.sequence
        for e, img in zip(res.log, res.frames):
            if e.placeholder:
                continue
            raw = seq.frame(e.source_index)[0]
            assert e.hole_fraction == 0.0
            np.testing.assert_allclose(img, raw, atol=1e-9)

    def test_zero_delay_beats_raw(self, source):
        res = run_live(source, NetworkConditions(skip=1))
        scored = [e for e in res.log if e.psnr is not None]
        assert sum(e.psnr >= e.psnr_raw for e in scored) >= 0.8 * len(scored)

    @pytest.mark.parametrize("method", ["homography", "cropscale"])
    def test_other_methods_run(self, source, method):
        res = run_live(source, NetworkConditions(base_delay=0.1), PipelineConfig(method=method), n_ticks=8)
        assert res.log.causality_violations() == 0

    def test_fixed_horizon(self, source):
        res = run_live(source, NetworkConditions(base_delay=0.2), PipelineConfig(horizon=0), n_ticks=12)
        e = res.log.entries[-1]
        pose = source.sequence.poses[e.source_index]
        assert e.pred_x == pytest.approx(pose.translation[0])

    def test_wall_clock_mode(self, source):
        res = run_live(source, NetworkConditions(base_delay=0.05), n_ticks=6, clock="wall", evaluate=False)
        assert len(res.log) == 6 and res.log.causality_violations() == 0
        assert [e.tick for e in res.log] == list(range(6))

    def test_depth_hook_is_called(self, source):
        seen = []

        def hook(image, depth):
            seen.append(depth.shape)
            return depth

        run_live(source, NetworkConditions(), n_ticks=3, depth_hook=hook, evaluate=False)
        assert seen

    def test_log_csv(self, source, tmp_path):
        res = run_live(source, NetworkConditions(base_delay=0.1), n_ticks=5)
        res.log.write_csv(tmp_path / "log.csv")
        res.log.write_timings(tmp_path / "t.csv")
        rows = list(csv.DictReader(open(tmp_path / "log.csv")))
        assert len(rows) == 5 and "render_ms" not in rows[0] and rows[0]["placeholder"] == "1"
        assert "render_ms" in next(csv.DictReader(open(tmp_path / "t.csv")))


def test_log_entry_equality_ignores_timings():
    a = FrameLogEntry(0, 0.0, True, render_ms=5.0)
    b = FrameLogEntry(0, 0.0, True, render_ms=9.0)
    assert a == b


def test_predict_camera_pose_without_commands(source):
    seq = source.sequence
    pose, _, no_commands = predict_camera_pose(seq.poses[3], 0.1, 0.5, CommandBuffer(), seq.params)
    assert no_commands and pose == seq.poses[3]


def test_predict_camera_pose_follows_sequence(source):
    seq = source.sequence
    cmds = CommandBuffer(seq.commands)
    pose, _, _ = predict_camera_pose(seq.poses[2], seq.timestamps[2], seq.timestamps[9], cmds, seq.params)
    np.testing.assert_allclose(pose.matrix, seq.poses[9].matrix, atol=1e-9)


class TestOffline:
    def test_rows_and_self_reprojection(self, source, tmp_path):
        rows = run_offline_eval(source, [0, 2], ["pointcloud", "cropscale"], out_csv=tmp_path / "m.csv",
                                frame_stride=4)
        assert len(rows) == 6 * 2 * 2
        assert list(next(csv.reader(open(tmp_path / "m.csv")))) == list(EVAL_COLUMNS)
        k0 = [r for r in rows if r["delay_steps"] == 0 and r["method"] == "pointcloud"]
        assert all(r["psnr"] >= 40.0 and r["abs_rel"] < 1e-9 for r in k0)
        assert all(math.isnan(r["abs_rel"]) for r in rows if r["method"] == "cropscale")
        means = summarize(rows)
        assert set(means) == {(m, k) for m in ("pointcloud", "cropscale") for k in (0, 2)}
        assert means[("cropscale", 0)] == 99.0

    def test_predicted_pose_matches_recorded_on_synthetic(self, source):
        a = run_offline_eval(source, [3], ["pointcloud"], frame_stride=10)
        b = run_offline_eval(source, [3], ["pointcloud"], frame_stride=10, predicted_pose=True)
        for x, y in zip(a, b):
            assert y["psnr"] == pytest.approx(x["psnr"], abs=0.5)

    def test_too_short(self, source):
        with pytest.raises(DelayCompError):
            run_offline_eval(source, [30], ["pointcloud"])
        with pytest.raises(ValueError):
            run_offline_eval(source, [1], ["sota"])
