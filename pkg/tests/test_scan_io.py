import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_bao.geom import RigidTransform, exp_so3
from lidar_bao.motion_model import compensate_points, to_world
from lidar_bao.scan_io import (
    Scan,
    ScanFormatError,
    format_pose_line,
    list_scan_files,
    read_scan_file,
    read_trajectory,
    write_scan_directory,
    write_scan_file,
    write_trajectory,
)
from lidar_bao.synthetic import (
    BeamModel,
    ConstantVelocityTrajectory,
    PlaneRecord,
    SyntheticWorld,
    WorldConfig,
    corridor_world,
    generate_world,
    simulate_scan,
)

from conftest import SMALL_BEAM, surface_distance

HEADER = "# lmbao-scan v1 start=0.000000000 duration=0.100000000\n"


class TestScanFile:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text(HEADER + "1 2 3 0\n4 5 6 0.05\n7 8 9 0.1\n")
        scan = read_scan_file(p)
        assert len(scan) == 3
        np.testing.assert_array_equal(scan.points[1], [4, 5, 6])
        assert scan.start_time == 0.0 and scan.sweep_duration == 0.1

    def test_non_numeric_names_row(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text(HEADER + "1 2 3 0\nabc 5 6 0.05\n")
        with pytest.raises(ScanFormatError, match=r"row 3, column 1 \(x\)"):
            read_scan_file(p)

    @pytest.mark.parametrize("body, pattern", [
        ("1 2 3\n", "expected 4 columns"),
        ("1 2 3 0.05\n1 2 3 0.06\n", "start=.*differs"),
        ("1 2 3 0\n1 2 3 0.05\n1 2 3 0.01\n", "row 4: timestamps decrease"),
        ("1 2 nan 0\n", "non-finite"),
        ("", "no points"),
    ])
    def test_malformed_bodies(self, tmp_path, body, pattern):
        p = tmp_path / "s.txt"
        p.write_text(HEADER + body)
        with pytest.raises(ScanFormatError, match=pattern):
            read_scan_file(p)

    def test_bad_header_and_missing_file(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("1 2 3 0\n")
        with pytest.raises(ScanFormatError, match="bad header"):
            read_scan_file(p)
        p.write_text("")
        with pytest.raises(ScanFormatError, match="empty"):
            read_scan_file(p)
        with pytest.raises(FileNotFoundError):
            read_scan_file(tmp_path / "missing.txt")

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text(HEADER + "# note\n\n1 2 3 0\n")
        assert len(read_scan_file(p)) == 1

    def test_scan_validation(self):
        with pytest.raises(ValueError):
            Scan(0, 0.0, np.zeros((0, 3)), np.zeros(0), 0.1)
        with pytest.raises(ValueError):
            Scan(0, 0.0, np.zeros((2, 3)), np.zeros(3), 0.1)
        with pytest.raises(ValueError):
            Scan(0, 0.0, np.zeros((2, 3)), np.array([0.1, 0.0]), 0.1)

    def test_round_trip_generated_scan(self, tmp_path):
        world = corridor_world()
        traj = ConstantVelocityTrajectory(RigidTransform(np.eye(3), [0, 0, 1.8]), [5.0, 0.3, 0.0], [0, 0, 0.2])
        scan = simulate_scan(world, traj, 0.3, 0.1, SMALL_BEAM, noise_sigma=0.01, index=7)
        write_scan_file(scan, tmp_path / "s.txt")
        back = read_scan_file(tmp_path / "s.txt", index=7)
        assert len(back) == len(scan)
        assert np.abs(back.points - scan.points).max() <= 5e-7 + 1e-12
        assert np.abs(back.timestamps - scan.timestamps).max() <= 5e-10 + 1e-15
        assert back.start_time == pytest.approx(scan.start_time, abs=5e-10)
        assert back.sweep_duration == pytest.approx(scan.sweep_duration, abs=5e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(*[st.floats(-100, 100, allow_nan=False)] * 3), min_size=1, max_size=20))
    def test_round_trip_is_lossless_at_six_decimals(self, tmp_path_factory, rows):
        pts = np.round(np.array(rows), 6)
        ts = np.linspace(1.0, 1.1, len(pts))
        scan = Scan(0, 1.0, pts, ts, 0.1)
        path = tmp_path_factory.mktemp("rt") / "s.txt"
        write_scan_file(scan, path)
        back = read_scan_file(path)
        np.testing.assert_allclose(back.points, pts, rtol=0, atol=1e-9)
        np.testing.assert_allclose(back.timestamps, ts, rtol=0, atol=5e-10)

    def test_directory_listing_is_sorted(self, tmp_path):
        scans = [Scan(i, float(i), np.ones((1, 3)), [float(i)], 0.1) for i in range(3)]
        paths = write_scan_directory(scans, tmp_path / "d")
        assert [p.name for p in paths] == ["scan_000000.txt", "scan_000001.txt", "scan_000002.txt"]
        assert list_scan_files(tmp_path / "d") == paths
        with pytest.raises(FileNotFoundError):
            list_scan_files(tmp_path / "nope")


class TestTrajectoryFile:
    def test_identity_line(self):
        assert format_pose_line(0.0, RigidTransform.identity()) == "0.000000 0 0 0 0 0 0 1"

    def test_translation_line(self):
        assert format_pose_line(2.5, RigidTransform(np.eye(3), [1, 2, 3])) == "2.500000 1 2 3 0 0 0 1"

    def test_quarter_turn_quaternion(self, tmp_path):
        write_trajectory([(0.0, RigidTransform(exp_so3([0, 0, math.pi / 2]), np.zeros(3)))], tmp_path / "t.txt")
        fields = (tmp_path / "t.txt").read_text().split()
        np.testing.assert_allclose([float(f) for f in fields[4:]], [0, 0, math.sqrt(2) / 2, math.sqrt(2) / 2],
                                   atol=1e-6)
        back = read_trajectory(tmp_path / "t.txt")
        np.testing.assert_allclose(back[0][1].rotation, exp_so3([0, 0, math.pi / 2]), atol=1e-6)

    def test_round_trip_and_order(self, tmp_path, rng):
        states = [(0.1 * k, RigidTransform(exp_so3(rng.normal(size=3)), rng.normal(size=3))) for k in range(5)]
        write_trajectory(states, tmp_path / "t.txt")
        back = read_trajectory(tmp_path / "t.txt")
        for (t0, a), (t1, b) in zip(states, back):
            assert t1 == pytest.approx(t0, abs=1e-6)
            np.testing.assert_allclose(b.translation, a.translation, atol=1e-6)
            np.testing.assert_allclose(b.rotation, a.rotation, atol=1e-5)
        with pytest.raises(ValueError):
            write_trajectory(states[::-1], tmp_path / "u.txt")

    def test_malformed(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("0 1 2 3\n")
        with pytest.raises(ScanFormatError, match="row 1"):
            read_trajectory(p)
        p.write_text("0 1 2 3 0 0 0 x\n")
        with pytest.raises(ScanFormatError, match="not numeric"):
            read_trajectory(p)


class TestWorld:
    def test_same_seed_same_world(self):
        a, b = generate_world(WorldConfig(), 1), generate_world(WorldConfig(), 1)
        assert len(a.planes) == len(b.planes)
        for p, q in zip(a.planes, b.planes):
            assert np.array_equal(p.point, q.point) and np.array_equal(p.normal, q.normal)
            assert p.half_extents == q.half_extents
        for p, q in zip(a.edges, b.edges):
            assert np.array_equal(p.point, q.point) and p.half_length == q.half_length
        c = generate_world(WorldConfig(), 2)
        assert not np.array_equal(a.planes[0].point, c.planes[0].point)

    def test_empty_world(self):
        w = generate_world(WorldConfig(n_planes=0, n_edges=0), 0)
        assert w.planes == [] and w.edges == []

    def test_planes_inside_bounds(self):
        cfg = WorldConfig(n_planes=10, n_edges=4)
        w = generate_world(cfg, 3)
        assert len(w.planes) == 10 and len(w.edges) == 4
        lo, hi = np.array(cfg.bounds_min), np.array(cfg.bounds_max)
        for pl in w.planes:
            c = pl.corners()
            assert np.all(c >= lo - 1e-9) and np.all(c <= hi + 1e-9)
        for e in w.edges:
            c = e.endpoints()
            assert np.all(c >= lo - 1e-9) and np.all(c <= hi + 1e-9)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            generate_world(WorldConfig(n_planes=-1), 0)


class TestSimulator:
    def test_stationary_over_floor(self):
        world = SyntheticWorld([PlaneRecord((0, 0, -1), (0, 0, 1), (1e4, 1e4))])
        beam = BeamModel(columns=360, rings=8, fov_min_deg=-40, fov_max_deg=-10)
        scan = simulate_scan(world, ConstantVelocityTrajectory(), 0.0, 0.1, beam)
        assert len(scan) == 360 * 8
        np.testing.assert_allclose(scan.points[:, 2], -1.0, rtol=0, atol=1e-12)
        # identity motion: compensation leaves the scan bit-identical
        comp = compensate_points(scan.points, scan.timestamps, np.zeros(3), np.zeros(3), scan.start_time)
        assert np.array_equal(comp, scan.points)

    def test_firing_times(self):
        world = corridor_world()
        beam = BeamModel(columns=100, rings=4)
        scan = simulate_scan(world, ConstantVelocityTrajectory(RigidTransform(np.eye(3), [0, 0, 1.8])), 2.0, 0.1, beam)
        cols = np.rint((scan.timestamps - 2.0) * 1000).astype(int)
        assert set(cols) <= set(range(100))
        assert np.all(np.diff(scan.timestamps) >= 0)

    def test_compensation_recovers_surfaces(self):
        world = corridor_world()
        traj = ConstantVelocityTrajectory(RigidTransform(exp_so3([0, 0, 0.1]), [1.0, 0.5, 1.8]),
                                          np.array([5.0, 0.5, 0.1]), np.array([0.02, -0.03, 0.4]), t0=0.0)
        scan = simulate_scan(world, traj, 0.5, 0.1, SMALL_BEAM)
        state = traj.state(scan.start_time)
        comp = compensate_points(scan.points, scan.timestamps, state.linear_velocity, state.angular_velocity,
                                 state.start_time)
        w = to_world(state, comp)
        assert surface_distance(world, w).max() < 1e-9
        # without compensation the sweep is visibly distorted
        raw_world = to_world(state, scan.points)
        assert surface_distance(world, raw_world).max() > 0.1

    def test_range_noise_statistics(self):
        world = corridor_world()
        traj = ConstantVelocityTrajectory(RigidTransform(np.eye(3), [3.0, 0.0, 1.8]))
        clean = simulate_scan(world, traj, 0.0, 0.1, SMALL_BEAM)
        noisy = simulate_scan(world, traj, 0.0, 0.1, SMALL_BEAM, noise_sigma=0.01, rng=np.random.default_rng(4))
        assert len(clean) == len(noisy) >= 10_000
        along_ray = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
        assert 0.008 <= along_ray.std() <= 0.012
        assert abs(along_ray.mean()) < 0.001

    def test_no_hits_is_an_error(self):
        with pytest.raises(ValueError, match="no intersections"):
            simulate_scan(SyntheticWorld(), ConstantVelocityTrajectory(), 0.0, 0.1, BeamModel(columns=10, rings=2))
