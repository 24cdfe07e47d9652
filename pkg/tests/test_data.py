import dataclasses
import math

import numpy as np
import pytest

from trajdiffuse.data import (
    ETHUCY_SCENES,
    ParseError,
    Perturbation,
    RawTrack,
    TrajectoryScene,
    apply_perturbation,
    build_scene_graph,
    export_scene_csv,
    leave_one_out_split,
    load_ethucy,
    load_scene_csv,
    make_windows,
    write_ethucy,
)
from trajdiffuse.mathutils import RngStream


def straight_scene(n_agents=1, t_hist=8, t_fut=12, speed=0.5, angle=0.0):
    t_full = t_hist + t_fut
    steps = np.arange(t_full)
    direction = np.array([math.cos(angle), math.sin(angle)])
    pos = np.stack([
        np.array([3.0 * a, -2.0 * a]) + steps[:, None] * speed * direction
        for a in range(n_agents)
    ])
    return TrajectoryScene(
        positions=pos, t_hist=t_hist, t_fut=t_fut,
        obs_mask=np.ones((n_agents, t_hist), dtype=bool), scene_id="straight",
    )


class TestLoadEthucy:
    def test_single_track(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("0 1 0.0 0.0\n10 1 1.0 0.0\n")
        tracks = load_ethucy(f)
        assert len(tracks) == 1
        assert tracks[0].pedestrian_id == 1
        assert tracks[0].frame_ids.tolist() == [0, 10]
        np.testing.assert_allclose(tracks[0].positions, [[0, 0], [1, 0]])

    def test_interleaved_tracks_sorted(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("10 2 5 5\n0 1 0 0\n0 2 4 4\n10 1 1 1\n")
        tracks = load_ethucy(f)
        assert [t.pedestrian_id for t in tracks] == [1, 2]
        for t in tracks:
            assert (np.diff(t.frame_ids) > 0).all()

    def test_malformed_line_names_line_number(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("0 1 abc 0.0\n")
        with pytest.raises(ParseError) as err:
            load_ethucy(f)
        assert err.value.line == 1
        assert "line 1" in str(err.value)

    def test_wrong_field_count(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("0 1 0.0\n")
        with pytest.raises(ParseError, match="expected 4 fields"):
            load_ethucy(f)

    def test_empty_file(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("")
        assert load_ethucy(f) == []

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("# header\n\n0 1 0.0 0.0\n")
        assert len(load_ethucy(f)) == 1

    def test_duplicate_frames_rejected(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("0 1 0 0\n0 1 1 1\n")
        with pytest.raises(ParseError, match="duplicate"):
            load_ethucy(f)


class TestMakeWindows:
    def _track(self, ped, start, count, stride=10):
        frames = np.arange(start, start + count * stride, stride)
        pos = np.stack([np.linspace(0, 1, count) * ped, np.zeros(count)], axis=1)
        return RawTrack(pedestrian_id=ped, frame_ids=frames, positions=pos)

    def test_exact_window_one_scene(self):
        scenes = make_windows([self._track(1, 0, 20)], 8, 12, 1)
        assert len(scenes) == 1
        assert scenes[0].n_agents == 1
        assert scenes[0].obs_mask.all()

    def test_21_frames_two_scenes(self):
        scenes = make_windows([self._track(1, 0, 21)], 8, 12, 1)
        assert len(scenes) == 2

    def test_partial_overlap_excluded(self):
        # Distinct frames 0..200 step 10 (21 entries) -> windows 0..190 and
        # 10..200. Ped 1 covers 0..190 only, ped 3 covers 10..200 only, and
        # ped 2 (frames 10..190) overlaps each window on just 19 of 20
        # frames, so it appears in neither scene.
        tracks = [
            self._track(1, 0, 20),
            self._track(2, 10, 19),
            self._track(3, 10, 20),
        ]
        scenes = make_windows(tracks, 8, 12, 1)
        assert len(scenes) == 2
        first, second = scenes
        assert first.ped_ids == (1,)
        assert second.ped_ids == (3,)

    def test_positions_copied_verbatim(self):
        track = self._track(5, 0, 20)
        scene = make_windows([track], 8, 12, 1)[0]
        np.testing.assert_array_equal(scene.positions[0], track.positions)

    def test_stride(self):
        scenes = make_windows([self._track(1, 0, 24)], 8, 12, 2)
        assert len(scenes) == 3

    def test_no_windows_for_short_tracks(self):
        assert make_windows([self._track(1, 0, 19)], 8, 12, 1) == []


class TestSceneGraph:
    def test_single_stationary_agent(self):
        pos = np.zeros((1, 20, 2))
        scene = TrajectoryScene(
            positions=pos, t_hist=8, t_fut=12,
            obs_mask=np.ones((1, 8), dtype=bool),
        )
        g = build_scene_graph(scene)
        np.testing.assert_array_equal(g.nodes, np.zeros((1, 20, 2)))
        assert g.headings[0] == 0.0
        np.testing.assert_allclose(g.edges[0, 0], [0, 1, 0, 0, 1, 0])

    def test_two_agent_hand_geometry(self):
        # Both heading +x; current positions (0,0) and (3,4).
        t_hist, t_fut = 2, 1
        pos = np.array([
            [[-0.5, 0.0], [0.0, 0.0], [0.5, 0.0]],
            [[2.5, 4.0], [3.0, 4.0], [3.5, 4.0]],
        ])
        scene = TrajectoryScene(positions=pos, t_hist=t_hist, t_fut=t_fut,
                                obs_mask=np.ones((2, 2), dtype=bool))
        g = build_scene_graph(scene)
        np.testing.assert_allclose(g.headings, [0.0, 0.0], atol=1e-12)
        d, rx, ry, theta, cos_t, sin_t = g.edges[0, 1]
        assert d == pytest.approx(5.0)
        assert (rx, ry) == (pytest.approx(0.6), pytest.approx(0.8))
        assert theta == pytest.approx(0.0)
        assert (cos_t, sin_t) == (pytest.approx(1.0), pytest.approx(0.0))

    def test_node_current_frame_at_origin(self):
        scene = straight_scene(n_agents=3, angle=0.7)
        g = build_scene_graph(scene)
        np.testing.assert_allclose(g.nodes[:, scene.t_hist - 1], 0.0, atol=1e-12)

    def test_rigid_motion_invariance(self):
        rng = RngStream(5)
        for trial in range(20):
            scene = straight_scene(n_agents=3, angle=float(rng.uniform(-3, 3)))
            g0 = build_scene_graph(scene)
            phi = float(rng.uniform(-np.pi, np.pi))
            shift = rng.uniform(-10, 10, 2)
            rot = np.array([[math.cos(phi), -math.sin(phi)],
                            [math.sin(phi), math.cos(phi)]])
            moved = dataclasses.replace(
                scene, positions=scene.positions @ rot.T + shift
            )
            g1 = build_scene_graph(moved)
            np.testing.assert_allclose(g1.nodes, g0.nodes, atol=1e-9)
            np.testing.assert_allclose(g1.edges[..., :3], g0.edges[..., :3], atol=1e-9)
            np.testing.assert_allclose(g1.edges[..., 4:], g0.edges[..., 4:], atol=1e-9)
            # theta may wrap only by exact multiples of 2*pi
            dtheta = g1.edges[..., 3] - g0.edges[..., 3]
            np.testing.assert_allclose(
                np.cos(dtheta), np.ones_like(dtheta), atol=1e-9
            )

    def test_normalization_idempotent_single_agent(self):
        scene = straight_scene(n_agents=1, angle=1.1)
        g0 = build_scene_graph(scene)
        renorm = TrajectoryScene(
            positions=g0.nodes.copy(), t_hist=scene.t_hist, t_fut=scene.t_fut,
            obs_mask=scene.obs_mask.copy(),
        )
        g1 = build_scene_graph(renorm)
        np.testing.assert_allclose(g1.nodes, g0.nodes, atol=1e-12)

    def test_edge_antisymmetry(self):
        rng = RngStream(6)
        scene = straight_scene(n_agents=4, angle=0.3)
        jitter = rng.normal(0, 0.5, scene.positions.shape)
        scene = dataclasses.replace(scene, positions=scene.positions + jitter)
        g = build_scene_graph(scene)
        d = g.edges[..., 0]
        theta = g.edges[..., 3]
        np.testing.assert_allclose(d, d.T, atol=1e-12)
        np.testing.assert_allclose(np.sin(theta + theta.T), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.cos(theta + theta.T), 1.0, atol=1e-12)

    def test_coincident_agents_no_nan(self):
        pos = np.zeros((2, 20, 2))
        pos[:, :, 0] = np.arange(20) * 0.4   # both move identically, coincident
        scene = TrajectoryScene(positions=pos, t_hist=8, t_fut=12,
                                obs_mask=np.ones((2, 8), dtype=bool))
        g = build_scene_graph(scene)
        assert np.isfinite(g.edges).all()
        np.testing.assert_allclose(g.edges[0, 1, 1:3], [1.0, 0.0])


class TestPerturbation:
    def test_zero_sigma_unchanged(self):
        scene = straight_scene()
        out = apply_perturbation(scene, Perturbation("gaussian_noise", sigma=0.0, seed=3))
        np.testing.assert_array_equal(out.positions, scene.positions)

    def test_zero_ratio_unchanged(self):
        scene = straight_scene()
        out = apply_perturbation(scene, Perturbation("frame_mask", missing_ratio=0.0, seed=3))
        np.testing.assert_array_equal(out.obs_mask, scene.obs_mask)

    def test_noise_only_touches_history(self):
        scene = straight_scene()
        out = apply_perturbation(scene, Perturbation("gaussian_noise", sigma=0.1, seed=3))
        np.testing.assert_array_equal(out.future, scene.future)
        assert not np.array_equal(out.history, scene.history)
        assert out.noise_sigma == pytest.approx(0.1)

    def test_mask_count_75_percent(self):
        scene = straight_scene(n_agents=4)
        out = apply_perturbation(scene, Perturbation("frame_mask", missing_ratio=0.75, seed=9))
        hidden = (~out.obs_mask).sum(axis=1)
        np.testing.assert_array_equal(hidden, np.full(4, int(0.75 * 7)))
        assert out.obs_mask[:, -1].all()

    def test_mask_never_hits_current_frame(self):
        scene = straight_scene(n_agents=2)
        for seed in range(30):
            out = apply_perturbation(
                scene, Perturbation("frame_mask", missing_ratio=0.85, seed=seed)
            )
            assert out.obs_mask[:, -1].all()

    def test_seed_reproducible(self):
        scene = straight_scene(n_agents=3)
        p = Perturbation("gaussian_noise", sigma=0.2, seed=17)
        a = apply_perturbation(scene, p)
        b = apply_perturbation(scene, p)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_invalid_kind(self):
        with pytest.raises(ValueError, match="kind"):
            Perturbation("salt_pepper")


class TestSplits:
    def test_leave_one_out(self):
        train, holdout = leave_one_out_split("hotel")
        assert holdout == "hotel"
        assert set(train) == set(ETHUCY_SCENES) - {"hotel"}
        assert len(train) == 4

    def test_unknown_scene(self):
        with pytest.raises(ValueError, match="unknown scene"):
            leave_one_out_split("mall")


class TestCsvRoundTrips:
    def test_scene_csv_roundtrip(self, tmp_path):
        scene = straight_scene(n_agents=2, angle=0.4)
        scene = apply_perturbation(scene, Perturbation("frame_mask", missing_ratio=0.5, seed=1))
        path = tmp_path / "scene.csv"
        export_scene_csv(scene, path)
        back = load_scene_csv(path)
        np.testing.assert_array_equal(back.positions, scene.positions)
        np.testing.assert_array_equal(back.obs_mask, scene.obs_mask)
        assert back.t_hist == scene.t_hist and back.t_fut == scene.t_fut

    def test_scene_csv_header_contract(self, tmp_path):
        scene = straight_scene()
        path = tmp_path / "scene.csv"
        export_scene_csv(scene, path)
        assert path.read_text().splitlines()[0] == "agent,frame,x,y,observed"

    def test_ethucy_roundtrip_through_windows(self, tmp_path):
        scenes = [straight_scene(n_agents=2, angle=0.2),
                  straight_scene(n_agents=1, angle=-0.9)]
        path = tmp_path / "synth.txt"
        write_ethucy(scenes, path)
        tracks = load_ethucy(path)
        windows = make_windows(tracks, 8, 12, 1)
        assert len(windows) == len(scenes)
        for orig, back in zip(scenes, windows):
            np.testing.assert_array_equal(back.positions, orig.positions)


class TestSceneValidation:
    def test_mask_must_cover_current(self):
        pos = np.zeros((1, 20, 2))
        mask = np.ones((1, 8), dtype=bool)
        mask[0, -1] = False
        with pytest.raises(ValueError, match="current frame"):
            TrajectoryScene(positions=pos, t_hist=8, t_fut=12, obs_mask=mask)

    def test_nonfinite_positions(self):
        pos = np.zeros((1, 20, 2))
        pos[0, 3, 1] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            TrajectoryScene(positions=pos, t_hist=8, t_fut=12,
                            obs_mask=np.ones((1, 8), dtype=bool))

    def test_shape_checks(self):
        with pytest.raises(ValueError, match="positions"):
            TrajectoryScene(positions=np.zeros((1, 19, 2)), t_hist=8, t_fut=12,
                            obs_mask=np.ones((1, 8), dtype=bool))
