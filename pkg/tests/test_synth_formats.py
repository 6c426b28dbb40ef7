import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emac import checkpoint, density, flow, synth
from emac.density import FormatError


class TestGenerator:
    def test_fixed_count_in_bounds(self):
        cfg = synth.SceneConfig(n_objects=5, n_frames=12, seed=1)
        for f in synth.generate_sequence(cfg):
            assert f.count == 5 and len(f.points) == 5
            assert np.all(f.points >= 0) and np.all(f.points[:, 0] < cfg.w) and np.all(f.points[:, 1] < cfg.h)

    def test_linear_motion(self):
        cfg = synth.SceneConfig(h=64, w=256, n_frames=6, n_objects=3, fixed_velocity=(1.0, 0.0), seed=2)
        frames = synth.generate_sequence(cfg)
        if np.any(frames[0].points[:, 0] > cfg.w - 1 - len(frames)):
            pytest.skip("object starts too close to the wall for an unbounced run")
        for a, b in zip(frames, frames[1:]):
            assert np.array_equal(a.track_ids, b.track_ids)
            assert np.allclose(b.points[:, 0] - a.points[:, 0], 1.0, atol=1e-12)
            assert np.allclose(b.points[:, 1], a.points[:, 1], atol=1e-12)

    def test_gt_flow_at_annotations(self):
        cfg = synth.SceneConfig(n_objects=4, n_frames=10, seed=3)
        frames = synth.generate_sequence(cfg)
        assert frames[0].gt_flow is None and frames[1].gt_flow is not None
        checked = 0
        for prev, cur in zip(frames, frames[1:]):
            for k, (x, y) in enumerate(cur.points):
                others = np.delete(cur.points, k, axis=0)
                if len(others) and np.min(np.hypot(*(others - (x, y)).T)) < 2 * cfg.radius:
                    continue  # supports overlap; nearest-object rule may pick the neighbour
                u, v = cur.gt_flow[int(round(y)), int(round(x))]
                dx, dy = prev.points[k] - cur.points[k]
                assert abs(u - dx) < 0.5 and abs(v - dy) < 0.5
                checked += 1
        assert checked > 0

    def test_image_warp_consistency(self):
        from emac.flow import warp_bilinear

        cfg = synth.SceneConfig(n_objects=3, n_frames=8, texture=0.0, seed=5)
        frames = synth.generate_sequence(cfg)
        ys, xs = np.mgrid[0:cfg.h, 0:cfg.w]
        for prev, cur in zip(frames, frames[1:]):
            d = np.hypot(*(cur.points[:, None] - cur.points[None]).transpose(2, 0, 1))
            np.fill_diagonal(d, np.inf)
            if d.min() < 3 * cfg.radius:
                continue
            warped = warp_bilinear(prev.image, cur.gt_flow).data
            near = np.zeros((cfg.h, cfg.w), bool)
            for x, y in cur.points:
                near |= (xs - x) ** 2 + (ys - y) ** 2 <= (cfg.radius - 1) ** 2
            assert np.max(np.abs(warped - cur.image)[near]) < 0.1

    def test_determinism(self):
        cfg = synth.SceneConfig(seed=11, n_frames=4)
        a, b = synth.generate_sequence(cfg), synth.generate_sequence(cfg)
        assert all(x.image.tobytes() == y.image.tobytes() and np.array_equal(x.points, y.points) for x, y in zip(a, b))

    @pytest.mark.parametrize("kw", [{"n_frames": 1}, {"radius": 32}])
    def test_impossible_config(self, kw):
        with pytest.raises(synth.ConfigError):
            synth.SceneConfig(h=64, w=64, **kw).validate()

    def test_dataset_split_by_sequence(self):
        seqs = synth.generate_dataset(synth.DatasetConfig(scene=synth.SceneConfig(n_frames=3), splits={"train": 2, "test": 1}))
        assert [s.name for s in seqs] == ["train_000", "train_001", "test_000"]


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        cfg = synth.DatasetConfig(scene=synth.SceneConfig(h=32, w=32, n_frames=3, n_objects=(1, 4), radius=4), splits={"train": 1, "val": 1})
        seqs = synth.generate_dataset(cfg)
        synth.write_dataset(tmp_path, seqs, cfg)
        back = synth.read_dataset(tmp_path)
        for s, r in zip(seqs, back):
            assert (s.name, s.split) == (r.name, r.split)
            for a, b in zip(s.frames, r.frames):
                assert a.index == b.index and a.track_ids == b.track_ids
                assert np.array_equal(a.points, b.points)
                assert np.array_equal(a.image, b.image)
                assert np.array_equal(a.gt_flow, b.gt_flow)

    def test_dataset_bytes_deterministic(self, tmp_path):
        cfg = synth.DatasetConfig(scene=synth.SceneConfig(h=16, w=16, n_frames=2, n_objects=2, radius=3), splits={"train": 1})
        for d in ("a", "b"):
            synth.write_dataset(tmp_path / d, synth.generate_dataset(cfg), cfg)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    def test_golden_annotation(self, tmp_path):
        p = tmp_path / "ann.json"
        p.write_text('{"frames": [{"index": 0, "points": [[3.5, 7.25]], "track_ids": [42]}]}')
        (fr,) = synth.parse_annotations(p)
        assert fr["index"] == 0 and fr["track_ids"] == [42]
        assert fr["points"].tolist() == [[3.5, 7.25]]

    def test_malformed_annotation_offset(self, tmp_path):
        p = tmp_path / "ann.json"
        p.write_text('{"frames": [{"index": 0, "points": [[1, 2]], "track_ids": [1]},\n {"index": 1, "points": [[1, 2]], "track_ids": []}]}')
        with pytest.raises(FormatError) as exc:
            synth.parse_annotations(p)
        assert exc.value.offset == p.read_bytes().index(b'"index": 1')
        assert "ann.json" in str(exc.value)

    def test_bad_json_offset(self, tmp_path):
        p = tmp_path / "ann.json"
        p.write_text('{"frames": [}')
        with pytest.raises(FormatError) as exc:
            synth.parse_annotations(p)
        assert exc.value.offset == 12


class TestPgm:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
    def test_round_trip(self, tmp_path_factory, img):
        p = tmp_path_factory.mktemp("pgm") / "f.pgm"
        synth.write_pgm(p, img)
        assert np.array_equal(synth.read_pgm(p, as_float=False), img)

    def test_float_quantised_exact(self, tmp_path, rng):
        img = np.round(rng.random((5, 7)) * 255) / 255
        synth.write_pgm(tmp_path / "f.pgm", img)
        assert np.array_equal(synth.read_pgm(tmp_path / "f.pgm"), img)

    def test_comment_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        assert synth.read_pgm(p, as_float=False).tolist() == [[0, 255]]

    @pytest.mark.parametrize("raw", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"])
    def test_malformed(self, tmp_path, raw):
        p = tmp_path / "bad.pgm"
        p.write_bytes(raw)
        with pytest.raises(FormatError):
            synth.read_pgm(p)


class TestFlo:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8), st.just(2)), elements=st.floats(-1e3, 1e3, width=32)))
    def test_round_trip(self, tmp_path_factory, f):
        p = tmp_path_factory.mktemp("flo") / "f.flo"
        flow.write_flo(p, f)
        assert flow.read_flo(p).tobytes() == f.tobytes()

    def test_layout(self, tmp_path):
        f = np.zeros((2, 3, 2), np.float32)
        f[1, 2] = (5, -6)
        flow.write_flo(tmp_path / "f.flo", f)
        raw = (tmp_path / "f.flo").read_bytes()
        assert np.frombuffer(raw[:4], "<f4")[0] == 202021.25
        assert np.frombuffer(raw[4:12], "<i4").tolist() == [3, 2]
        assert np.frombuffer(raw[12:], "<f4")[-2:].tolist() == [5, -6]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.flo").write_bytes(b"\x00" * 20)
        with pytest.raises(FormatError):
            flow.read_flo(tmp_path / "f.flo")


class TestDmap:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(-1e4, 1e4, width=32)))
    def test_round_trip(self, tmp_path_factory, d):
        p = tmp_path_factory.mktemp("dmap") / "d.dmap"
        density.write_dmap(p, d)
        assert density.read_dmap(p).tobytes() == d.tobytes()

    def test_truncated(self, tmp_path):
        density.write_dmap(tmp_path / "d.dmap", np.ones((3, 3), np.float32))
        raw = (tmp_path / "d.dmap").read_bytes()
        (tmp_path / "d.dmap").write_bytes(raw[:-2])
        with pytest.raises(FormatError):
            density.read_dmap(tmp_path / "d.dmap")


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"a.weight": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(5).astype(np.float32)}
        checkpoint.save_checkpoint(tmp_path / "m.ckpt", params, {"note": "x", "n": 3})
        back, hyper = checkpoint.load_checkpoint(tmp_path / "m.ckpt")
        assert list(back) == list(params) and hyper == {"note": "x", "n": 3}
        assert all(back[k].tobytes() == params[k].tobytes() for k in params)

    def test_header_layout(self, tmp_path):
        checkpoint.save_checkpoint(tmp_path / "m.ckpt", {"w": np.zeros(2)}, {})
        raw = (tmp_path / "m.ckpt").read_bytes()
        hlen = int(np.frombuffer(raw[8:12], "<u4")[0])
        assert raw[:4] == b"EMAC" and np.frombuffer(raw[4:8], "<u4")[0] == 1
        assert json.loads(raw[12:12 + hlen])["params"] == [{"name": "w", "shape": [2]}]
        assert len(raw) == 12 + hlen + 8

    def test_trailing_bytes(self, tmp_path):
        checkpoint.save_checkpoint(tmp_path / "m.ckpt", {"w": np.zeros(2)}, {})
        with open(tmp_path / "m.ckpt", "ab") as fh:
            fh.write(b"xx")
        with pytest.raises(FormatError):
            checkpoint.load_checkpoint(tmp_path / "m.ckpt")

    def test_assign_names_offender(self):
        from emac.autodiff import Tensor

        live = {"enc.w": Tensor(np.zeros((2, 2))), "head.b": Tensor(np.zeros(3))}
        with pytest.raises(checkpoint.CheckpointError, match="head.b"):
            checkpoint.assign(live, {"enc.w": np.zeros((2, 2)), "head.b": np.zeros(4)})
        with pytest.raises(checkpoint.CheckpointError, match="head.b"):
            checkpoint.assign(live, {"enc.w": np.zeros((2, 2))})
