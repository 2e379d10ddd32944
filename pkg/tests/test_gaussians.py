"""Decode invariants, pruning policies, and splat-file round trips."""

import numpy as np
import pytest

from ffsplat import backbone as bb
from ffsplat import gaussians as ga
from ffsplat.geometry import CameraPose, PinholeIntrinsics, plucker_rays
from ffsplat.numerics import Tape, Tensor, backward, ops
from ffsplat.numerics.check import max_rel_err


def _raymaps(n=2, h=4, w=5, seed=0):
    rng = np.random.default_rng(seed)
    maps = []
    for i in range(n):
        ang = 0.3 * i
        rot = np.array([[np.cos(ang), 0, np.sin(ang)],
                        [0, 1, 0],
                        [-np.sin(ang), 0, np.cos(ang)]])
        pose = CameraPose(rotation=rot, position=rng.normal(size=3) * 0.2)
        intr = PinholeIntrinsics(fx=6.0, fy=6.0, cx=w / 2, cy=h / 2, width=w, height=h)
        maps.append(plucker_rays(pose, intr))
    return maps


def _decode(seed=0, n=2, h=4, w=5, dtype=np.float32):
    rng = np.random.default_rng(seed)
    raw = Tensor(rng.normal(size=(n, h, w, bb.RAW_CHANNELS)).astype(dtype))
    maps = _raymaps(n, h, w, seed)
    g, t = ga.decode_gaussians(raw, maps)
    return raw, maps, g, t


class TestDecode:
    def test_shapes(self):
        _, _, g, t = _decode()
        k = 2 * 4 * 5
        assert g.position.shape == (k, 3)
        assert g.sh.shape == (k, 48)
        assert g.scale.shape == (k, 3)
        assert g.rotation.shape == (k, 4)
        assert g.opacity.shape == (k,)
        assert t.shape == (2, 4, 5)
        assert len(g) == k

    def test_ranges(self):
        _, _, g, t = _decode(seed=3)
        assert np.all(g.scale.data > 0)
        assert np.all(g.scale.data <= np.exp(-1.2) + 1e-6)
        assert np.all((g.opacity.data > 0) & (g.opacity.data < 1))
        assert np.allclose(np.linalg.norm(g.rotation.data, axis=1), 1, atol=1e-6)
        assert np.all((t.data > 0.01) & (t.data < 4.0))

    def test_zero_raw_defaults(self):
        n, h, w = 1, 2, 3
        raw = Tensor(np.zeros((n, h, w, bb.RAW_CHANNELS), np.float32))
        g, t = ga.decode_gaussians(raw, _raymaps(n, h, w))
        assert np.allclose(t.data, 0.01 + (4.0 - 0.01) * 0.5)
        assert np.allclose(g.scale.data, np.exp(-6.9), rtol=1e-6)
        sig = 1 / (1 + np.exp(2.0))
        assert np.allclose(g.opacity.data, sig, rtol=1e-6)
        # all-zero quaternion decodes to the identity rotation
        assert np.allclose(g.rotation.data, [[1, 0, 0, 0]] * (h * w * n))

    def test_positions_on_rays(self):
        _, maps, g, t = _decode(seed=5)
        dirs = np.concatenate([m.directions.reshape(-1, 3) for m in maps])
        origins = np.concatenate([np.broadcast_to(m.origin, (20, 3)) for m in maps])
        rel = g.position.data - origins
        cross = np.cross(rel, dirs)
        assert np.max(np.linalg.norm(cross, axis=1)) < 1e-5
        assert np.allclose(np.linalg.norm(rel, axis=1), t.data.reshape(-1), atol=1e-5)

    def test_gradients(self):
        rng = np.random.default_rng(11)
        raw = Tensor(rng.normal(size=(1, 2, 2, bb.RAW_CHANNELS)))
        maps = _raymaps(1, 2, 2)
        wpos = Tensor(rng.normal(size=(4, 3)))
        wop = Tensor(rng.normal(size=(4,)))

        def run():
            g, t = ga.decode_gaussians(raw, maps)
            s = ops.tsum(ops.mul(g.position, wpos))
            s = ops.add(s, ops.tsum(ops.mul(g.opacity, wop)))
            s = ops.add(s, ops.tsum(g.scale))
            s = ops.add(s, ops.tsum(ops.mul(g.rotation, 0.3)))
            return ops.add(s, ops.tsum(t))

        assert max_rel_err(run, [raw]) < 1e-6

    def test_channel_count_checked(self):
        raw = Tensor(np.zeros((1, 2, 2, 10), np.float32))
        with pytest.raises(ValueError):
            ga.decode_gaussians(raw, _raymaps(1, 2, 2))


def _random_set(k=1000, seed=0):
    rng = np.random.default_rng(seed)
    quat = rng.normal(size=(k, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return ga.GaussianSet(
        position=Tensor(rng.normal(size=(k, 3)).astype(np.float32)),
        sh=Tensor(rng.normal(size=(k, 48)).astype(np.float32)),
        scale=Tensor(np.exp(rng.uniform(-6, -1.3, size=(k, 3))).astype(np.float32)),
        rotation=Tensor(quat.astype(np.float32)),
        opacity=Tensor(rng.uniform(1e-4, 1 - 1e-4, size=k).astype(np.float32)),
    )


class TestPruning:
    def test_train_counts(self):
        g = _random_set(1000)
        kept, idx = ga.prune_train(g, np.random.default_rng(0))
        assert len(kept) == 460 and idx.shape == (460,)
        assert np.all(np.diff(idx) > 0)  # stable original order, no duplicates

    def test_train_keeps_top(self):
        g = _random_set(1000, seed=2)
        _, idx = ga.prune_train(g, np.random.default_rng(0))
        top400 = set(np.argsort(-g.opacity.data, kind="stable")[:400].tolist())
        assert top400.issubset(set(idx.tolist()))

    def test_train_tie_break_by_index(self):
        g = _random_set(10)
        g.opacity.data[:] = 0.5
        _, idx = ga.prune_train(g, np.random.default_rng(0), top_frac=0.40, rand_frac=0.0)
        assert idx.tolist() == [0, 1, 2, 3]

    def test_train_random_component_uses_rng(self):
        g = _random_set(1000, seed=3)
        _, a = ga.prune_train(g, np.random.default_rng(1))
        _, b = ga.prune_train(g, np.random.default_rng(2))
        _, a2 = ga.prune_train(g, np.random.default_rng(1))
        assert np.array_equal(a, a2)
        assert not np.array_equal(a, b)

    def test_eval_counts(self):
        g = _random_set(1000, seed=4)
        kept, idx = ga.prune_eval(g)
        assert len(kept) == 500
        thresh = np.sort(g.opacity.data)[::-1][499]
        assert np.all(kept.opacity.data >= thresh)

    def test_threshold(self):
        g = _random_set(500, seed=5)
        g.opacity.data[:100] = 1e-4
        kept, idx = ga.prune_threshold(g)
        assert len(kept) == int(np.sum(g.opacity.data > 1e-3))
        assert np.all(kept.opacity.data > 1e-3)

    def test_usage(self):
        g = _random_set(200, seed=6)
        g.opacity.data[:50] = 1e-5
        g.opacity.data[50:] = 0.5
        assert ga.gaussian_usage(g) == pytest.approx(0.75)

    def test_select_gradient_only_kept_rows(self):
        g = _random_set(8, seed=7)
        g.position.requires_grad_(True)
        idx = np.array([1, 5])
        with Tape() as tape:
            kept = ga.select(g, idx)
            loss = ops.tsum(kept.position)
        backward(tape, loss)
        expect = np.zeros((8, 3), np.float32)
        expect[[1, 5]] = 1
        assert np.array_equal(g.position.grad, expect)


class TestSplatIO:
    def test_roundtrip(self, tmp_path):
        g = _random_set(64, seed=8)
        path = tmp_path / "scene.ply"
        ga.export_splat(path, g)
        g2 = ga.import_splat(path)
        assert np.array_equal(g2.position.data, g.position.data)
        assert np.array_equal(g2.sh.data, g.sh.data)
        assert np.array_equal(g2.rotation.data, g.rotation.data)
        assert np.allclose(g2.opacity.data, g.opacity.data, rtol=1e-6, atol=1e-7)
        assert np.allclose(g2.scale.data, g.scale.data, rtol=1e-6)

    def test_reexport_bit_identical(self, tmp_path):
        g = _random_set(64, seed=9)
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        ga.export_splat(p1, g)
        ga.export_splat(p2, ga.import_splat(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"not a ply at all")
        with pytest.raises(ValueError):
            ga.import_splat(path)

    def test_rejects_truncated(self, tmp_path):
        g = _random_set(16, seed=10)
        path = tmp_path / "t.ply"
        ga.export_splat(path, g)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            ga.import_splat(path)

    def test_rejects_bad_opacity(self, tmp_path):
        g = _random_set(4, seed=11)
        g.opacity.data[0] = 1.0
        with pytest.raises(ValueError):
            ga.export_splat(tmp_path / "x.ply", g)
