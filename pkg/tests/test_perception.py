"""Observation encoders, irrep embeddings, the demo record stream, and
checkpoint round-trips."""

import json

import numpy as np
import pytest

from sphereflow import autodiff as ad
from sphereflow import checkpoint as ckpt
from sphereflow import perception as pc
from sphereflow.errors import DataFormatError, SignatureMismatchError
from sphereflow.layers import named_parameters
from sphereflow.so3 import (IrrepFeature, Rotation, apply_rotation,
                            random_rotation, wigner_blocks)


def random_cloud(rng, n=24, scale=0.1):
    return pc.PointCloud(points=rng.normal(size=(n, 3)) * scale,
                         colors=rng.uniform(size=(n, 3)))


def rotate_cloud(cloud, rot):
    return pc.PointCloud(points=rot.apply(cloud.points), colors=cloud.colors)


def rotate_proprio(s, rot):
    return pc.ProprioState(position=rot.apply(s.position),
                           rotation6d=rot.apply(s.rotation6d),
                           gripper=s.gripper)


def random_proprio(rng, scale=0.1):
    return pc.ProprioState(position=rng.normal(size=3) * scale,
                           rotation6d=pc.rotation_to_6d(random_rotation(rng)),
                           gripper=float(rng.uniform()))


def random_chunk(rng, horizon=4):
    return pc.ActionChunk(
        positions=rng.normal(size=(horizon, 3)) * 0.1,
        rotation6d=np.stack([pc.rotation_to_6d(random_rotation(rng))
                             for _ in range(horizon)]),
        gripper=rng.uniform(size=horizon))


def feature_close(a, b, tol):
    for ell in a.degrees:
        x, y = a.block(ell), b.block(ell)
        denom = max(np.abs(y).max(), 1e-12)
        assert np.abs(x - y).max() <= tol * denom, (
            f"degree {ell}: {np.abs(x - y).max()} vs tol {tol * denom}")


# -- types and normalization --------------------------------------------------

class TestTypes:
    def test_cloud_rejects_bad_colors(self):
        with pytest.raises(ValueError, match="colors"):
            pc.PointCloud(np.zeros((2, 3)), np.full((2, 3), 1.5))

    def test_cloud_rejects_shape(self):
        with pytest.raises(ValueError):
            pc.PointCloud(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_proprio_gripper_range(self):
        with pytest.raises(ValueError, match="gripper"):
            pc.ProprioState(np.zeros(3), np.eye(3)[:2], 1.5)

    def test_proprio_rotation_accessor(self):
        rng = np.random.default_rng(0)
        rot = random_rotation(rng)
        s = pc.ProprioState.from_rotation(np.zeros(3), rot, 0.5)
        assert np.allclose(s.rotation().matrix, rot.matrix, atol=1e-12)

    def test_degenerate_columns_raise_on_access(self):
        s = pc.ProprioState(np.zeros(3), np.zeros((2, 3)), 0.5)
        with pytest.raises(ValueError):
            s.rotation()

    def test_chunk_horizon_consistency(self):
        with pytest.raises(ValueError):
            pc.ActionChunk(np.zeros((3, 3)), np.zeros((2, 2, 3)), np.zeros(3))

    def test_single_point_normalization(self):
        p = np.array([[0.1, -0.2, 0.3]])
        centered, centroid = pc.normalize_cloud(pc.PointCloud(p, np.zeros((1, 3))))
        assert np.allclose(centered.points, 0.0)
        assert np.allclose(centroid, p[0])

    def test_translation_shifts_centroid_only(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng)
        t = np.array([0.3, -0.1, 0.2])
        shifted = pc.PointCloud(cloud.points + t, cloud.colors)
        c0, cen0 = pc.normalize_cloud(cloud)
        c1, cen1 = pc.normalize_cloud(shifted)
        assert np.allclose(c0.points, c1.points, atol=1e-12)
        assert np.allclose(cen1 - cen0, t, atol=1e-12)

    def test_rotation_commutes_with_centering(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng)
        rot = random_rotation(rng)
        c0, _ = pc.normalize_cloud(cloud)
        c1, _ = pc.normalize_cloud(rotate_cloud(cloud, rot))
        assert np.allclose(c1.points, rot.apply(c0.points), atol=1e-12)


# -- point-cloud encoder -------------------------------------------------------

class TestPointEncoder:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.enc = pc.init_point_encoder(rng, ((0, 6), (1, 3), (2, 2)),
                                         workspace_radius=0.3)

    def test_origin_point_higher_degrees_zero(self):
        cloud = pc.PointCloud(np.zeros((1, 3)), np.ones((1, 3)) * 0.5)
        m = pc.cloud_moments(cloud, self.enc)
        assert np.allclose(m.block(1), 0.0)
        assert np.allclose(m.block(2), 0.0)
        assert np.abs(m.block(0)).max() > 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng)
        perm = rng.permutation(cloud.n_points)
        shuffled = pc.PointCloud(cloud.points[perm], cloud.colors[perm])
        a = pc.encode_point_cloud(cloud, self.enc).numpy()
        b = pc.encode_point_cloud(shuffled, self.enc).numpy()
        feature_close(a, b, 1e-12)

    def test_moment_equivariance(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            cloud = random_cloud(rng)
            rot = random_rotation(rng)
            d = wigner_blocks(rot)
            got = pc.cloud_moments(rotate_cloud(cloud, rot), self.enc)
            want = apply_rotation(pc.cloud_moments(cloud, self.enc), d)
            feature_close(got, want, 1e-10)

    def test_encoder_equivariance(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            cloud = random_cloud(rng)
            rot = random_rotation(rng)
            d = wigner_blocks(rot)
            got = pc.encode_point_cloud(rotate_cloud(cloud, rot), self.enc)
            want = apply_rotation(pc.encode_point_cloud(cloud, self.enc), d)
            feature_close(got.numpy(), want.numpy(), 1e-6)

    def test_moments_signature(self):
        rng = np.random.default_rng(6)
        m = pc.cloud_moments(random_cloud(rng), self.enc)
        assert m.signature == self.enc.moment_signature


# -- image encoder ---------------------------------------------------------------

class TestImageEncoder:
    def setup_method(self):
        self.enc = pc.init_image_encoder(np.random.default_rng(8))

    def test_zero_image_gives_bias(self):
        tokens = pc.encode_image(np.zeros(pc.IMAGE_SHAPE), self.enc)
        want = np.broadcast_to(self.enc.dense_b.data, (4, pc.TOKEN_DIM))
        assert np.allclose(tokens.tokens.data, want, atol=1e-15)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        img = rng.uniform(size=pc.IMAGE_SHAPE)
        a = pc.encode_image(img, self.enc).tokens.data
        b = pc.encode_image(img, self.enc).tokens.data
        assert np.array_equal(a, b)

    def test_patch_locality(self):
        rng = np.random.default_rng(10)
        img = rng.uniform(size=pc.IMAGE_SHAPE)
        other = img.copy()
        other[16:, 16:] = rng.uniform(size=(16, 16, 3))  # patch index 3
        a = pc.encode_image(img, self.enc).tokens.data
        b = pc.encode_image(other, self.enc).tokens.data
        assert np.allclose(a[:3], b[:3], atol=1e-15)
        assert np.abs(a[3] - b[3]).max() > 1e-6

    def test_wrong_resolution(self):
        with pytest.raises(ValueError, match="shape"):
            pc.encode_image(np.zeros((16, 16, 3)), self.enc)

    def test_batched_tokens(self):
        rng = np.random.default_rng(11)
        imgs = rng.uniform(size=(5,) + pc.IMAGE_SHAPE)
        batched = pc.encode_image(imgs, self.enc).tokens.data
        single = pc.encode_image(imgs[2], self.enc).tokens.data
        assert batched.shape == (5, 4, pc.TOKEN_DIM)
        assert np.allclose(batched[2], single, atol=1e-14)


# -- proprio and action embeddings ----------------------------------------------------

class TestEmbeddings:
    def test_zero_state_embeds_to_gripper_only(self):
        s = pc.ProprioState(np.zeros(3), np.zeros((2, 3)), 0.5)
        f = pc.embed_proprio(s, np.zeros(3))
        assert np.allclose(f.block(0), [[0.5]])
        assert np.allclose(f.block(1), 0.0)

    def test_proprio_rotation_equivariance(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            s = random_proprio(rng)
            rot = random_rotation(rng)
            d = wigner_blocks(rot)
            got = pc.embed_proprio(rotate_proprio(s, rot), np.zeros(3))
            want = apply_rotation(pc.embed_proprio(s, np.zeros(3)), d)
            feature_close(got, want, 1e-12)

    def test_translation_cancellation(self):
        rng = np.random.default_rng(13)
        s = random_proprio(rng)
        t = rng.normal(size=3)
        moved = pc.ProprioState(s.position + t, s.rotation6d, s.gripper)
        a = pc.embed_proprio(s, np.zeros(3))
        b = pc.embed_proprio(moved, t)
        feature_close(a, b, 1e-12)

    def test_chunk_round_trip(self):
        rng = np.random.default_rng(14)
        a = random_chunk(rng, horizon=6)
        centroid = rng.normal(size=3) * 0.1
        back = pc.decode_action_chunk(pc.embed_action_chunk(a, centroid),
                                      centroid)
        assert np.abs(back.positions - a.positions).max() < 1e-10
        assert np.abs(back.gripper - a.gripper).max() < 1e-10
        assert np.abs(back.rotation6d - a.rotation6d).max() < 1e-6

    def test_chunk_embedding_equivariance(self):
        rng = np.random.default_rng(15)
        a = random_chunk(rng, horizon=5)
        rot = random_rotation(rng)
        d = wigner_blocks(rot)
        rotated = pc.ActionChunk(
            positions=rot.apply(a.positions),
            rotation6d=rot.apply(a.rotation6d),
            gripper=a.gripper)
        got = pc.embed_action_chunk(rotated, np.zeros(3))
        want = apply_rotation(pc.embed_action_chunk(a, np.zeros(3)), d)
        feature_close(got, want, 1e-8)

    def test_zero_feature_decodes_to_centroid(self):
        centroid = np.array([0.1, 0.2, -0.3])
        f = IrrepFeature({0: np.zeros((4, 1, 1)), 1: np.zeros((4, 3, 3))})
        back = pc.decode_action_chunk(f, centroid)
        assert np.allclose(back.positions, centroid, atol=1e-14)
        # degenerate columns fall back to a deterministic orthonormal pair
        dots = np.einsum("hi,hi->h", back.rotation6d[:, 0],
                         back.rotation6d[:, 1])
        assert np.allclose(dots, 0.0, atol=1e-12)
        assert np.allclose(np.linalg.norm(back.rotation6d, axis=-1), 1.0)

    def test_decode_orthonormalizes_noise(self):
        rng = np.random.default_rng(16)
        f = IrrepFeature({0: rng.normal(size=(3, 1, 1)),
                          1: rng.normal(size=(3, 3, 3))})
        back = pc.decode_action_chunk(f, np.zeros(3))
        assert back.gripper.min() >= 0.0 and back.gripper.max() <= 1.0
        for h in range(3):
            pair = back.rotation6d[h]
            assert np.allclose(pair @ pair.T, np.eye(2), atol=1e-10)

    def test_decode_rejects_wrong_signature(self):
        f = IrrepFeature({0: np.zeros((4, 2, 1)), 1: np.zeros((4, 3, 3))})
        with pytest.raises(SignatureMismatchError):
            pc.decode_action_chunk(f, np.zeros(3))


# -- full observation encoder -----------------------------------------------------------

class TestObservationEncoder:
    def setup_method(self):
        rng = np.random.default_rng(17)
        self.enc = pc.default_observation_encoder(rng, workspace_radius=0.3)

    def random_obs(self, rng, offset=None):
        cloud = random_cloud(rng, n=20)
        if offset is not None:
            cloud = pc.PointCloud(cloud.points + offset, cloud.colors)
        return pc.Observation(cloud=cloud, image=rng.uniform(size=pc.IMAGE_SHAPE),
                              proprio=random_proprio(rng))

    def test_equivariance_many_scenes(self):
        rng = np.random.default_rng(18)
        worst = 0.0
        for _ in range(50):
            obs = self.random_obs(rng)
            base = pc.encode_observation(obs, self.enc)[0].numpy()
            for _ in range(20):
                rot = random_rotation(rng)
                d = wigner_blocks(rot)
                rotated = pc.Observation(
                    cloud=rotate_cloud(obs.cloud, rot), image=obs.image,
                    proprio=rotate_proprio(obs.proprio, rot))
                got = pc.encode_observation(rotated, self.enc)[0].numpy()
                want = apply_rotation(base, d)
                for ell in got.degrees:
                    num = np.abs(got.block(ell) - want.block(ell)).max()
                    den = max(np.abs(want.block(ell)).max(), 1e-12)
                    worst = max(worst, num / den)
        assert worst < 1e-6, f"max relative violation {worst}"

    def test_translation_invariance(self):
        rng = np.random.default_rng(19)
        obs = self.random_obs(rng)
        t = np.array([0.5, -0.2, 0.1])
        moved = pc.Observation(
            cloud=pc.PointCloud(obs.cloud.points + t, obs.cloud.colors),
            image=obs.image,
            proprio=pc.ProprioState(obs.proprio.position + t,
                                    obs.proprio.rotation6d,
                                    obs.proprio.gripper))
        f0, c0 = pc.encode_observation(obs, self.enc)
        f1, c1 = pc.encode_observation(moved, self.enc)
        feature_close(f0.numpy(), f1.numpy(), 1e-9)
        assert np.allclose(c1 - c0, t, atol=1e-12)

    def test_fusion_toggle_changes_only_degree_zero(self):
        rng = np.random.default_rng(20)
        obs = self.random_obs(rng)
        fused, _ = pc.encode_observation(obs, self.enc)
        plain_enc = pc.ObservationEncoderParams(
            point=self.enc.point, image=self.enc.image, fem=self.enc.fem,
            use_fusion=False)
        plain, _ = pc.encode_observation(obs, plain_enc)
        assert fused.signature == plain.signature
        for ell in fused.degrees:
            if ell > 0:
                assert np.allclose(fused.numpy().block(ell),
                                   plain.numpy().block(ell), atol=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(21)
        observations = [self.random_obs(rng) for _ in range(4)]
        raws = [pc.precompute_obs(o, self.enc) for o in observations]
        batch = pc.cond_from_raw(pc.stack_raw(raws), self.enc).numpy()
        for i, obs in enumerate(observations):
            single = pc.encode_observation(obs, self.enc)[0].numpy()
            for ell in single.degrees:
                assert np.allclose(batch.block(ell)[i], single.block(ell),
                                   atol=1e-12)


# -- record stream ------------------------------------------------------------------------

def make_demo(rng, n_steps=3, horizon=4, n_points=12):
    steps = []
    for _ in range(n_steps):
        cloud = random_cloud(rng, n=n_points)
        image = rng.uniform(size=pc.IMAGE_SHAPE).astype("<f4").astype(np.float64)
        steps.append(pc.DemoStep(
            obs=pc.Observation(cloud=cloud, image=image,
                               proprio=random_proprio(rng)),
            action=random_chunk(rng, horizon=horizon)))
    return pc.Demo(steps=steps, success=True)


class TestRecordStream:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(22)
        demos = [make_demo(rng) for _ in range(3)]
        path = tmp_path / "demos.sfds"
        pc.write_demos(path, demos)
        loaded = pc.read_demos(path)
        assert len(loaded) == 3
        for orig, back in zip(demos, loaded):
            assert back.success == orig.success
            for s0, s1 in zip(orig.steps, back.steps):
                assert np.array_equal(s0.obs.cloud.points, s1.obs.cloud.points)
                assert np.array_equal(s0.obs.image, s1.obs.image)
                assert np.array_equal(s0.action.rotation6d,
                                      s1.action.rotation6d)
                assert s0.obs.proprio.gripper == s1.obs.proprio.gripper
        # a second write of the loaded demos is byte-identical
        path2 = tmp_path / "again.sfds"
        pc.write_demos(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.sfds"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="magic"):
            pc.read_demos(path)

    def test_version_check(self, tmp_path):
        rng = np.random.default_rng(23)
        path = tmp_path / "demos.sfds"
        pc.write_demos(path, [make_demo(rng)])
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="version"):
            pc.read_demos(path)

    def test_trailing_bytes(self, tmp_path):
        rng = np.random.default_rng(24)
        path = tmp_path / "demos.sfds"
        pc.write_demos(path, [make_demo(rng)])
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataFormatError, match="trailing"):
            pc.read_demos(path)

    def test_mixed_horizons_rejected(self, tmp_path):
        rng = np.random.default_rng(25)
        demos = [make_demo(rng, horizon=4), make_demo(rng, horizon=5)]
        with pytest.raises(ValueError, match="horizon"):
            pc.write_demos(tmp_path / "demos.sfds", demos)

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            pc.write_demos(tmp_path / "demos.sfds", [])


# -- checkpoints -------------------------------------------------------------------------------

class TestCheckpoint:
    def params(self):
        rng = np.random.default_rng(26)
        enc = pc.default_observation_encoder(rng, workspace_radius=0.3)
        return named_parameters(enc)

    def test_round_trip_bit_exact(self, tmp_path):
        named = self.params()
        path = tmp_path / "model.npz"
        ckpt.save_checkpoint(path, named, meta={"task": "reach"})
        loaded, meta = ckpt.load_checkpoint(path)
        assert meta["task"] == "reach"
        assert meta["format_version"] == ckpt.FORMAT_VERSION
        assert set(loaded) == set(named)
        for name, tensor in named.items():
            assert np.array_equal(loaded[name], tensor.data), name

    def test_assign_in_place(self, tmp_path):
        named = self.params()
        path = tmp_path / "model.npz"
        ckpt.save_checkpoint(path, named)
        originals = {k: v.data.copy() for k, v in named.items()}
        for tensor in named.values():
            tensor.data[...] = 0.0
        loaded, _ = ckpt.load_checkpoint(path)
        before_ids = {k: id(v.data) for k, v in named.items()}
        ckpt.assign_parameters(named, loaded)
        for name, tensor in named.items():
            assert id(tensor.data) == before_ids[name]
            assert np.array_equal(tensor.data, originals[name])

    def test_key_mismatch(self, tmp_path):
        named = self.params()
        path = tmp_path / "model.npz"
        ckpt.save_checkpoint(path, named)
        loaded, _ = ckpt.load_checkpoint(path)
        loaded.pop(sorted(loaded)[0])
        with pytest.raises(DataFormatError, match="keys"):
            ckpt.assign_parameters(named, loaded)

    def test_shape_mismatch(self, tmp_path):
        named = self.params()
        path = tmp_path / "model.npz"
        ckpt.save_checkpoint(path, named)
        loaded, _ = ckpt.load_checkpoint(path)
        first = sorted(loaded)[0]
        loaded[first] = np.zeros(loaded[first].shape + (2,))
        with pytest.raises(DataFormatError, match="shape"):
            ckpt.assign_parameters(named, loaded)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"garbage")
        with pytest.raises(DataFormatError):
            ckpt.load_checkpoint(path)

    def test_missing_meta(self, tmp_path):
        path = tmp_path / "plain.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(DataFormatError, match="metadata"):
            ckpt.load_checkpoint(path)

    def test_reserved_name(self, tmp_path):
        with pytest.raises(ValueError, match="reserved"):
            ckpt.save_checkpoint(tmp_path / "x.npz",
                                 {"__meta__": ad.Tensor(np.zeros(2))})

    def test_named_parameter_keys_spell_degrees(self):
        keys = sorted(self.params())
        assert any(".deg0" in k for k in keys)
        assert any(".deg1" in k for k in keys)
