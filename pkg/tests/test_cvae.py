"""CVAE behavior: architecture audit, path independence of the two encoder
channels, loss composition, finite-difference loss gradients, training
determinism and stopping, feature extraction, checkpoint round trips."""

import numpy as np
import pytest

from salvox import autodiff as ad
from salvox import cvae as cv
from salvox import data as sd
from util import rel_err

TINY = dict(
    input_side=8,
    latent_dim=2,
    conv_filters=(2, 3),
    fc_hidden=4,
    deconv_filters=(2, 2, 1),
    seed=0,
)


def tiny_config(**over):
    merged = {**TINY, **over}
    return cv.CvaeConfig(**merged)


def unit_volume(side, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, (side, side, side)).astype(np.float32)


def tiny_dataset(n_pos, n_ctl, side, seed):
    subjects = []
    for i in range(n_pos + n_ctl):
        label = sd.POSITIVE if i < n_pos else sd.CONTROL
        subjects.append(
            sd.Subject(
                id=f"s{i:02d}",
                volume=sd.Volume(side=side, voxels=unit_volume(side, 1000 + seed * 100 + i)),
                label=label,
            )
        )
    return sd.LabeledDataset(subjects)


class TestConfig:
    def test_flatten_sizes(self):
        assert cv.CvaeConfig(input_side=64).flatten_size == 524288
        assert cv.CvaeConfig(input_side=32).flatten_size == 65536
        assert cv.CvaeConfig(input_side=16).flatten_size == 8192
        # encoder flatten equals decoder flatten for the default filter counts
        for side in (16, 32, 64):
            cfg = cv.CvaeConfig(input_side=side)
            assert cfg.encoder_flat == cfg.flatten_size == 2 * side**3

    def test_validation(self):
        with pytest.raises(ValueError):
            cv.CvaeConfig(input_side=20)
        with pytest.raises(ValueError):
            cv.CvaeConfig(latent_dim=0)
        with pytest.raises(ValueError):
            cv.CvaeConfig(batch_size=0)

    def test_shape_audit_default(self):
        audit = cv.layer_shape_audit(cv.CvaeConfig())
        assert audit["encoder"] == [
            (1, 64, 64, 64),
            (64, 32, 32, 32),
            (128, 16, 16, 16),
            (128,),
            (16, 16),
        ]
        assert audit["decoder"] == [
            (32,),
            (128,),
            (524288,),
            (1024, 8, 8, 8),
            (32, 16, 16, 16),
            (16, 32, 32, 32),
            (1, 64, 64, 64),
        ]


class TestEncode:
    def test_deterministic(self):
        params = cv.init_params(tiny_config())
        v = unit_volume(8, 1)
        a = cv.encode(params, cv.SALIENT, v)
        b = cv.encode(params, cv.SALIENT, v)
        assert np.array_equal(a.mu, b.mu)
        assert np.array_equal(a.logvar, b.logvar)

    def test_zero_network_gives_zero_latents(self):
        params = cv.init_params(tiny_config())
        for layer in params.salient_encoder.values():
            layer["w"].data[...] = 0
            layer["b"].data[...] = 0
        dist = cv.encode(params, cv.SALIENT, unit_volume(8, 2))
        assert np.array_equal(dist.mu, np.zeros(2))
        assert np.array_equal(dist.logvar, np.zeros(2))

    def test_mu_and_logvar_heads_differ(self):
        params = cv.init_params(tiny_config(seed=6))
        dist = cv.encode(params, cv.BACKGROUND, unit_volume(8, 3))
        assert not np.allclose(dist.mu, dist.logvar)

    def test_wrong_side_rejected(self):
        params = cv.init_params(tiny_config())
        with pytest.raises(ValueError):
            cv.encode(params, cv.SALIENT, unit_volume(16, 4))

    def test_out_of_range_rejected(self):
        params = cv.init_params(tiny_config())
        bad = unit_volume(8, 5)
        bad[0, 0, 0] = 1.5
        with pytest.raises(ValueError):
            cv.encode(params, cv.SALIENT, bad)

    def test_logvar_clamped(self):
        params = cv.init_params(tiny_config())
        # blow up the logvar head weights; the clamp must hold the output
        params.salient_encoder["logvar"]["w"].data[...] = 1e4
        dist = cv.encode(params, cv.SALIENT, unit_volume(8, 6))
        assert np.abs(dist.logvar).max() <= cv.LOGVAR_LIMIT

    def test_batched_training_path_matches_single(self):
        params = cv.init_params(tiny_config(seed=9))
        vols = np.stack([unit_volume(8, 10 + i) for i in range(3)])
        mu_b, lv_b = cv._encode_graph(params, cv.SALIENT, ad.Tensor(vols[:, None]))
        for i in range(3):
            single = cv.encode(params, cv.SALIENT, vols[i])
            assert np.allclose(mu_b.data[i], single.mu, atol=1e-6)
            assert np.allclose(lv_b.data[i], single.logvar, atol=1e-6)


class TestDecode:
    def test_output_range_and_side(self):
        params = cv.init_params(tiny_config())
        out = cv.decode(params, np.array([0.5, -1.0]), np.array([2.0, 0.1]))
        assert out.side == 8
        assert out.voxels.min() > 0.0 and out.voxels.max() < 1.0

    def test_salient_channel_influences_output(self):
        params = cv.init_params(tiny_config(seed=3))
        z = np.array([0.3, -0.2])
        with_s = cv.decode(params, np.array([1.5, -2.0]), z)
        without = cv.decode(params, np.zeros(2), z)
        assert not np.allclose(with_s.voxels, without.voxels)

    def test_length_mismatch_rejected(self):
        params = cv.init_params(tiny_config())
        with pytest.raises(ValueError):
            cv.decode(params, np.zeros(3), np.zeros(2))


class TestForwardPaths:
    def test_background_only_matches_manual_composition(self):
        params = cv.init_params(tiny_config(seed=11))
        v = unit_volume(8, 20)
        noise = np.random.default_rng(0).standard_normal(2)
        recon, z_dist = cv.forward_background_only(params, v, noise)
        manual_z = z_dist.sample(noise.astype(np.float32))
        manual = cv.decode(params, np.zeros(2, dtype=np.float32), manual_z)
        assert np.array_equal(recon.voxels, manual.voxels)

    def test_background_only_ignores_salient_encoder(self):
        params = cv.init_params(tiny_config(seed=12))
        v = unit_volume(8, 21)
        noise = np.zeros(2)
        before, _ = cv.forward_background_only(params, v, noise)
        for layer in params.salient_encoder.values():
            layer["w"].data[...] += 123.0
        after, _ = cv.forward_background_only(params, v, noise)
        assert np.array_equal(before.voxels, after.voxels)

    def test_both_matches_manual_composition(self):
        params = cv.init_params(tiny_config(seed=13))
        v = unit_volume(8, 22)
        rng = np.random.default_rng(1)
        ns, nz = rng.standard_normal(2), rng.standard_normal(2)
        recon, s_dist, z_dist = cv.forward_both(params, v, ns, nz)
        manual = cv.decode(
            params,
            s_dist.sample(ns.astype(np.float32)),
            z_dist.sample(nz.astype(np.float32)),
        )
        assert np.array_equal(recon.voxels, manual.voxels)

    def test_s_dist_unaffected_by_background_weights(self):
        params = cv.init_params(tiny_config(seed=14))
        v = unit_volume(8, 23)
        _, s_before, _ = cv.forward_both(params, v, np.zeros(2), np.zeros(2))
        for layer in params.background_encoder.values():
            layer["w"].data[...] *= -2.0
        _, s_after, _ = cv.forward_both(params, v, np.zeros(2), np.zeros(2))
        assert np.array_equal(s_before.mu, s_after.mu)
        assert np.array_equal(s_before.logvar, s_after.logvar)


def _toy_loss_setup(kl_weight=1.0, seed=31):
    cfg = tiny_config(kl_weight=kl_weight, batch_size=2, seed=seed)
    params = cv.init_params(cfg)
    pos = [unit_volume(8, 40), unit_volume(8, 41)]
    ctl = [unit_volume(8, 42), unit_volume(8, 43)]
    rng = np.random.default_rng(seed)
    noise = {
        "salient": rng.standard_normal((2, 2)),
        "z_positive": rng.standard_normal((2, 2)),
        "z_control": rng.standard_normal((2, 2)),
    }
    return cfg, params, pos, ctl, noise


class TestBatchLoss:
    def test_loss_nonnegative_and_composition(self):
        for w in (0.0, 1.0, 0.01):
            cfg, params, pos, ctl, noise = _toy_loss_setup(kl_weight=w)
            loss, grads, parts = cv.cvae_batch_loss(params, pos, ctl, noise)
            assert loss >= 0.0
            manual = (
                parts["mse_positive"]
                + parts["mse_control"]
                + w * (parts["kl_positive"] + parts["kl_control"])
            )
            assert abs(loss - manual) < 1e-5
            assert len(grads) == len(params.param_list())
            assert all(g is not None for g in grads)

    def test_kl_weight_zero_reduces_to_mse(self):
        cfg, params, pos, ctl, noise = _toy_loss_setup(kl_weight=0.0)
        loss, _, parts = cv.cvae_batch_loss(params, pos, ctl, noise)
        assert abs(loss - (parts["mse_positive"] + parts["mse_control"])) < 1e-6

    def test_empty_batch_rejected(self):
        cfg, params, pos, ctl, noise = _toy_loss_setup()
        with pytest.raises(ValueError):
            cv.cvae_batch_loss(params, [], ctl, noise)

    def test_gradients_match_finite_differences(self):
        # wide-precision graph: float64 volumes and parameters
        cfg, params, pos, ctl, noise = _toy_loss_setup(kl_weight=0.5)
        jitter = np.random.default_rng(17)
        for p in params.param_list():
            p.data = p.data.astype(np.float64)
            # zero biases leave whole receptive fields sitting exactly on the
            # relu kink; push every parameter off it so central differences
            # see a one-sided slope
            p.data += 0.02 * jitter.standard_normal(p.data.shape)
        pos = [v.astype(np.float64) for v in pos]
        ctl = [v.astype(np.float64) for v in ctl]

        _, grads, _ = cv.cvae_batch_loss(params, pos, ctl, noise)

        rng = np.random.default_rng(99)
        h = 1e-6
        for p, g in zip(params.param_list(), grads):
            flat = p.data.ravel()
            n_probe = min(4, flat.size)
            for idx in rng.choice(flat.size, size=n_probe, replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up, _, _ = cv.cvae_batch_loss(params, pos, ctl, noise)
                flat[idx] = orig - h
                down, _, _ = cv.cvae_batch_loss(params, pos, ctl, noise)
                flat[idx] = orig
                numeric = (up - down) / (2 * h)
                scale = max(abs(numeric), abs(g.ravel()[idx]), 1e-4)
                assert abs(numeric - g.ravel()[idx]) / scale < 1e-3


class TestTrain:
    def test_same_seed_identical_runs(self):
        cfg = tiny_config(batch_size=2, max_iterations=5, recon_stop_threshold=0.0)
        ds = tiny_dataset(3, 3, 8, seed=1)
        params_a, trace_a = cv.train(cfg, ds, rng_seed=5)
        params_b, trace_b = cv.train(cfg, ds, rng_seed=5)
        assert trace_a["loss"] == trace_b["loss"]
        for pa, pb in zip(params_a.param_list(), params_b.param_list()):
            assert np.array_equal(pa.data, pb.data)

    def test_different_rng_seed_changes_trace(self):
        cfg = tiny_config(batch_size=2, max_iterations=5, recon_stop_threshold=0.0)
        ds = tiny_dataset(3, 3, 8, seed=1)
        _, trace_a = cv.train(cfg, ds, rng_seed=5)
        _, trace_b = cv.train(cfg, ds, rng_seed=6)
        assert trace_a["loss"] != trace_b["loss"]

    def test_unconverged_flag(self):
        cfg = tiny_config(batch_size=2, max_iterations=3, recon_stop_threshold=1e-12)
        ds = tiny_dataset(3, 3, 8, seed=2)
        params, trace = cv.train(cfg, ds, rng_seed=0)
        assert params.training_meta["converged"] is False
        assert params.training_meta["iterations"] == 3
        assert len(trace["loss"]) == 3

    def test_stops_at_window_when_threshold_generous(self):
        cfg = tiny_config(batch_size=2, max_iterations=100, recon_stop_threshold=10.0)
        ds = tiny_dataset(3, 3, 8, seed=3)
        params, trace = cv.train(cfg, ds, rng_seed=0)
        assert params.training_meta["converged"] is True
        assert params.training_meta["iterations"] == cv.STOP_WINDOW

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_carries_iteration(self):
        cfg = tiny_config(
            batch_size=2,
            max_iterations=50,
            recon_stop_threshold=0.0,
            adam=ad.AdamHyper(lr=1e12),
        )
        ds = tiny_dataset(3, 3, 8, seed=4)
        with pytest.raises(cv.TrainingDivergenceError) as err:
            cv.train(cfg, ds, rng_seed=0)
        assert err.value.iteration >= 1

    def test_too_few_subjects_rejected(self):
        cfg = tiny_config(batch_size=4)
        ds = tiny_dataset(2, 2, 8, seed=5)
        with pytest.raises(ValueError):
            cv.train(cfg, ds, rng_seed=0)


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config(batch_size=2, max_iterations=5, recon_stop_threshold=0.0)
    ds = tiny_dataset(4, 3, 8, seed=6)
    params, _ = cv.train(cfg, ds, rng_seed=1)
    return params, ds


class TestExtract:

    def test_mean_mode_deterministic(self, trained):
        params, ds = trained
        a = cv.extract_features(params, ds, cv.SALIENT, cv.MEAN)
        b = cv.extract_features(params, ds, cv.SALIENT, cv.MEAN)
        assert np.array_equal(a.values, b.values)
        assert a.values.shape == (7, 2)
        assert a.subject_ids == ds.ids
        assert a.labels == ds.labels
        assert a.source == cv.SALIENT and a.mode == cv.MEAN

    def test_sampled_mode_seed_discipline(self, trained):
        params, ds = trained
        a = cv.extract_features(params, ds, cv.BACKGROUND, cv.SAMPLED, noise_seed=9)
        b = cv.extract_features(params, ds, cv.BACKGROUND, cv.SAMPLED, noise_seed=9)
        c = cv.extract_features(params, ds, cv.BACKGROUND, cv.SAMPLED, noise_seed=10)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_sampled_differs_from_mean(self, trained):
        params, ds = trained
        mean = cv.extract_features(params, ds, cv.SALIENT, cv.MEAN)
        samp = cv.extract_features(params, ds, cv.SALIENT, cv.SAMPLED, noise_seed=1)
        assert not np.array_equal(mean.values, samp.values)

    def test_untrained_params_warn(self):
        params = cv.init_params(tiny_config())
        ds = tiny_dataset(2, 2, 8, seed=7)
        with pytest.warns(UserWarning):
            fm = cv.extract_features(params, ds, cv.SALIENT, cv.MEAN)
        assert fm.warnings


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = tiny_config(batch_size=2, max_iterations=4, recon_stop_threshold=0.0)
        ds = tiny_dataset(3, 3, 8, seed=8)
        params, _ = cv.train(cfg, ds, rng_seed=2)
        path = tmp_path / "model.ckpt"
        cv.save_checkpoint(params, path)
        back = cv.load_checkpoint(path)
        for a, b in zip(params.param_list(), back.param_list()):
            assert np.array_equal(a.data, b.data)
            assert a.data.dtype == b.data.dtype == np.float32
        assert back.training_meta == params.training_meta
        assert back.config == params.config
        # save again: byte-identical files
        cv.save_checkpoint(back, tmp_path / "again.ckpt")
        assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_loaded_params_encode_identically(self, tmp_path):
        params = cv.init_params(tiny_config(seed=15))
        cv.save_checkpoint(params, tmp_path / "m.ckpt")
        back = cv.load_checkpoint(tmp_path / "m.ckpt")
        v = unit_volume(8, 50)
        a = cv.encode(params, cv.SALIENT, v)
        b = cv.encode(back, cv.SALIENT, v)
        assert np.array_equal(a.mu, b.mu)

    def test_corrupt_file_rejected(self, tmp_path):
        params = cv.init_params(tiny_config())
        path = tmp_path / "m.ckpt"
        cv.save_checkpoint(params, path)
        raw = path.read_bytes()
        (tmp_path / "trunc.ckpt").write_bytes(raw[:-16])
        with pytest.raises(ValueError):
            cv.load_checkpoint(tmp_path / "trunc.ckpt")
        (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError):
            cv.load_checkpoint(tmp_path / "bad.ckpt")
