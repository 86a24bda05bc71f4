from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccgan_vc.conversion import ConversionRequest, convert_f0, convert_file, convert_utterance
from ccgan_vc.corpus import N_MCC, UNVOICED_LOG_F0, FeatureBundle, SpeakerStats, write_features
from ccgan_vc.fixtures import micro_configs, speaker_utterance, speaker_waveform, synthetic_corpus
from ccgan_vc.model import GeneratorConfig, init_params
from ccgan_vc.training import Checkpoint, TrainConfig, new_train_state, save_checkpoint
from ccgan_vc.vocoder import ToyBackend, read_wav, write_wav


def stats(mu, sigma):
    return SpeakerStats(mu, sigma, np.zeros(N_MCC), np.ones(N_MCC))


@pytest.fixture(scope="module")
def checkpoint():
    reg, _, st_ = synthetic_corpus(n_speakers=3, n_utts=3, n_frames=160)
    g, d = micro_configs(3, base_channels=4)
    state = new_train_state(g, d, TrainConfig(seed=0))
    return Checkpoint(g, d, TrainConfig(seed=0), state, reg, st_)


# -- F0 -----------------------------------------------------------------


def test_f0_examples():
    s = stats(5.0, 0.2)
    x = np.array([4.8, UNVOICED_LOG_F0, 5.3])
    np.testing.assert_array_equal(convert_f0(x, s, s), x)
    assert convert_f0(np.array([5.0]), stats(5.0, 0.2), stats(5.5, 0.1))[0] == 5.5
    unv = np.full(7, UNVOICED_LOG_F0)
    np.testing.assert_array_equal(convert_f0(unv, stats(5.0, 0.2), stats(4.0, 0.3)), unv)


def test_f0_needs_positive_sigma():
    with pytest.raises(ValueError):
        convert_f0(np.array([5.0]), stats(5.0, 0.0), stats(5.0, 0.1))


@given(st.integers(0, 10_000), st.floats(3.0, 7.0), st.floats(0.01, 1.0))
def test_f0_stat_matching(seed, mu_t, sigma_t):
    r = np.random.default_rng(seed)
    f0 = r.normal(5.0, 0.25, 200)
    f0[r.random(200) < 0.3] = UNVOICED_LOG_F0
    voiced = f0 != UNVOICED_LOG_F0
    src = stats(float(f0[voiced].mean()), float(f0[voiced].std()))
    out = convert_f0(f0, src, stats(mu_t, sigma_t))
    assert np.array_equal(out == UNVOICED_LOG_F0, ~voiced)
    assert abs(out[voiced].mean() - mu_t) < 1e-9
    assert abs(out[voiced].std() - sigma_t) < 1e-9


# -- utterances ---------------------------------------------------------


def test_convert_utterance_contract(checkpoint):
    b = speaker_utterance(0, 5, n_frames=130)
    b = replace(b, ap=np.random.default_rng(0).random((130, 3)))
    seen = []
    handle = checkpoint.generator.register_forward_pre_hook(lambda m, args: seen.append(args[0].clone()))
    try:
        out = convert_utterance(checkpoint, b, "S0", "S2")
    finally:
        handle.remove()
    assert seen[0].shape == (1, 36, 132)
    x = seen[0][0].numpy()
    np.testing.assert_array_equal(x[:, 130], x[:, 129])
    np.testing.assert_array_equal(x[:, 131], x[:, 129])
    assert out.n_frames == 130 and out.mcc.shape == (130, 36)
    assert out.ap.tobytes() == b.ap.tobytes()
    assert (out.frame_period_ms, out.sample_rate_hz) == (b.frame_period_ms, b.sample_rate_hz)
    assert np.array_equal(out.voiced, b.voiced)
    np.testing.assert_array_equal(
        out.log_f0, convert_f0(b.log_f0, checkpoint.stats[0], checkpoint.stats[2])
    )


def test_convert_utterance_no_padding_needed(checkpoint):
    b = speaker_utterance(1, 0, n_frames=128)
    out = convert_utterance(checkpoint, b, "S1", "S0")
    assert out.n_frames == 128 and np.all(np.isfinite(out.mcc))


def test_convert_utterance_denormalizes_with_target(checkpoint):
    b = speaker_utterance(1, 0, n_frames=64)
    out = convert_utterance(checkpoint, b, "S1", "S2")
    # fresh generator output is near zero, so the result sits near the target mean
    t = checkpoint.stats[2]
    z = (out.mcc - t.mcc_mean) / t.mcc_std
    assert np.abs(z).mean() < np.abs((out.mcc - checkpoint.stats[1].mcc_mean) / checkpoint.stats[1].mcc_std).mean()


def test_convert_utterance_errors(checkpoint):
    b = speaker_utterance(0, 0, n_frames=32)
    with pytest.raises(KeyError, match="S0, S1, S2"):
        convert_utterance(checkpoint, b, "S0", "nobody")
    g = GeneratorConfig(3, in_dims=20, base_channels=4)
    bad = replace(checkpoint, state=replace(checkpoint.state, gen=init_params(g, np.random.default_rng(0))))
    with pytest.raises(ValueError, match="dimension mismatch"):
        convert_utterance(bad, b, "S0", "S1")


def test_single_frame_input(checkpoint):
    b = FeatureBundle(np.zeros((1, N_MCC)), np.array([5.0]), np.zeros((1, 1)))
    assert convert_utterance(checkpoint, b, "S0", "S1").n_frames == 1


# -- files --------------------------------------------------------------


def test_convert_file_wav(checkpoint, tmp_path):
    ck = tmp_path / "m.ccck"
    save_checkpoint(checkpoint, ck)
    src = tmp_path / "in.wav"
    write_wav(src, speaker_waveform(0, 1, seconds=0.6))
    req = ConversionRequest(ck, "S0", "S1", src, tmp_path / "out.wav", tmp_path / "out.ccvc")
    convert_file(req, ToyBackend())
    a, b = read_wav(src), read_wav(tmp_path / "out.wav")
    assert b.sample_rate_hz == 22050
    assert abs(a.duration_s - b.duration_s) < 0.005
    assert (tmp_path / "out.ccvc").exists()

    first = (tmp_path / "out.wav").read_bytes()
    convert_file(req, ToyBackend())
    assert (tmp_path / "out.wav").read_bytes() == first


def test_convert_file_features_input(checkpoint, tmp_path):
    feat = tmp_path / "in.ccvc"
    write_features(feat, speaker_utterance(2, 0, n_frames=90))
    req = ConversionRequest(checkpoint, "S2", "S2", feat, tmp_path / "o.wav")
    assert req.is_identity
    convert_file(req)
    assert abs(read_wav(tmp_path / "o.wav").duration_s - 90 * 0.005) <= 0.005


def test_convert_file_unknown_label(checkpoint, tmp_path):
    req = ConversionRequest(checkpoint, "S0", "X9", tmp_path / "missing.wav", tmp_path / "o.wav")
    with pytest.raises(KeyError, match="known speakers: S0, S1, S2"):
        convert_file(req)
    assert not (tmp_path / "o.wav").exists()
