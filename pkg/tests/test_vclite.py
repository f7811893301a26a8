import numpy as np
import pytest

from faps_lab.encoder import EncoderConfig, EncoderParams
from faps_lab.sequence import FeatureSequence
from faps_lab.synth import CorpusConfig, CorpusModel
from faps_lab.training import TrainConfig, train
from faps_lab.vclite import (DecoderConfig, ProbeConfig, ValidationError, convert, decode, dominant_source,
                             fit_probe, probe_unseen_speakers, reconstruction_loss, swap_test, train_decoder,
                             train_probe)

CORPUS = dict(groups=24, base_speakers=3, lws_count=2, feature_dim=4, content_dim=3, speaker_dim=2,
              phoneme_count=8, noise_std=0.05, speaker_scale=1.0)
ENC = EncoderConfig(input_dim=4, model_dim=8, block_count=1)
DEC = DecoderConfig(feature_dim=4, speaker_dim=2, hidden_dim=16, steps=300, batch_frames=128,
                    learning_rate=3e-3, log_interval=50)


@pytest.fixture(scope="module")
def groups():
    m = CorpusModel.from_config(CorpusConfig(**CORPUS))
    return [m.group(i) for i in range(CORPUS["groups"])]


@pytest.fixture(scope="module")
def encoder(groups):
    p, _ = train(groups[:16], ENC, TrainConfig(step_count=150, batch_size=4, crop_frames=8,
                                                learning_rate=3e-3))
    return p


@pytest.fixture(scope="module")
def decoder(groups, encoder):
    return train_decoder(groups[:16], encoder, DEC)


def test_zero_steps_is_init(groups, encoder):
    from dataclasses import replace
    dec, hist = train_decoder(groups, encoder, replace(DEC, steps=0))
    assert hist == []
    assert not np.any(dec["out.w"].value)


def test_decoder_learns(decoder):
    _, hist = decoder
    assert hist[-1][1] < hist[0][1]


def test_encoder_frozen(groups, encoder):
    before = {k: v.value.tobytes() for k, v in encoder.tensors.items()}
    train_decoder(groups[:4], encoder, DecoderConfig(**{**DEC.to_dict(), "steps": 20}))
    assert before == {k: v.value.tobytes() for k, v in encoder.tensors.items()}


def test_convert_shape_and_determinism(groups, encoder, decoder):
    dec, _ = decoder
    src = groups[20].members[0]
    a = convert(dec, encoder, src.features, groups[20].members[1].speaker)
    b = convert(dec, encoder, src.features, groups[20].members[1].speaker)
    assert a.shape == src.features.shape
    assert a.values.tobytes() == b.values.tobytes()


def test_self_conversion_under_ceiling(groups, encoder, decoder):
    dec, _ = decoder
    held = groups[16:]
    ceiling = np.mean(np.concatenate([np.abs(g.stack("all")).ravel() for g in held]))
    m = held[0].members[0]
    out = convert(dec, encoder, m.features, m.speaker)
    assert np.abs(out.values - m.features.values).mean() < ceiling
    assert reconstruction_loss(dec, encoder, held) < ceiling


def test_swap_test_improves(groups, encoder, decoder):
    dec, _ = decoder
    rep = swap_test(dec, encoder, groups[16:], 100, np.random.default_rng(0))
    assert rep.pair_count == 100
    assert rep.mean_l1_converted < rep.mean_l1_source
    assert rep.improved_fraction > 0.5


def test_convert_bad_speaker_dim(groups, encoder, decoder):
    dec, _ = decoder
    with pytest.raises(ValidationError):
        convert(dec, encoder, groups[0].members[0].features, np.zeros(5))


def test_decode_accepts_single_vector(decoder):
    dec, _ = decoder
    assert decode(dec, np.zeros((3, 4), np.float32), np.zeros(2)).shape == (3, 4)


class TestProbe:
    def test_separable_toy(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-2, 0.3, (100, 2)), rng.normal(2, 0.3, (100, 2))])
        y = np.repeat([0, 1], 100)
        probe = fit_probe(x, y, 2, ProbeConfig(steps=100))
        assert probe.accuracy(x, y) == 1.0 and probe.classes == 2

    def test_raw_above_chance(self, groups):
        _, res = train_probe(groups, "raw")
        assert res.accuracy > 2 * res.chance and res.chance == pytest.approx(1 / 3)
        assert res.train_frames > 0 and res.test_frames > 0

    def test_shuffled_labels_near_chance(self, groups):
        _, res = train_probe(groups, "raw", shuffle_labels=True)
        assert res.shuffled_labels and res.accuracy < 0.6

    def test_single_speaker_rejected(self, groups):
        import copy
        g = copy.deepcopy(groups[:2])
        for grp in g:
            for m in grp.members:
                m.speaker.id = "only"
        with pytest.raises(ValidationError, match="two speakers"):
            train_probe(g, "raw")

    def test_avenet_needs_encoder(self, groups):
        with pytest.raises(ValidationError):
            train_probe(groups, "avenet")

    def test_bad_representation(self, groups):
        with pytest.raises(ValidationError):
            train_probe(groups, "mel")


def test_dominant_source(groups):
    m = groups[0].select("lws")[0]
    k = int(np.argmax(m.speaker.weights))
    assert dominant_source(m) == m.speaker.sources[k]


class TestUnseen:
    def test_identical_variants_identical_numbers(self, groups, encoder):
        out = probe_unseen_speakers(groups[16:], {"a": (encoder, {"x": 1}), "b": (encoder, {"x": 1})},
                                    pair_count=50)
        assert out["a"] == out["b"]
        assert out["a"]["config"] == {"x": 1}
        assert "reduction_ratio" in out["a"]["distance"]

    def test_missing_variant(self, groups):
        with pytest.raises(ValidationError):
            probe_unseen_speakers(groups, {"with": (None, {})})

    def test_no_variants(self, groups):
        with pytest.raises(ValidationError):
            probe_unseen_speakers(groups, {})
