import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faps_lab import synth
from faps_lab.alignment import e_avg, parse_intervals
from faps_lab.formats import read_feature_file
from faps_lab.synth import (BASE, LWS, ConfigError, ContentTrajectory, Corpus, CorpusConfig, CorpusModel,
                            MixingModel, PhonemeScript, SpeakerEmbedding, ValidationError, blend_speakers,
                            content_trajectory, generate_corpus, make_faps_group, manifest_digest,
                            render_features, sample_script, split_groups)

SMALL = dict(groups=6, base_speakers=3, lws_count=2, feature_dim=5, content_dim=4, speaker_dim=3,
             phoneme_count=10)


def spk(i, vec):
    return SpeakerEmbedding(f"s{i}", np.asarray(vec, dtype=np.float64))


class TestBlend:
    def test_one_hot_is_bitwise_copy(self):
        rng = np.random.default_rng(0)
        embs = [spk(i, rng.normal(size=6)) for i in range(4)]
        for k in range(4):
            w = [0.0] * 4
            w[k] = 1.0
            out = blend_speakers(w, embs)
            assert out.vector.tobytes() == embs[k].vector.tobytes()
            assert out.vector is not embs[k].vector

    def test_hand_blend(self):
        out = blend_speakers([0.25, 0.75], [spk(0, [0, 4]), spk(1, [4, 0])])
        np.testing.assert_array_equal(out.vector, [3.0, 1.0])
        assert out.role == LWS and out.sources == ("s0", "s1") and out.weights == (0.25, 0.75)

    def test_in_hull_random(self):
        rng = np.random.default_rng(1)
        embs = [spk(i, rng.normal(size=8)) for i in range(5)]
        stack = np.stack([e.vector for e in embs])
        for _ in range(200):
            w = rng.dirichlet(np.ones(5))
            v = blend_speakers(w / w.sum(), embs).vector
            assert np.all(v >= stack.min(0) - 1e-12) and np.all(v <= stack.max(0) + 1e-12)

    @pytest.mark.parametrize("w", [[0.5, 0.6], [-0.1, 1.1], [1.0]])
    def test_bad_weights(self, w):
        with pytest.raises(ValidationError):
            blend_speakers(w, [spk(0, [1.0]), spk(1, [2.0])])

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            blend_speakers([0.5, 0.5], [spk(0, [1.0]), spk(1, [2.0, 3.0])])


class TestScripts:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_sampled_script_bounds(self, seed):
        s = sample_script(np.random.default_rng(seed), 10, (2, 4), (1, 3))
        assert s.entries[0][0] == synth.SILENCE and s.entries[-1][0] == synth.SILENCE
        assert 4 <= len(s.entries) <= 6
        assert all(1 <= d <= 3 for d in s.durations)
        assert all(0 < p < 10 for p, _ in s.entries[1:-1])

    def test_frame_phonemes(self):
        s = PhonemeScript(((0, 2), (3, 1), (0, 2)))
        np.testing.assert_array_equal(s.frame_phonemes(), [0, 0, 3, 0, 0])
        assert s.labels == ["sil", "p03", "sil"]

    def test_zero_duration_rejected(self):
        with pytest.raises(ValidationError):
            PhonemeScript(((1, 0),))

    def test_inverted_range(self):
        with pytest.raises(ConfigError):
            sample_script(np.random.default_rng(0), 10, (5, 2))


def _mix(rng, gamma=0.0, sigma=0.0):
    return MixingModel.sample(rng, 3, 2, 4, 1.0, 1.0, gamma, sigma)


class TestRender:
    def test_linear_oracle(self):
        rng = np.random.default_rng(0)
        mix = _mix(rng)
        c = rng.normal(size=(5, 3))
        s = spk(0, rng.normal(size=2))
        out = render_features(ContentTrajectory(None, c), s, mix).values
        want = np.array([[sum(c[t, k] * mix.content_map[k, d] for k in range(3)) +
                          sum(s.vector[k] * mix.speaker_map[k, d] for k in range(2))
                          for d in range(4)] for t in range(5)])
        np.testing.assert_allclose(out, want, atol=1e-5)

    def test_interaction_oracle(self):
        rng = np.random.default_rng(1)
        mix = _mix(rng, gamma=0.3)
        c = rng.normal(size=(2, 3))
        v = rng.normal(size=2)
        out = render_features(ContentTrajectory(None, c), spk(0, v), mix).values
        want = c @ mix.content_map + v @ mix.speaker_map
        for t in range(2):
            for a in range(3):
                for b in range(2):
                    want[t] += 0.3 * c[t, a] * v[b] * mix.interaction_map[a * 2 + b]
        np.testing.assert_allclose(out, want, atol=1e-5)

    def test_zero_speaker_is_content_only(self):
        rng = np.random.default_rng(2)
        mix = _mix(rng, gamma=0.5)
        c = rng.normal(size=(4, 3))
        out = render_features(ContentTrajectory(None, c), spk(0, np.zeros(2)), mix).values
        np.testing.assert_allclose(out, c @ mix.content_map, atol=1e-6)

    def test_noise_needs_rng(self):
        mix = _mix(np.random.default_rng(0), sigma=0.1)
        with pytest.raises(ConfigError):
            render_features(ContentTrajectory(None, np.zeros((2, 3))), spk(0, [0, 0]), mix)

    def test_bad_speaker_dim(self):
        mix = _mix(np.random.default_rng(0))
        with pytest.raises(ConfigError):
            render_features(ContentTrajectory(None, np.zeros((2, 3))), spk(0, [0, 0, 0]), mix)


class TestContent:
    def test_drift_bounded_and_reset_per_phoneme(self):
        rng = np.random.default_rng(0)
        codes = rng.normal(size=(5, 3))
        script = PhonemeScript(((1, 4), (2, 3)))
        tr = content_trajectory(script, codes, 0.1, rng).frames
        np.testing.assert_array_equal(tr[0], codes[1])
        np.testing.assert_array_equal(tr[4], codes[2])
        assert np.all(np.abs(tr[:4] - codes[1]) <= 0.3 + 1e-12)
        assert np.all(np.abs(np.diff(tr[:4], axis=0)) <= 0.1)

    def test_zero_drift_holds_code(self):
        codes = np.eye(3)
        tr = content_trajectory(PhonemeScript(((2, 5),)), codes, 0.0, np.random.default_rng(0)).frames
        np.testing.assert_array_equal(tr, np.tile(codes[2], (5, 1)))


class TestGroups:
    def test_members_share_content_and_script(self):
        rng = np.random.default_rng(0)
        mix = _mix(rng)
        base = [spk(i, rng.normal(size=2)) for i in range(3)]
        script = PhonemeScript(((0, 2), (1, 3), (0, 2)))
        g = make_faps_group(script, base, 2, mix, rng, rng.normal(size=(3, 3)), 0.05)
        assert len(g.select("base")) == 3 and len(g.select("lws")) == 2
        # noise-free linear model: member minus its speaker offset is the same content for all
        content = [m.features.values - m.speaker.vector @ mix.speaker_map for m in g.members]
        for c in content[1:]:
            np.testing.assert_allclose(c, content[0], atol=1e-5)

    def test_needs_two_base(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValidationError):
            make_faps_group(PhonemeScript(((1, 2),)), [spk(0, [0, 0])], 0, _mix(rng), rng,
                            np.zeros((3, 3)))

    def test_lws_members_are_blends_of_base(self):
        m = CorpusModel.from_config(CorpusConfig(**SMALL))
        g = m.group(0)
        ids = {s.id: s.vector for s in m.speakers}
        for mem in g.select("lws"):
            assert 2 <= len(mem.speaker.sources) <= 3
            want = sum(w * ids[s] for s, w in zip(mem.speaker.sources, mem.speaker.weights))
            np.testing.assert_allclose(mem.speaker.vector, want, atol=1e-12)


class TestCorpusModel:
    def test_frame_range_respected(self):
        m = CorpusModel.from_config(CorpusConfig(groups=50))
        frames = [m.group(i).frames for i in range(50)]
        assert min(frames) >= 20 and max(frames) <= 60

    def test_group_depends_only_on_seed_and_id(self):
        a = CorpusModel.from_config(CorpusConfig(**SMALL)).group(3)
        b = CorpusModel.from_config(CorpusConfig(**SMALL)).group(3)
        for x, y in zip(a.members, b.members):
            assert x.features.values.tobytes() == y.features.values.tobytes()

    def test_different_seed_differs(self):
        a = CorpusModel.from_config(CorpusConfig(**SMALL)).group(0)
        b = CorpusModel.from_config(CorpusConfig(**SMALL), seed=99).group(0, seed=99)
        assert a.members[0].features.values.tobytes() != b.members[0].features.values.tobytes()

    @pytest.mark.parametrize("kw", [dict(base_speakers=1), dict(frame_range=[500, 600]),
                                    dict(holdout_fraction=1.0), dict(length_range=[4, 2])])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            CorpusConfig(**kw)


@pytest.mark.parametrize("n,frac,hold", [(2000, 0.1, 200), (10, 0.1, 1), (5, 0.0, 0), (1, 0.5, 0)])
def test_split(n, frac, hold):
    tr, ho = split_groups(n, frac)
    assert len(ho) == hold and sorted(tr + ho) == list(range(n)) and not set(tr) & set(ho)


class TestOnDisk:
    def test_layout_and_reload(self, tmp_path):
        cfg = CorpusConfig(**SMALL)
        generate_corpus(cfg, tmp_path)
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["seed"] == cfg.seed and man["config"]["groups"] == 6
        assert len(man["groups"]) == 6 and len(man["speakers"]) == 3
        corpus = Corpus.open(tmp_path)
        model = CorpusModel.from_config(cfg)
        for gid in range(6):
            on_disk, fresh = corpus.group(gid), model.group(gid)
            assert on_disk.script == fresh.script
            for a, b in zip(on_disk.members, fresh.members):
                assert a.features.values.tobytes() == b.features.values.tobytes()
                assert a.role == b.role
        m0 = man["groups"][0]["members"][0]
        assert corpus.find_member(tmp_path / m0["path"]) == (0, 0)
        assert corpus.find_member(tmp_path / "nope.fpk") is None

    def test_intervals_exact_for_every_pair(self, tmp_path):
        generate_corpus(CorpusConfig(**SMALL), tmp_path)
        corpus = Corpus.open(tmp_path)
        seqs = [parse_intervals(corpus.intervals_text(g)) for g in corpus.group_ids]
        for g, s in zip(corpus.group_ids, seqs):
            assert s.intervals[-1].end == pytest.approx(corpus.group(g).frames * 0.02, abs=1e-9)
        assert e_avg([(s, s) for s in seqs]).e_avg == 0.0

    def test_member_files_are_raw_fpk(self, tmp_path):
        generate_corpus(CorpusConfig(**SMALL), tmp_path)
        f = read_feature_file(tmp_path / "groups" / "g00000" / "spk00.fpk")
        assert f.provenance == "raw" and f.dim == 5

    def test_threads_do_not_change_output(self, tmp_path):
        generate_corpus(CorpusConfig(**SMALL), tmp_path / "a")
        generate_corpus(CorpusConfig(**SMALL), tmp_path / "b", threads=4)
        assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_unwritable_output(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(OSError):
            generate_corpus(CorpusConfig(**SMALL), tmp_path / "file" / "sub")

    def test_not_a_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(ValidationError):
            Corpus.open(tmp_path)


def test_thread_env(monkeypatch):
    monkeypatch.setenv("FAPS_LAB_THREADS", "3")
    assert synth.default_threads() == 3
    monkeypatch.setenv("FAPS_LAB_THREADS", "junk")
    assert synth.default_threads() == 1
