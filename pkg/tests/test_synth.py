from dataclasses import replace

import numpy as np
import pytest

from fedprint.exceptions import ConfigurationError
from fedprint.synth import (
    PARTITIONS,
    GenConfig,
    PartitionSizes,
    make_partition,
    make_partitions,
    make_speakers,
    synth_utterance,
)

from conftest import SMALL_GEN, SMALL_SIZES


@pytest.fixture(scope="module")
def parts():
    return make_partitions(SMALL_GEN, SMALL_SIZES)


class TestPartitions:
    def test_speaker_sets_disjoint(self, parts):
        seen = set()
        for name in PARTITIONS:
            ids = set(parts[name].speaker_ids)
            assert not ids & seen
            seen |= ids

    def test_utterances_belong_to_partition_speakers(self, parts):
        for part in parts.values():
            ids = set(part.speaker_ids)
            assert all(u.speaker_id in ids for u in part.utterances)

    def test_adaptation_sets_disjoint(self, parts):
        for name in ("Part1", "Part2"):
            for spk, sets in parts[name].adaptation_sets.items():
                assert 1 <= len(sets) <= 2
                if len(sets) == 2:
                    assert not set(sets[0]) & set(sets[1])

    def test_two_set_count(self, parts):
        n_two = sum(len(s) == 2 for s in parts["Part2"].adaptation_sets.values())
        assert n_two == round(SMALL_SIZES.two_set_fraction * SMALL_SIZES.part2)

    def test_indicator_utterance_count(self, parts):
        ind = parts["Indicator"]
        assert len(ind.utterances) == SMALL_SIZES.indicator * SMALL_SIZES.indicator_utterances

    def test_deterministic_by_seed(self):
        a = make_partition("Part2", SMALL_GEN, SMALL_SIZES)
        b = make_partition("Part2", SMALL_GEN, SMALL_SIZES)
        c = make_partition("Part2", replace(SMALL_GEN, seed=12), SMALL_SIZES)
        assert all(np.array_equal(u.frames, v.frames) for u, v in zip(a.utterances, b.utterances))
        assert not np.array_equal(a.utterances[0].frames, c.utterances[0].frames)

    def test_full_scale_sizes_accepted(self):
        sizes = PartitionSizes(train_g=880, part1=736, part2=634, indicator=32,
                               train_frames_per_speaker=1, adaptation_frames=1,
                               two_set_fraction=564 / 736, indicator_utterances=1)
        gen = replace(SMALL_GEN, min_frames=1, max_frames=1)
        part1 = make_partition("Part1", gen, sizes)
        assert len(part1.speaker_ids) == 736
        assert sum(len(s) for s in part1.adaptation_sets.values()) == 1300

    def test_rejects_empty_partition(self):
        with pytest.raises(ConfigurationError):
            PartitionSizes(part2=0)


class TestSpeakers:
    def test_latents_uncorrelated(self):
        spk = make_speakers(1000, replace(SMALL_GEN, latent_dim=8), 5)
        corr = np.corrcoef(np.array([s.latent for s in spk]))
        off = corr[~np.eye(len(spk), dtype=bool)]
        assert abs(off.mean()) < 0.1

    def test_zero_speaker_scale_removes_embedding(self):
        spk = make_speakers(3, replace(SMALL_GEN, speaker_scale=0.0), 5)
        assert all(not np.any(s.embedding) for s in spk)


class TestUtterances:
    def test_noise_free_same_labels_identical(self):
        cfg = replace(SMALL_GEN, noise_scale=0.0)
        spk = make_speakers(1, cfg, 3)[0]
        labels = np.array([0, 0, 1, 1, 2, 3, 3])
        a = synth_utterance(spk, 7, cfg, np.random.default_rng(1), "a", labels)
        b = synth_utterance(spk, 7, cfg, np.random.default_rng(2), "b", labels)
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_appendage_equals_embedding(self, parts):
        E = SMALL_GEN.embedding_dim
        for name in PARTITIONS:
            emb = {s.speaker_id: s.embedding for s in parts[name].speakers}
            for u in parts[name].utterances:
                assert np.array_equal(u.frames[:, -E:], np.tile(emb[u.speaker_id], (u.n_frames, 1)))

    def test_appendage_off_width(self):
        cfg = replace(SMALL_GEN, append_embedding=False)
        spk = make_speakers(1, cfg, 3)[0]
        u = synth_utterance(spk, 5, cfg, np.random.default_rng(0), "u")
        assert u.frames.shape == (5, cfg.feature_dim)

    def test_centroid_classifier_beats_chance(self):
        cfg = replace(SMALL_GEN, append_embedding=False, seed=3)
        spk = make_speakers(10, cfg, 9)
        rng = np.random.default_rng(0)

        def mean_vec(s):
            return synth_utterance(s, 200, cfg, rng, "u").frames.mean(axis=0)

        centroids = np.array([np.mean([mean_vec(s) for _ in range(3)], axis=0) for s in spk])
        hits = 0
        for i, s in enumerate(spk):
            for _ in range(5):
                d = np.linalg.norm(centroids - mean_vec(s), axis=1)
                hits += int(np.argmin(d) == i)
        assert hits / 50 > 3 / 10

    def test_gen_config_validation(self):
        with pytest.raises(ConfigurationError):
            GenConfig(min_frames=10, max_frames=5)
        with pytest.raises(ConfigurationError):
            GenConfig(speaker_scale=-1.0)
