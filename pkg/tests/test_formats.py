import struct

import numpy as np
import pytest

from fedprint import formats
from fedprint.asv import NONTARGET, TARGET, ScoredTrials, Trial
from fedprint.attack_a1 import DeltaStats
from fedprint.attack_a2 import Embedding, ExtractorParams, ExtractorTopology
from fedprint.exceptions import FormatError, MissingArtifactError
from fedprint.nn import init_model, mlp_specs

TOPO = ExtractorTopology(frame_layers=((5, (-1, 0, 1)),), segment_layers=(4, 3))


@pytest.fixture
def model():
    g = init_model(mlp_specs(4, [6, 5], 3, [(-2, 0, 2), (0,)]), seed=3)
    return g.with_params([l.weight for l in g.layers], [l.bias for l in g.layers], "m1", "g")


class TestFlam:
    def test_round_trip(self, model):
        back = formats.model_from_bytes(formats.model_to_bytes(model))
        assert back.equal_params(model)
        assert (back.model_id, back.parent_id) == ("m1", "g")
        assert back.layers[0].spec.context == (-2, 0, 2)

    def test_round_trip_with_statspool(self, tmp_path):
        net = init_model(TOPO.specs(4, 3), seed=0, model_id="x")
        back = formats.load_model(formats.save_model(net, tmp_path / "x.flam"))
        assert back.equal_params(net) and back.parent_id is None
        assert [l.spec.activation for l in back.layers] == [l.spec.activation for l in net.layers]

    def test_header_layout(self, model):
        raw = formats.model_to_bytes(model)
        assert raw[:4] == b"FLAM"
        assert struct.unpack("<II", raw[4:12]) == (formats.FLAM_VERSION, 3)

    def test_bad_magic(self, model):
        with pytest.raises(FormatError):
            formats.model_from_bytes(b"XXXX" + formats.model_to_bytes(model)[4:])

    def test_bad_version(self, model):
        raw = bytearray(formats.model_to_bytes(model))
        raw[4:8] = struct.pack("<I", 99)
        with pytest.raises(FormatError):
            formats.model_from_bytes(bytes(raw))

    @pytest.mark.parametrize("cut", [3, 10, 40, -1])
    def test_truncated(self, model, cut):
        with pytest.raises(FormatError):
            formats.model_from_bytes(formats.model_to_bytes(model)[:cut])

    def test_trailing_bytes(self, model):
        with pytest.raises(FormatError):
            formats.model_from_bytes(formats.model_to_bytes(model) + b"\0")

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            formats.load_model(tmp_path / "nope.flam")


class TestFlutFlst:
    def test_utterance_round_trip(self, rng):
        x = rng.normal(size=(7, 3))
        lab = np.array([0, 1, 2, 2, 1, 0, 4])
        frames, labels = formats.utterance_from_bytes(formats.utterance_to_bytes(x, lab))
        np.testing.assert_array_equal(frames, x)
        np.testing.assert_array_equal(labels, lab)

    def test_unlabelled_utterance(self, rng):
        frames, labels = formats.utterance_from_bytes(
            formats.utterance_to_bytes(rng.normal(size=(2, 2))))
        assert labels is None

    def test_stats_round_trip(self, rng):
        s = DeltaStats(3, rng.normal(size=5), rng.uniform(size=5), 123)
        back = formats.stats_from_bytes(formats.stats_to_bytes(s))
        assert (back.layer_index, back.n_frames) == (3, 123)
        np.testing.assert_array_equal(back.mu, s.mu)
        np.testing.assert_array_equal(back.sigma, s.sigma)

    def test_stats_truncated(self, rng):
        raw = formats.stats_to_bytes(DeltaStats(1, np.ones(2), np.ones(2), 1))
        with pytest.raises(FormatError):
            formats.stats_from_bytes(raw[:-3])


class TestDirectories:
    def test_partition_round_trip(self, tmp_path, small_bench):
        part = small_bench["parts"]["Part2"]
        formats.save_partition(part, tmp_path)
        back = formats.load_partition(tmp_path, "Part2")
        assert back.speaker_ids == part.speaker_ids
        assert back.adaptation_sets == part.adaptation_sets
        for u, v in zip(part.utterances, back.utterances):
            assert (u.utterance_id, u.speaker_id) == (v.utterance_id, v.speaker_id)
            np.testing.assert_array_equal(u.frames, v.frames)
            np.testing.assert_array_equal(u.labels, v.labels)
        for a, b in zip(part.speakers, back.speakers):
            np.testing.assert_array_equal(a.embedding, b.embedding)

    def test_missing_partition(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            formats.load_partition(tmp_path, "Part1")

    def test_registry_round_trip(self, tmp_path, small_bench):
        reg = small_bench["part2"]
        back = formats.load_registry(formats.save_registry(reg, tmp_path / "reg"))
        assert back.global_model.equal_params(reg.global_model)
        assert [m.model_id for m in back.models()] == [m.model_id for m in reg.models()]
        assert all(a.equal_params(b) for a, b in zip(back.models(), reg.models()))
        assert back.provenance == reg.provenance

    def test_extractor_round_trip(self, tmp_path):
        ex = ExtractorParams(init_model(TOPO.specs(4, 3), seed=1, model_id="x"), TOPO, 2,
                             ("a", "b", "c"))
        back = formats.load_extractor(formats.save_extractor(ex, tmp_path / "ex.flam"))
        assert back.network.equal_params(ex.network)
        assert (back.topology, back.h, back.speakers) == (TOPO, 2, ("a", "b", "c"))

    def test_extractor_needs_sidecar(self, tmp_path):
        ex = ExtractorParams(init_model(TOPO.specs(4, 3), seed=1), TOPO, 2)
        path = formats.save_extractor(ex, tmp_path / "ex.flam")
        path.with_suffix(".json").unlink()
        with pytest.raises(MissingArtifactError):
            formats.load_extractor(path)


class TestTables:
    TRIALS = [Trial("t0", "a", "b", TARGET), Trial("t1", "a", "c", NONTARGET)]

    def test_trials(self, tmp_path):
        assert formats.load_trials(formats.save_trials(self.TRIALS, tmp_path / "t.csv")) \
            == self.TRIALS

    def test_scores_exact(self, tmp_path):
        s = ScoredTrials(self.TRIALS, np.array([0.1 + 0.2, -1e-300]))
        back = formats.load_scores(formats.save_scores(s, tmp_path / "s.csv"))
        assert back.trials == s.trials
        assert back.scores.tobytes() == s.scores.tobytes()

    def test_scores_missing_column(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("trial_id,label\nt0,target\n")
        with pytest.raises(FormatError):
            formats.load_scores(p)

    def test_embeddings(self, tmp_path, rng):
        embs = [Embedding("m0", rng.normal(size=4), 3), Embedding("m1", rng.normal(size=4), 3)]
        path = formats.save_embeddings(embs, {"m0": "s0", "m1": "s1"}, tmp_path / "e.csv")
        back, spk = formats.load_embeddings(path)
        assert spk == {"m0": "s0", "m1": "s1"}
        for a, b in zip(embs, back):
            assert (a.model_id, a.h) == (b.model_id, b.h)
            np.testing.assert_array_equal(a.vector, b.vector)

    def test_det(self, tmp_path):
        pts = [(1.0, 0.0, -np.inf), (0.5, 0.25, 0.3), (0.0, 1.0, np.inf)]
        assert formats.load_det(formats.save_det(pts, tmp_path / "d.csv")) == pts

    def test_json_handles_numpy(self, tmp_path):
        import json

        path = formats.write_json({"a": np.float64(0.5), "b": np.arange(2), "c": np.int64(3)},
                                  tmp_path / "x.json")
        assert json.loads(path.read_text()) == {"a": 0.5, "b": [0, 1], "c": 3}
