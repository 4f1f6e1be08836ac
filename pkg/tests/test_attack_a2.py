import numpy as np
import pytest
from sklearn.base import clone

from fedprint.attack_a2 import (
    PLDA,
    ExtractorTopology,
    FootprintEmbedder,
    _fold_normalization,
    build_training_corpus,
    cosine_score,
    extract_embedding,
    plda_fit,
    plda_score,
    train_extractor,
    utterance_embeddings,
)
from fedprint.exceptions import ConfigurationError
from fedprint.nn import (
    POOL_STD_FLOOR,
    TrainConfig,
    _forward,
    accuracy,
    forward,
    grad_check,
    init_model,
    loss_and_grads,
)

TOPO = ExtractorTopology(frame_layers=((8, (-1, 0, 1)), (8, (0,))), segment_layers=(6, 5))


def _pooled_net(seed=0, n_out=3, width=4):
    return init_model(TOPO.specs(width, n_out), seed=seed)


class TestTopology:
    def test_specs_shape(self):
        specs = TOPO.specs(4, 3)
        assert [s.activation for s in specs] == ["relu", "relu", "statspool", "relu", "relu",
                                                "softmax"]
        assert specs[2].output_dim == 16
        assert TOPO.embedding_index == 3

    def test_bad_embedding_layer(self):
        with pytest.raises(ConfigurationError):
            ExtractorTopology(segment_layers=(4,), embedding_layer=1)


class TestStatsPooling:
    def test_matches_brute_force(self, rng):
        net = _pooled_net()
        # positive frame-layer biases keep every relu unit active
        net = net.with_params([l.weight for l in net.layers],
                              [l.bias + (5.0 if i < 2 else 0.0) for i, l in enumerate(net.layers)])
        seqs = [rng.normal(size=(n, 4)) for n in (5, 2, 9)]
        pooled, _ = _forward(net, np.vstack(seqs), [len(s) for s in seqs], stop=3)
        for i, s in enumerate(seqs):
            _, trace = forward(_frame_part(net), s, capture=2)
            frames = trace.frames
            expect = np.concatenate([frames.mean(axis=0), frames.std(axis=0)])
            np.testing.assert_allclose(pooled[i], expect, rtol=1e-12, atol=1e-12)

    def test_single_frame_std_hits_floor(self, rng):
        pooled, _ = _forward(_pooled_net(), rng.normal(size=(1, 4)), [1], stop=3)
        np.testing.assert_allclose(pooled[0, 8:], np.sqrt(POOL_STD_FLOOR))

    def test_gradient_through_pooling(self, rng):
        net = _pooled_net(seed=1, n_out=3)
        seqs = [rng.normal(size=(n, 4)) for n in (6, 4, 7, 5)]
        X = np.vstack(seqs)
        y = np.array([0, 2, 1, 2])
        assert grad_check(net, (X, y, [len(s) for s in seqs]), n_checks=25) <= 1e-4

    def test_one_label_per_sequence(self, rng):
        net = _pooled_net()
        seqs = [rng.normal(size=(n, 4)) for n in (3, 3)]
        value, _, _ = loss_and_grads(net, np.vstack(seqs), [0, 1], [3, 3])
        assert np.isfinite(value)


def _frame_part(net):
    """Frame layers only, topped with a dummy softmax, to read their outputs."""
    from fedprint.nn import Layer, LayerSpec, ModelParams

    frame = net.layers[:2]
    top = Layer(LayerSpec(8, 2, "softmax"), np.zeros((2, 8)), np.zeros(2))
    return ModelParams(tuple(frame) + (top,), "frames")


class TestNormalizationFolding:
    def test_fold_equals_explicit_standardisation(self, rng):
        net = _pooled_net(seed=2)
        mean, scale = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
        folded = _fold_normalization(net, mean, scale)
        seqs = [rng.normal(size=(6, 4)), rng.normal(size=(3, 4))]
        X = np.vstack(seqs)
        a, _ = _forward(net, (X - mean) / scale, [6, 3])
        b, _ = _forward(folded, X, [6, 3])
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


@pytest.fixture(scope="module")
def trained(small_bench):
    g, ind, reg = small_bench["global"], small_bench["indicator"], small_bench["part1"]
    corpus, speakers = build_training_corpus(g, reg, ind, 2)
    cfg = TrainConfig(0.05, 15, 16, 4)
    return corpus, speakers, train_extractor(corpus, TOPO, cfg, 2, speakers)


class TestExtractor:
    def test_corpus_shape(self, small_bench, trained):
        corpus, speakers, _ = trained
        n_models = len(small_bench["part1"].models())
        assert len(corpus) == n_models * len(small_bench["indicator"])
        assert speakers == sorted(small_bench["part1"].personalized)

    def test_training_accuracy_beats_chance(self, trained):
        corpus, speakers, ex = trained
        assert accuracy(ex.network, corpus) >= 3 / len(speakers)

    def test_deterministic(self, trained):
        corpus, speakers, ex = trained
        again = train_extractor(corpus, TOPO, TrainConfig(0.05, 15, 16, 4), 2, speakers)
        assert ex.network.equal_params(again.network)

    def test_embedding_independent_of_utterance_order(self, small_bench, trained):
        _, _, ex = trained
        g, ind = small_bench["global"], small_bench["indicator"]
        m = small_bench["part2"].models()[0]
        a = extract_embedding(ex, g, m, ind)
        b = extract_embedding(ex, g, m, ind[::-1])
        np.testing.assert_allclose(a.vector, b.vector, rtol=1e-12, atol=1e-14)
        assert a.vector.shape == (ex.embedding_dim,)

    def test_same_speaker_pairs_more_similar(self, small_bench, trained):
        _, _, ex = trained
        g, ind, reg = small_bench["global"], small_bench["indicator"], small_bench["part2"]
        emb = {m.model_id: extract_embedding(ex, g, m, ind) for m in reg.models()}
        same, diff = [], []
        ids = sorted(emb)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                s = cosine_score(emb[a], emb[b])
                (same if reg.speaker_of(a) == reg.speaker_of(b) else diff).append(s)
        assert np.mean(same) > np.mean(diff)

    def test_wrong_h(self, small_bench, trained):
        _, _, ex = trained
        with pytest.raises(ConfigurationError):
            extract_embedding(ex, small_bench["global"], small_bench["global"],
                              small_bench["indicator"], h=1)

    def test_embedding_is_pre_activation(self, rng, trained):
        _, _, ex = trained
        seqs = [rng.normal(size=(7, ex.input_dim))]
        emb = utterance_embeddings(ex, seqs)
        assert np.any(emb < 0)

    def test_needs_two_speakers(self, rng):
        corpus = [(rng.normal(size=(4, 3)), 0)] * 3
        with pytest.raises(ConfigurationError):
            train_extractor(corpus, TOPO, TrainConfig(0.05, 1, 2, 0), 1)


class TestEmbedderEstimator:
    def test_fit_transform(self, small_bench):
        reg = small_bench["part1"]
        models = reg.models()
        est = FootprintEmbedder(small_bench["global"], small_bench["indicator"], h=1,
                                topology=TOPO, epochs=2, batch_size=16)
        assert clone(est).get_params()["epochs"] == 2
        Z = est.fit(models, [reg.speaker_of(m.model_id) for m in models]).transform(models[:4])
        assert Z.shape == (4, 6)
        assert len(est.classes_) == len(reg.personalized)


class TestCosine:
    def test_hand_value(self):
        assert cosine_score([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / np.sqrt(2), rel=1e-12)

    def test_zero_vector(self):
        assert cosine_score([0.0, 0.0], [1.0, 1.0]) == 0.0

    def test_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            cosine_score([1.0], [1.0, 2.0])


def _two_cov_sample(rng, B, W, n_spk, per_spk):
    d = len(B)
    ys = rng.multivariate_normal(np.zeros(d), B, size=n_spk)
    X = np.vstack([y + rng.multivariate_normal(np.zeros(d), W, size=per_spk) for y in ys])
    return X, np.repeat(np.arange(n_spk), per_spk)


class TestPlda:
    def test_recovers_covariances(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(3, 3))
        B = A @ A.T + np.eye(3)
        W = np.diag([0.5, 1.0, 2.0])
        X, y = _two_cov_sample(rng, B, W, 300, 200)
        m = plda_fit(X, y)
        assert np.linalg.norm(m.between - B) / np.linalg.norm(B) < 0.2
        assert np.linalg.norm(m.within - W) / np.linalg.norm(W) < 0.2

    def test_em_does_not_decrease_likelihood(self):
        rng = np.random.default_rng(1)
        X, y = _two_cov_sample(rng, np.eye(2) * 3, np.eye(2), 20, 5)
        lls = np.array(plda_fit(X, y).log_likelihoods)
        assert np.all(np.diff(lls) >= -1e-8 * np.abs(lls[:-1]))

    def test_one_dimensional_closed_form(self):
        from fedprint.attack_a2 import PldaModel

        b, w, x = 100.0, 1.0, 0.3
        m = PldaModel(np.zeros(1), np.array([[b]]), np.array([[w]]))
        t = b + w
        expect = -x * x / (t + b) + x * x / t - 0.5 * np.log((t * t - b * b) / (t * t))
        llr = plda_score(m, [x], [x])
        assert llr == pytest.approx(expect, rel=1e-10)
        assert llr > 0

    def test_single_embedding_per_speaker_falls_back(self, caplog):
        X = np.random.default_rng(2).normal(size=(5, 2))
        m = plda_fit(X, np.arange(5))
        assert np.all(np.linalg.eigvalsh(m.within) > 0)
        assert "one embedding per speaker" in caplog.text

    def test_estimator(self):
        rng = np.random.default_rng(3)
        X, y = _two_cov_sample(rng, np.eye(2) * 4, np.eye(2) * 0.1, 10, 4)
        plda = PLDA().fit(X, y)
        s = plda.score_pairs(X[[0, 0]], X[[1, 4]])
        assert s[0] > s[1]  # same speaker, then a cross-speaker pair

    def test_needs_two_speakers(self):
        with pytest.raises(ConfigurationError):
            plda_fit(np.ones((3, 2)), [0, 0, 0])
