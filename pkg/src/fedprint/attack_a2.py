"""Learned footprint embeddings.

A TDNN with statistics pooling is trained to name the speaker behind a
personalized model from its indicator-set activation deltas.  The pre-activation
of one segment layer, averaged over indicator utterances, is the model's
embedding; embeddings are compared with cosine or PLDA scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError
from .nn import (
    LayerSpec,
    ModelParams,
    TrainConfig,
    _forward,
    hidden_activations,
    init_model,
    train_supervised,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorTopology:
    """Frame-level TDNN layers, statistics pooling, segment layers, softmax."""

    frame_layers: tuple = ((64, (-2, -1, 0, 1, 2)), (64, (-1, 0, 1)), (64, (0,)))
    segment_layers: tuple = (32, 32)
    embedding_layer: int = 0

    def __post_init__(self):
        if not self.frame_layers or not self.segment_layers:
            raise ConfigurationError("extractor needs frame and segment layers")
        if not 0 <= self.embedding_layer < len(self.segment_layers):
            raise ConfigurationError("embedding_layer must index a segment layer")

    def specs(self, input_dim, n_speakers):
        specs, prev = [], input_dim
        for width, ctx in self.frame_layers:
            specs.append(LayerSpec(prev * len(ctx), width, "relu", tuple(ctx)))
            prev = width
        specs.append(LayerSpec(prev, 2 * prev, "statspool"))
        prev = 2 * prev
        for width in self.segment_layers:
            specs.append(LayerSpec(prev, width, "relu"))
            prev = width
        specs.append(LayerSpec(prev, n_speakers, "softmax"))
        return specs

    @property
    def embedding_index(self):
        """Position of the embedding layer in the flat layer list."""
        return len(self.frame_layers) + 1 + self.embedding_layer


@dataclass(frozen=True)
class ExtractorParams:
    network: ModelParams
    topology: ExtractorTopology
    h: int
    speakers: tuple = ()

    @property
    def input_dim(self):
        return self.network.input_dim

    @property
    def embedding_dim(self):
        return self.network.layers[self.topology.embedding_index].spec.output_dim


@dataclass(frozen=True)
class Embedding:
    model_id: str
    vector: np.ndarray
    h: int


def build_training_corpus(global_model, models, indicator, h, speaker_ids=None):
    """One ``(delta sequence, speaker index)`` pair per model and indicator utterance.

    ``models`` is either a ModelRegistry or a list of models, in which case
    ``speaker_ids`` gives each model's speaker.  Returns ``(corpus, speakers)``
    where ``speakers`` lists the speaker ids in label order.
    """
    if not indicator:
        raise ConfigurationError("indicator set is empty")
    if speaker_ids is None:
        registry = models
        models = registry.models()
        speaker_ids = [registry.speaker_of(m.model_id) for m in models]
    models = list(models)
    speaker_ids = list(speaker_ids)
    if not models:
        raise ConfigurationError("no personalized models to train on")
    if len(models) != len(speaker_ids):
        raise ConfigurationError("one speaker id per model is required")
    speakers = sorted(set(speaker_ids))
    label = {s: i for i, s in enumerate(speakers)}
    base = hidden_activations(global_model, indicator, h)
    corpus = []
    for m, spk in zip(models, speaker_ids):
        for act, ref in zip(hidden_activations(m, indicator, h), base):
            corpus.append((act - ref, label[spk]))
    return corpus, speakers


def _fold_normalization(net: ModelParams, mean, scale) -> ModelParams:
    """Absorb ``(x - mean) / scale`` on every spliced frame into layer 0."""
    first = net.layers[0]
    k = len(first.spec.context)
    w = first.weight / np.tile(scale, k)[None, :]
    b = first.bias - w @ np.tile(mean, k)
    weights = [w] + [l.weight for l in net.layers[1:]]
    biases = [b] + [l.bias for l in net.layers[1:]]
    return net.with_params(weights, biases, model_id=net.model_id)


def train_extractor(corpus, topology: ExtractorTopology, cfg: TrainConfig, h,
                    speakers=None) -> ExtractorParams:
    """Train the speaker classifier on delta sequences.

    Inputs are standardised per dimension during training; the
    standardisation is folded into the first layer afterwards so the
    returned network consumes raw deltas.
    """
    if not corpus:
        raise ConfigurationError("extractor corpus is empty")
    labels = np.array([y for _, y in corpus])
    n_speakers = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise ConfigurationError("extractor training needs at least two speakers")
    width = corpus[0][0].shape[1]
    n = sum(len(x) for x, _ in corpus)
    mean = sum(x.sum(axis=0) for x, _ in corpus) / n
    std = np.sqrt(sum(((x - mean) ** 2).sum(axis=0) for x, _ in corpus) / n)
    floor = 0.01 * float(np.median(std)) if np.any(std > 0) else 1.0
    scale = np.maximum(std, max(floor, 1e-12))
    normed = [((x - mean) / scale, y) for x, y in corpus]
    init = init_model(topology.specs(width, n_speakers), cfg.seed, model_id="extractor")
    net = train_supervised(init, normed, cfg, model_id="extractor")
    net = _fold_normalization(net, mean, scale)
    return ExtractorParams(net, topology, h, tuple(speakers or range(n_speakers)))


def utterance_embeddings(extractor: ExtractorParams, sequences) -> np.ndarray:
    """Pre-activation embedding-layer outputs, one row per sequence."""
    X = np.vstack(sequences)
    if X.shape[1] != extractor.input_dim:
        raise ConfigurationError(
            f"delta width {X.shape[1]} != extractor input {extractor.input_dim}")
    lengths = [len(s) for s in sequences]
    _, cache = _forward(extractor.network, X, lengths,
                        stop=extractor.topology.embedding_index + 1)
    return cache[-1]["z"]


def extract_embedding(extractor: ExtractorParams, global_model, model, indicator, h=None,
                      global_acts=None) -> Embedding:
    """Model-level embedding: mean of its per-utterance embeddings."""
    h = extractor.h if h is None else h
    if h != extractor.h:
        raise ConfigurationError(f"extractor was trained on h={extractor.h}, not {h}")
    base = global_acts if global_acts is not None else hidden_activations(
        global_model, indicator, h)
    deltas = [a - b for a, b in zip(hidden_activations(model, indicator, h), base)]
    per_utt = utterance_embeddings(extractor, deltas)
    return Embedding(model.model_id, per_utt.mean(axis=0), h)


def cosine_score(a, b) -> float:
    va = np.asarray(getattr(a, "vector", a), dtype=np.float64)
    vb = np.asarray(getattr(b, "vector", b), dtype=np.float64)
    if va.shape != vb.shape:
        raise ConfigurationError("embedding widths differ")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


class FootprintEmbedder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(models, speaker_ids)`` then ``transform(models)``."""

    def __init__(self, global_model=None, indicator=None, h=1, topology=None,
                 learning_rate=0.05, epochs=20, batch_size=32, seed=0):
        self.global_model = global_model
        self.indicator = indicator
        self.h = h
        self.topology = topology
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        corpus, speakers = build_training_corpus(self.global_model, X, self.indicator,
                                                 self.h, speaker_ids=y)
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed)
        self.extractor_ = train_extractor(corpus, self.topology or ExtractorTopology(),
                                          cfg, self.h, speakers)
        self.classes_ = np.array(speakers)
        return self

    def transform(self, X):
        check_is_fitted(self, "extractor_")
        base = hidden_activations(self.global_model, self.indicator, self.h)
        return np.array([extract_embedding(self.extractor_, self.global_model, m,
                                           self.indicator, self.h, base).vector for m in X])


# --------------------------------------------------------------------------
# PLDA, two-covariance formulation


@dataclass(frozen=True)
class PldaModel:
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    log_likelihoods: tuple = ()


def _ridge(cov, delta):
    evals = np.linalg.eigvalsh(cov)
    if evals.min() < delta:
        return cov + delta * np.eye(len(cov)), True
    return cov, False


def _group(X, y):
    labels = np.asarray(y)
    groups = [X[labels == s] for s in dict.fromkeys(labels.tolist())]
    return groups


def plda_log_likelihood(groups, mean, between, within) -> float:
    """Marginal log-likelihood of grouped data under the two-covariance model."""
    d = len(mean)
    w_inv = np.linalg.inv(within)
    b_inv = np.linalg.inv(between)
    _, logdet_w = np.linalg.slogdet(within)
    _, logdet_b = np.linalg.slogdet(between)
    total = 0.0
    for G in groups:
        n = len(G)
        Xc = G - mean
        L = b_inv + n * w_inv
        g = w_inv @ Xc.sum(axis=0)
        _, logdet_l = np.linalg.slogdet(L)
        quad = np.einsum("ij,jk,ik->", Xc, w_inv, Xc)
        total += -0.5 * (n * d * np.log(2 * np.pi) + logdet_b + n * logdet_w + logdet_l
                         + quad - g @ np.linalg.solve(L, g))
    return float(total)


def plda_fit(X, y, n_iter=20, ridge=None) -> PldaModel:
    """EM estimate of the between- and within-speaker covariances.

    Singular covariances get a ridge ``delta * I`` with
    ``delta = 1e-6 * trace(total covariance) / dim`` unless ``ridge`` is given.
    """
    X = np.asarray(X, dtype=np.float64)
    groups = _group(X, y)
    if len(groups) < 2:
        raise ConfigurationError("PLDA needs at least two speakers")
    d = X.shape[1]
    mean = X.mean(axis=0)
    total_cov = np.cov(X.T, bias=True).reshape(d, d)
    delta = ridge if ridge is not None else 1e-6 * max(np.trace(total_cov), 1e-12) / d
    means = np.array([G.mean(axis=0) for G in groups])
    between, _ = _ridge(np.cov(means.T, bias=True).reshape(d, d), delta)
    if max(len(G) for G in groups) < 2:
        logger.warning("PLDA: one embedding per speaker; within-speaker covariance "
                       "falls back to the ridge floor")
        return PldaModel(mean, between, delta * np.eye(d), ())
    resid = np.vstack([G - G.mean(axis=0) for G in groups])
    within, _ = _ridge(resid.T @ resid / len(X), delta)

    lls = [plda_log_likelihood(groups, mean, between, within)]
    for _ in range(n_iter):
        w_inv = np.linalg.inv(within)
        b_inv = np.linalg.inv(between)
        acc_b = np.zeros((d, d))
        acc_w = np.zeros((d, d))
        for G in groups:
            n = len(G)
            Xc = G - mean
            cov_y = np.linalg.inv(b_inv + n * w_inv)
            y_hat = cov_y @ (w_inv @ Xc.sum(axis=0))
            acc_b += np.outer(y_hat, y_hat) + cov_y
            R = Xc - y_hat
            acc_w += R.T @ R + n * cov_y
        between, _ = _ridge((acc_b + acc_b.T) / (2 * len(groups)), delta)
        within, _ = _ridge((acc_w + acc_w.T) / (2 * len(X)), delta)
        lls.append(plda_log_likelihood(groups, mean, between, within))
    return PldaModel(mean, between, within, tuple(lls))


def plda_score(model: PldaModel, a, b) -> float:
    """Log-likelihood ratio of same-speaker versus different-speaker hypotheses."""
    va = np.asarray(getattr(a, "vector", a), dtype=np.float64) - model.mean
    vb = np.asarray(getattr(b, "vector", b), dtype=np.float64) - model.mean
    if va.shape != model.mean.shape or vb.shape != model.mean.shape:
        raise ConfigurationError("embedding width does not match the PLDA model")
    B, W = model.between, model.within
    T = B + W
    joint = np.block([[T, B], [B, T]])
    x = np.concatenate([va, vb])
    _, logdet_joint = np.linalg.slogdet(joint)
    _, logdet_t = np.linalg.slogdet(T)
    same = -0.5 * (x @ np.linalg.solve(joint, x) + logdet_joint)
    diff = -0.5 * (va @ np.linalg.solve(T, va) + vb @ np.linalg.solve(T, vb) + 2 * logdet_t)
    return float(same - diff)


class PLDA(BaseEstimator):
    """Two-covariance PLDA backend with an sklearn-style surface."""

    def __init__(self, n_iter=20, ridge=None):
        self.n_iter = n_iter
        self.ridge = ridge

    def fit(self, X, y):
        self.model_ = plda_fit(X, y, self.n_iter, self.ridge)
        return self

    def score_pairs(self, A, B):
        check_is_fitted(self, "model_")
        return np.array([plda_score(self.model_, a, b) for a, b in zip(A, B)])
