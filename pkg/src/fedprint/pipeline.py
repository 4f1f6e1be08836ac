"""End-to-end experiment: generate -> train-global -> personalize -> attacks -> evaluate.

Every stage reads its inputs through a :class:`Workspace`, which serves
objects produced earlier in the same process or loads them from the output
directory.  Running the stages one by one from the command line therefore
writes the same artifacts as :func:`run_pipeline`.
"""

from __future__ import annotations

import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .asv import ScoredTrials, build_trials, compute_eer
from .attack_a1 import VARIANTS, SimilarityConfig, StatsCache, score_all
from .attack_a2 import (
    PLDA,
    ExtractorTopology,
    build_training_corpus,
    cosine_score,
    extract_embedding,
    train_extractor,
)
from .config import ExperimentConfig, emit, parse_contexts
from .exceptions import ConfigurationError, FedprintError, MissingArtifactError
from .fl import RoundConfig, federated_average, personalize_all, train_global
from .nn import TrainConfig, hidden_activations, mlp_specs
from .synth import PARTITIONS, GenConfig, PartitionSizes, make_partition

logger = logging.getLogger(__name__)

STAGES = ("generate-data", "train-global", "personalize", "attack-a1", "train-a2",
          "attack-a2", "evaluate")
BACKENDS = ("cosine", "plda")
# fixed choices the configuration does not expose, stamped into summary.json
PROTOCOL = {"fl_round_attacked": 1, "a1_activations": "post-nonlinearity",
            "a2_embedding": "segment-layer pre-activation"}


class StageError(FedprintError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunReport:
    timings: dict = field(default_factory=dict)
    results: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    config: str = ""

    def record(self, stage, seconds):
        if stage in self.timings:
            raise ConfigurationError(f"stage {stage} recorded twice")
        self.timings[stage] = seconds

    def eer(self, attack, h, partition="part2", variant=None, backend=None):
        for r in self.results:
            if (r["attack"] == attack and r["h"] == h and r["partition"] == partition
                    and (variant is None or r.get("variant") == variant)
                    and (backend is None or r.get("backend") == backend)):
                return r["eer"]
        raise KeyError((attack, h, partition, variant, backend))


# -- config -> module objects ---------------------------------------------


def gen_config(cfg: ExperimentConfig) -> GenConfig:
    return GenConfig(**asdict(cfg.gen), seed=cfg.stage_seed("generate-data"))


def partition_sizes(cfg: ExperimentConfig) -> PartitionSizes:
    return PartitionSizes(**asdict(cfg.corpus))


def model_specs(cfg: ExperimentConfig, input_dim: int):
    m = cfg.model
    contexts = parse_contexts(m.contexts)
    if len(contexts) != m.hidden_layers:
        raise ConfigurationError(
            f"model.contexts lists {len(contexts)} layers, model.hidden_layers is {m.hidden_layers}")
    return mlp_specs(input_dim, [m.hidden_width] * m.hidden_layers, cfg.gen.n_classes,
                     contexts=contexts)


def train_config(section, seed) -> TrainConfig:
    return TrainConfig(section.learning_rate, section.epochs, section.batch_size, seed)


def extractor_topology(cfg: ExperimentConfig) -> ExtractorTopology:
    e = cfg.extractor
    contexts = parse_contexts(e.frame_contexts)
    if len(contexts) != len(e.frame_widths):
        raise ConfigurationError("extractor.frame_contexts and frame_widths differ in length")
    return ExtractorTopology(tuple(zip(e.frame_widths, contexts)), e.segment_widths,
                             e.embedding_layer)


def similarity_config(cfg: ExperimentConfig, variant="combined") -> SimilarityConfig:
    a = cfg.attack
    if variant == "combined":
        return SimilarityConfig(a.alpha_mu, a.alpha_sigma, a.zero_norm_epsilon)
    base = VARIANTS[variant]
    return SimilarityConfig(base.alpha_mu, base.alpha_sigma, a.zero_norm_epsilon)


def validate(cfg: ExperimentConfig):
    """Build every derived object once so bad values fail before any work."""
    gen = gen_config(cfg)
    partition_sizes(cfg)
    model_specs(cfg, gen.input_dim)
    train_config(cfg.global_train, 0)
    train_config(cfg.finetune, 0)
    train_config(cfg.extractor, 0)
    RoundConfig(weighting=cfg.rounds.weighting)
    extractor_topology(cfg)
    similarity_config(cfg)
    for h in tuple(cfg.attack.h) + tuple(cfg.attack.a2_h):
        if not 1 <= h <= cfg.model.hidden_layers:
            raise ConfigurationError(f"h={h} outside 1..{cfg.model.hidden_layers}")
    if cfg.attack.backend not in BACKENDS:
        raise ConfigurationError(f"attack.backend must be one of {BACKENDS}")
    if cfg.trials.n_nontarget < 1:
        raise ConfigurationError("trials.n_nontarget must be positive")
    if cfg.run.threads < 0:
        raise ConfigurationError("run.threads must be >= 0")
    return cfg


# -- workspace ------------------------------------------------------------


class Workspace:
    """Artifact directory plus an in-process cache of loaded objects."""

    def __init__(self, cfg: ExperimentConfig, out=None):
        self.cfg = cfg
        self.root = Path(out or cfg.run.out)
        self._cache = {}

    @property
    def threads(self):
        return self.cfg.run.threads or None

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def _get(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def put(self, key, value):
        self._cache[key] = value
        return value

    def partition(self, name):
        return self._get(("part", name),
                         lambda: formats.load_partition(self.path("data"), name))

    def global_model(self):
        return self._get("global",
                         lambda: formats.load_model(self.path("models", "global.flam")))

    def registry(self, name):
        return self._get(("reg", name),
                         lambda: formats.load_registry(self.path("models", name)))

    def trials(self, partition):
        return self._get(("trials", partition), lambda: formats.load_trials(
            self.path("trials", f"{partition}.csv")))

    def extractor(self, h):
        return self._get(("extractor", h), lambda: formats.load_extractor(
            self.path("a2", f"h{h}", "extractor.flam")))

    def global_acts(self, h):
        ind = self.partition("Indicator").utterances
        return self._get(("acts", h), lambda: hidden_activations(self.global_model(), ind, h))


def _registry_key(partition):
    return {"part1": "Part1", "part2": "Part2"}[partition]


def _trial_partitions(cfg):
    return ("part2", "combined") if cfg.trials.combined else ("part2",)


# -- stages -----------------------------------------------------------------


def stage_generate(ws: Workspace):
    gen, sizes = gen_config(ws.cfg), partition_sizes(ws.cfg)
    for name in PARTITIONS:
        part = ws.put(("part", name), make_partition(name, gen, sizes))
        formats.save_partition(part, ws.path("data"))


def stage_train_global(ws: Workspace):
    cfg = ws.cfg
    train_g = ws.partition("TrainG")
    specs = model_specs(cfg, train_g.utterances[0].frames.shape[1])
    model = train_global(train_g, specs, train_config(cfg.global_train,
                                                      cfg.stage_seed("train-global")))
    ws.put("global", model)
    formats.save_model(model, ws.path("models", "global.flam"))


def stage_personalize(ws: Workspace):
    cfg = ws.cfg
    rc = RoundConfig(train_config(cfg.finetune, cfg.stage_seed("personalize")),
                     weighting=cfg.rounds.weighting)
    g = ws.global_model()
    registries = []
    for name in ("Part1", "Part2"):
        reg = ws.put(("reg", name), personalize_all(g, ws.partition(name), rc,
                                                    threads=ws.threads))
        formats.save_registry(reg, ws.path("models", name))
        registries.append(reg)
    merged = registries[0].merged(registries[1])
    models = merged.models()
    weights = (None if cfg.rounds.weighting == "uniform"
               else [merged.provenance[m.model_id].n_frames for m in models])
    formats.save_model(federated_average(models, weights, model_id="global-r2"),
                       ws.path("models", "fedavg.flam"))
    seed = cfg.stage_seed("trials")
    part2 = registries[1]
    for partition, reg in (("part2", part2), ("combined", merged)):
        if partition not in _trial_partitions(cfg):
            continue
        trials = ws.put(("trials", partition), build_trials(reg, cfg.trials.n_nontarget, seed))
        formats.save_trials(trials, ws.path("trials", f"{partition}.csv"))


def _models_for(ws, partition):
    if partition == "combined":
        reg = ws.registry("Part1").merged(ws.registry("Part2"))
    else:
        reg = ws.registry(_registry_key(partition))
    return {m.model_id: m for m in reg.models()}


def stage_attack_a1(ws: Workspace, h_list=None, variants=("combined",)):
    cfg = ws.cfg
    g = ws.global_model()
    indicator = ws.partition("Indicator").utterances
    cache = StatsCache()
    for partition in _trial_partitions(cfg):
        models = _models_for(ws, partition)
        trials = ws.trials(partition)
        for h in h_list or cfg.attack.h:
            for variant in variants:
                scored = score_all(g, models, indicator, h, trials,
                                   similarity_config(cfg, variant), cache=cache,
                                   threads=ws.threads)
                formats.save_scores(scored, ws.path("a1", partition, f"h{h}", f"{variant}.csv"))


def stage_train_a2(ws: Workspace, h_list=None):
    cfg = ws.cfg
    g = ws.global_model()
    indicator = ws.partition("Indicator").utterances
    part1 = ws.registry("Part1")
    topo = extractor_topology(cfg)
    for h in h_list or cfg.attack.a2_h:
        corpus, speakers = build_training_corpus(g, part1, indicator, h)
        tcfg = train_config(cfg.extractor, cfg.stage_seed(f"train-a2/h{h}"))
        ex = ws.put(("extractor", h), train_extractor(corpus, topo, tcfg, h, speakers))
        formats.save_extractor(ex, ws.path("a2", f"h{h}", "extractor.flam"))
        # Part-1 embeddings double as PLDA training data.
        _embed_registry(ws, ex, part1, ws.path("a2", f"h{h}", "part1_embeddings.csv"))


def _embed_registry(ws, extractor, registry, path):
    g = ws.global_model()
    indicator = ws.partition("Indicator").utterances
    base = ws.global_acts(extractor.h)
    embs = [extract_embedding(extractor, g, m, indicator, extractor.h, base)
            for m in registry.models()]
    speakers = {m.model_id: registry.speaker_of(m.model_id) for m in registry.models()}
    formats.save_embeddings(embs, speakers, path)
    return embs, speakers


def stage_attack_a2(ws: Workspace, h_list=None, backend=None):
    cfg = ws.cfg
    backend = backend or cfg.attack.backend
    if backend not in BACKENDS:
        raise ConfigurationError(f"backend must be one of {BACKENDS}")
    trials = ws.trials("part2")
    part2 = ws.registry("Part2")
    for h in h_list or cfg.attack.a2_h:
        ex = ws.extractor(h)
        embs, _ = _embed_registry(ws, ex, part2, ws.path("a2", f"h{h}", "part2_embeddings.csv"))
        vec = {e.model_id: e.vector for e in embs}
        for t in trials:
            for mid in (t.enroll_model_id, t.test_model_id):
                if mid not in vec:
                    raise ConfigurationError(f"trial model {mid} is not in Part-2")
        enroll = np.array([vec[t.enroll_model_id] for t in trials])
        test = np.array([vec[t.test_model_id] for t in trials])
        if backend == "cosine":
            scores = np.array([cosine_score(a, b) for a, b in zip(enroll, test)])
        else:
            train, spk = formats.load_embeddings(ws.path("a2", f"h{h}", "part1_embeddings.csv"))
            plda = PLDA().fit(np.array([e.vector for e in train]),
                              np.array([spk[e.model_id] for e in train]))
            scores = plda.score_pairs(enroll, test)
        scored = ScoredTrials(list(trials), scores,
                              {"attack": "A2", "h": h, "backend": backend})
        formats.save_scores(scored, ws.path("a2", f"h{h}", f"scores_{backend}.csv"))


def _result(cfg, scored, **fields):
    res = compute_eer(scored)
    return dict(fields, eer=res.eer, threshold=res.threshold, n_target=res.n_target,
                n_nontarget=res.n_nontarget, config_hash=cfg.hash(), seed=cfg.run.seed), res


def stage_evaluate(ws: Workspace):
    """Compute EER and DET for every score file present; write summary.json."""
    cfg = ws.cfg
    results = []
    a1 = ws.path("a1")
    for path in sorted(a1.glob("*/h*/*.csv")) if a1.exists() else []:
        if path.name.startswith("det_"):
            continue
        partition, h, variant = path.parent.parent.name, int(path.parent.name[1:]), path.stem
        row, res = _result(cfg, formats.load_scores(path), attack="A1", partition=partition,
                           h=h, variant=variant)
        formats.save_det(res.det_points, path.with_name(f"det_{variant}.csv"))
        results.append(row)
    a2 = ws.path("a2")
    for path in sorted(a2.glob("h*/scores_*.csv")) if a2.exists() else []:
        h, backend = int(path.parent.name[1:]), path.stem[len("scores_"):]
        row, res = _result(cfg, formats.load_scores(path), attack="A2", partition="part2",
                           h=h, backend=backend)
        formats.save_det(res.det_points, path.with_name(f"det_{backend}.csv"))
        results.append(row)
    if not results:
        raise MissingArtifactError(f"no score files under {ws.root}/a1 or {ws.root}/a2")
    results.sort(key=lambda r: (r["attack"], r["partition"], r["h"],
                                r.get("variant", ""), r.get("backend", "")))
    formats.write_json({"config_hash": cfg.hash(), "seed": cfg.run.seed, "protocol": PROTOCOL,
                        "results": results}, ws.path("summary.json"))
    return results


def ablation_table(ws: Workspace, h_list=None, partition="part2"):
    """EER for every h and statistic variant; also written as ``ablation.csv``."""
    h_list = tuple(h_list or range(1, ws.cfg.model.hidden_layers + 1))
    variants = tuple(VARIANTS)
    cfg = ws.cfg
    g = ws.global_model()
    indicator = ws.partition("Indicator").utterances
    models = _models_for(ws, partition)
    trials = ws.trials(partition)
    cache = StatsCache()
    table = {}
    for h in h_list:
        table[h] = {}
        for v in variants:
            scored = score_all(g, models, indicator, h, trials, similarity_config(cfg, v),
                               cache=cache, threads=ws.threads)
            table[h][v] = compute_eer(scored).eer
    path = ws.path("ablation.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["h," + ",".join(variants)]
    lines += [f"{h}," + ",".join(repr(table[h][v]) for v in variants) for h in h_list]
    path.write_text("\n".join(lines) + "\n")
    return table


# -- orchestration ----------------------------------------------------------


STAGE_FUNCS = {
    "generate-data": stage_generate,
    "train-global": stage_train_global,
    "personalize": stage_personalize,
    "attack-a1": lambda ws: stage_attack_a1(ws, variants=tuple(VARIANTS)),
    "train-a2": stage_train_a2,
    "attack-a2": stage_attack_a2,
    "evaluate": stage_evaluate,
}


def run_stage(ws: Workspace, stage, func=None):
    func = func or STAGE_FUNCS[stage]
    logger.info("stage %s", stage)
    t0 = time.perf_counter()
    try:
        out = func(ws)
    except (ConfigurationError, MissingArtifactError):
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return out, time.perf_counter() - t0


def environment_stamp():
    import sklearn

    return {"python": sys.version.split()[0], "numpy": np.__version__,
            "scikit-learn": sklearn.__version__, "platform": platform.platform()}


def run_pipeline(cfg: ExperimentConfig, out=None) -> RunReport:
    validate(cfg)
    ws = Workspace(cfg, out)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.txt").write_text(emit(cfg))
    report = RunReport(environment=environment_stamp(), config=emit(cfg))
    for stage in STAGES:
        result, seconds = run_stage(ws, stage)
        report.record(stage, seconds)
        if stage == "evaluate":
            report.results = result
    formats.write_json({"timings": report.timings, "environment": report.environment,
                        "results": report.results, "config": report.config},
                       ws.path("report.json"))
    return report


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """``with_overrides(cfg, **{"gen.speaker_scale": 0.0})``."""
    for key, value in overrides.items():
        cfg = cfg.set(key, value)
    return cfg


__all__ = ["RunReport", "StageError", "Workspace", "run_pipeline", "run_stage", "validate",
           "ablation_table", "with_overrides", "STAGES"]
