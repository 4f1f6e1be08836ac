"""Binary and text artifacts: FLAM models, FLUT utterances, FLST footprints,
corpus and registry directories, trial/score/embedding/DET CSVs.

All binary integers and floats are little-endian.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError, MissingArtifactError
from .nn import Layer, LayerSpec, ModelParams

FLAM_VERSION = 1
ACTIVATION_CODES = {"identity": 0, "relu": 1, "softmax": 2, "statspool": 3}
_CODE_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}
NO_LABEL = 0xFFFFFFFF


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def string(self):
        (n,) = self.unpack("I")
        return self.take(n).decode("utf-8")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"trailing bytes in {self.what}")


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _require(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


# -- FLAM -------------------------------------------------------------------


def model_to_bytes(model: ModelParams) -> bytes:
    out = io.BytesIO()
    out.write(b"FLAM")
    out.write(struct.pack("<II", FLAM_VERSION, len(model.layers)))
    for layer in model.layers:
        s = layer.spec
        out.write(struct.pack("<IIBB", s.input_dim, s.output_dim,
                              ACTIVATION_CODES[s.activation], len(s.context)))
        out.write(struct.pack(f"<{len(s.context)}b", *s.context))
        out.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    out.write(_string(model.model_id))
    out.write(_string(model.parent_id or ""))
    return out.getvalue()


def model_from_bytes(data: bytes) -> ModelParams:
    r = _Reader(data, "FLAM model")
    if r.take(4) != b"FLAM":
        raise FormatError("not a FLAM file")
    version, n_layers = r.unpack("II")
    if version != FLAM_VERSION:
        raise FormatError(f"unsupported FLAM version {version}")
    layers = []
    for _ in range(n_layers):
        in_dim, out_dim, code, n_ctx = r.unpack("IIBB")
        if code not in _CODE_NAMES:
            raise FormatError(f"unknown activation code {code}")
        ctx = r.unpack(f"{n_ctx}b")
        spec = LayerSpec(in_dim, out_dim, _CODE_NAMES[code], ctx)
        if spec.has_params:
            w = r.floats(in_dim * out_dim).reshape(out_dim, in_dim)
            b = r.floats(out_dim)
        else:
            w, b = np.zeros((0, 0)), np.zeros(0)
        layers.append(Layer(spec, w, b))
    model_id = r.string()
    parent = r.string() or None
    r.done()
    return ModelParams(tuple(layers), model_id, parent)


def save_model(model: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path) -> ModelParams:
    return model_from_bytes(_require(path).read_bytes())


# -- FLUT -------------------------------------------------------------------


def utterance_to_bytes(frames, labels=None) -> bytes:
    frames = np.asarray(frames, dtype="<f8")
    T, D = frames.shape
    if labels is None:
        lab = np.full(T, NO_LABEL, dtype="<u4")
    else:
        lab = np.asarray(labels, dtype="<u4")
    return b"FLUT" + struct.pack("<II", T, D) + frames.tobytes() + lab.tobytes()


def utterance_from_bytes(data: bytes):
    r = _Reader(data, "FLUT utterance")
    if r.take(4) != b"FLUT":
        raise FormatError("not a FLUT file")
    T, D = r.unpack("II")
    frames = r.floats(T * D).reshape(T, D)
    labels = np.frombuffer(r.take(4 * T), dtype="<u4").astype(np.int64)
    r.done()
    if np.all(labels == NO_LABEL):
        labels = None
    return frames, labels


# -- FLST -------------------------------------------------------------------


def stats_to_bytes(stats) -> bytes:
    return (b"FLST" + struct.pack("<II", stats.layer_index, stats.width)
            + np.asarray(stats.mu, dtype="<f8").tobytes()
            + np.asarray(stats.sigma, dtype="<f8").tobytes()
            + struct.pack("<Q", stats.n_frames))


def stats_from_bytes(data: bytes):
    from .attack_a1 import DeltaStats

    r = _Reader(data, "FLST stats")
    if r.take(4) != b"FLST":
        raise FormatError("not a FLST file")
    h, width = r.unpack("II")
    mu = r.floats(width)
    sigma = r.floats(width)
    (n,) = r.unpack("Q")
    r.done()
    return DeltaStats(h, mu, sigma, n)


# -- corpus directories -----------------------------------------------------


def save_partition(part, root) -> Path:
    root = Path(root) / part.name
    (root / "utts").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", "speaker_id", "file", "n_frames"])
        for u in part.utterances:
            rel = f"utts/{u.utterance_id}.flut"
            (root / rel).write_bytes(utterance_to_bytes(u.frames, u.labels))
            w.writerow([u.utterance_id, u.speaker_id, rel, u.n_frames])
    with open(root / "speakers.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speaker_id", "kind", "values"])
        for s in part.speakers:
            w.writerow([s.speaker_id, "latent", " ".join(repr(float(v)) for v in s.latent)])
            w.writerow([s.speaker_id, "embedding",
                        " ".join(repr(float(v)) for v in s.embedding)])
    with open(root / "adaptation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speaker_id", "set_id", "utterance_id"])
        for spk in part.speaker_ids:
            for i, ids in enumerate(part.adaptation_sets.get(spk, [])):
                for uid in ids:
                    w.writerow([spk, f"s{i}", uid])
    return root


def load_partition(root, name):
    from .synth import CorpusPartition, SpeakerProfile, Utterance

    root = Path(root) / name
    _require(root / "manifest.csv")
    utterances = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            frames, labels = utterance_from_bytes(_require(root / row["file"]).read_bytes())
            utterances.append(Utterance(row["utterance_id"], row["speaker_id"], frames, labels))
    vectors = {}
    with open(_require(root / "speakers.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            vals = np.array([float(v) for v in row["values"].split()], dtype=np.float64)
            vectors.setdefault(row["speaker_id"], {})[row["kind"]] = vals
    speakers = [SpeakerProfile(sid, v["latent"], v["embedding"]) for sid, v in vectors.items()]
    sets = {}
    with open(_require(root / "adaptation.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            spk_sets = sets.setdefault(row["speaker_id"], {})
            spk_sets.setdefault(row["set_id"], []).append(row["utterance_id"])
    adaptation = {spk: [v[k] for k in sorted(v, key=lambda s: int(s[1:]))]
                  for spk, v in sets.items()}
    return CorpusPartition(name, speakers, utterances, adaptation)


# -- registry directories ---------------------------------------------------


def save_registry(registry, root) -> Path:
    root = Path(root)
    save_model(registry.global_model, root / "global.flam")
    entries = []
    for m in registry.models():
        p = registry.provenance[m.model_id]
        rel = f"clients/{p.speaker_id}__{p.set_id}.flam"
        save_model(m, root / rel)
        entries.append({"model_id": m.model_id, "parent_id": p.parent_id,
                        "speaker_id": p.speaker_id, "set_id": p.set_id,
                        "n_frames": p.n_frames, "file": rel})
    manifest = {"global": {"model_id": registry.global_model.model_id,
                           "parent_id": registry.global_model.parent_id,
                           "file": "global.flam"},
                "models": entries,
                "skipped": [list(s) for s in registry.skipped]}
    (root / "registry.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def load_registry(root):
    from .fl import ModelRegistry

    root = Path(root)
    manifest = json.loads(_require(root / "registry.json").read_text())
    registry = ModelRegistry(load_model(root / manifest["global"]["file"]))
    for e in manifest["models"]:
        registry.add(load_model(root / e["file"]), e["speaker_id"], e["set_id"], e["n_frames"])
    registry.skipped = [tuple(s) for s in manifest.get("skipped", [])]
    return registry


# -- CSV tables -------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_trials(trials, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "enroll_model", "test_model", "label"])
        for t in trials:
            w.writerow([t.trial_id, t.enroll_model_id, t.test_model_id, t.label])
    return path


def load_trials(path):
    from .asv import Trial

    with open(_require(path), newline="") as fh:
        return [Trial(r["trial_id"], r["enroll_model"], r["test_model"], r["label"])
                for r in csv.DictReader(fh)]


def save_scores(scored, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "enroll_model", "test_model", "label", "score"])
        for t, s in zip(scored.trials, scored.scores):
            w.writerow([t.trial_id, t.enroll_model_id, t.test_model_id, t.label, _fmt(s)])
    return path


def load_scores(path, metadata=None):
    from .asv import ScoredTrials, Trial

    trials, scores = [], []
    with open(_require(path), newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"trial_id", "enroll_model", "test_model", "label", "score"}
        if not need <= set(reader.fieldnames or ()):
            raise FormatError(f"{path}: scores CSV needs columns {sorted(need)}")
        for r in reader:
            trials.append(Trial(r["trial_id"], r["enroll_model"], r["test_model"], r["label"]))
            scores.append(float(r["score"]))
    return ScoredTrials(trials, np.array(scores), dict(metadata or {}))


def save_embeddings(embeddings, speakers, path) -> Path:
    """``embeddings``: list of Embedding; ``speakers``: model_id -> speaker_id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(embeddings[0].vector) if embeddings else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "speaker_id", "h"] + [f"v_{i}" for i in range(n)])
        for e in embeddings:
            w.writerow([e.model_id, speakers.get(e.model_id, ""), e.h]
                       + [_fmt(v) for v in e.vector])
    return path


def load_embeddings(path):
    from .attack_a2 import Embedding

    out, speakers = [], {}
    with open(_require(path), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            vec = np.array([float(v) for v in row[3:]], dtype=np.float64)
            out.append(Embedding(row[0], vec, int(row[2])))
            speakers[row[0]] = row[1]
    return out, speakers


def save_det(points, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "p_fa", "p_miss"])
        for p_fa, p_miss, theta in points:
            w.writerow([_fmt(theta), _fmt(p_fa), _fmt(p_miss)])
    return path


def load_det(path):
    with open(_require(path), newline="") as fh:
        return [(float(r["p_fa"]), float(r["p_miss"]), float(r["theta"]))
                for r in csv.DictReader(fh)]


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# -- A2 extractor -----------------------------------------------------------


def save_extractor(extractor, path) -> Path:
    """Network as FLAM plus a ``.json`` sidecar with topology, h and speakers."""
    path = Path(path)
    save_model(extractor.network, path)
    topo = extractor.topology
    meta = {"h": extractor.h, "speakers": list(extractor.speakers),
            "frame_layers": [[w, list(ctx)] for w, ctx in topo.frame_layers],
            "segment_layers": list(topo.segment_layers),
            "embedding_layer": topo.embedding_layer}
    write_json(meta, path.with_suffix(".json"))
    return path


def load_extractor(path):
    from .attack_a2 import ExtractorParams, ExtractorTopology

    path = Path(path)
    network = load_model(path)
    meta = json.loads(_require(path.with_suffix(".json")).read_text())
    topo = ExtractorTopology(
        frame_layers=tuple((int(w), tuple(ctx)) for w, ctx in meta["frame_layers"]),
        segment_layers=tuple(meta["segment_layers"]),
        embedding_layer=int(meta["embedding_layer"]))
    return ExtractorParams(network, topo, int(meta["h"]), tuple(meta["speakers"]))
