"""Descriptor datasets: NDJSON I/O, class vocabulary, samplers, synthetic generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1
NORM_TOL = 1e-3


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class ViewObservation:
    view_id: int
    descriptor: np.ndarray
    visibility: float


@dataclass
class InstanceRecord:
    instance_id: int
    class_id: int
    point_count: int
    views: list

    def descriptor_matrix(self) -> np.ndarray:
        return np.stack([v.descriptor for v in self.views])


@dataclass
class ClassEntry:
    class_id: int
    name: str
    embedding: np.ndarray
    train_frequency: int = 0


@dataclass
class ClassVocabulary:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate class_id in vocabulary")

    def __len__(self):
        return len(self.entries)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([e.class_id for e in self.entries], dtype=np.int64)

    def embeddings(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])

    def frequencies(self) -> dict:
        return {e.class_id: e.train_frequency for e in self.entries}

    def embedding_of(self, class_id: int) -> np.ndarray:
        return self.entries[self.index_of(class_id)].embedding

    def index_of(self, class_id: int) -> int:
        lookup = getattr(self, "_lookup", None)
        if lookup is None or len(lookup) != len(self.entries):
            lookup = {e.class_id: i for i, e in enumerate(self.entries)}
            self._lookup = lookup
        try:
            return lookup[class_id]
        except KeyError:
            raise DataError(f"class_id {class_id} not in vocabulary") from None


# ---------------------------------------------------------------------------
# NDJSON


def _fmt(x) -> float:
    # 9 significant digits; shortest repr of the rounded float keeps lines compact
    return float(format(float(x), ".9g"))


def _vec(a) -> list:
    return [_fmt(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def _unit(vec, what: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not math.isfinite(norm) or abs(norm - 1.0) >= NORM_TOL:
        raise DataError(f"{what}: descriptor norm {norm:.6g} outside 1 ± {NORM_TOL}")
    return v / norm


def save_dataset(path, instances: Sequence[InstanceRecord], D: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({"schema_version": SCHEMA_VERSION, "D": int(D)}) + "\n")
        for inst in sorted(instances, key=lambda r: r.instance_id):
            fh.write(_dumps({
                "instance_id": int(inst.instance_id),
                "class_id": int(inst.class_id),
                "point_count": int(inst.point_count),
                "views": [{"view_id": int(v.view_id), "visibility": _fmt(v.visibility),
                           "descriptor": _vec(v.descriptor)} for v in inst.views],
            }) + "\n")


def save_vocabulary(path, vocab: ClassVocabulary) -> None:
    D = len(vocab.entries[0].embedding) if vocab.entries else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({"schema_version": SCHEMA_VERSION, "D": D}) + "\n")
        for e in sorted(vocab.entries, key=lambda e: e.class_id):
            fh.write(_dumps({"class_id": int(e.class_id), "name": e.name,
                             "frequency": int(e.train_frequency),
                             "embedding": _vec(e.embedding)}) + "\n")


def _read_ndjson(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def _header(lineno, obj, path) -> int:
    if lineno != 1 or "schema_version" not in obj:
        raise DataError(f"{path}:{lineno}: expected header with schema_version")
    if obj["schema_version"] != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {obj['schema_version']}")
    return int(obj["D"])


def load_vocabulary(path) -> ClassVocabulary:
    entries = []
    D = None
    for lineno, obj in _read_ndjson(path):
        if D is None:
            D = _header(lineno, obj, path)
            continue
        try:
            emb = _unit(obj["embedding"], f"{path}:{lineno} class {obj['class_id']}")
            if D and emb.shape != (D,):
                raise DataError(f"{path}:{lineno}: embedding length {emb.size} != D={D}")
            entries.append(ClassEntry(int(obj["class_id"]), str(obj["name"]), emb,
                                      int(obj.get("frequency", 0))))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: missing or bad field {exc}") from None
    return ClassVocabulary(entries)


def load_instances(path) -> tuple:
    """Returns ``(instances sorted by instance_id, D)``."""
    instances = []
    D = None
    for lineno, obj in _read_ndjson(path):
        if D is None:
            D = _header(lineno, obj, path)
            continue
        try:
            iid = int(obj["instance_id"])
            views = []
            for v in obj["views"]:
                desc = _unit(v["descriptor"], f"{path}:{lineno} instance {iid} view {v['view_id']}")
                if desc.shape != (D,):
                    raise DataError(f"{path}:{lineno}: descriptor length {desc.size} != D={D}")
                vis = float(v["visibility"])
                if vis < 0:
                    raise DataError(f"{path}:{lineno}: negative visibility")
                views.append(ViewObservation(int(v["view_id"]), desc, vis))
            rec = InstanceRecord(iid, int(obj["class_id"]), int(obj["point_count"]), views)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}:{lineno}: missing or bad field {exc}") from None
        if not views:
            raise DataError(f"{path}:{lineno}: instance {iid} has no views")
        if rec.point_count < 1:
            raise DataError(f"{path}:{lineno}: point_count must be >= 1")
        if len({v.view_id for v in views}) != len(views):
            raise DataError(f"{path}:{lineno}: duplicate view_id in instance {iid}")
        instances.append(rec)
    if D is None:
        raise DataError(f"{path}: empty file (no header)")
    instances.sort(key=lambda r: r.instance_id)
    return instances, D


def load_dataset(path, vocab_path) -> tuple:
    """``(instances, vocabulary)``; checks descriptor and embedding dimensions agree."""
    instances, D = load_instances(path)
    vocab = load_vocabulary(vocab_path)
    if vocab.entries and vocab.embeddings().shape[1] != D:
        raise DataError(f"vocabulary dim {vocab.embeddings().shape[1]} != dataset D={D}")
    return instances, vocab


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 512
    views_in: int = 5
    views_target: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.views_in < 1 or self.views_target < 0:
            raise ValueError("batch_size >= 1, views_in >= 1, views_target >= 0 required")


@dataclass
class Batch:
    instance_index: np.ndarray  # (B,) positions in the instance list
    class_ids: np.ndarray       # (B,)
    inputs: np.ndarray          # (B, n, D)
    unseen: np.ndarray          # (B*m, D)
    unseen_owner: np.ndarray    # (B*m,)
    input_views: np.ndarray     # (B, n) positions within each instance's view list
    target_views: np.ndarray    # (B, m)


def instance_weights(instances, vocab: ClassVocabulary) -> np.ndarray:
    """1 / train_frequency of each instance's class (unnormalized)."""
    freqs = vocab.frequencies()
    w = np.empty(len(instances))
    for k, inst in enumerate(instances):
        f = freqs.get(inst.class_id)
        if f is None:
            raise DataError(f"class {inst.class_id} missing from vocabulary")
        if f < 1:
            raise DataError(f"class {inst.class_id} has train_frequency {f}; need >= 1")
        w[k] = 1.0 / f
    return w


def uniform_weights(instances) -> np.ndarray:
    return np.ones(len(instances))


def sample_batch(instances, weights, cfg: SamplerConfig, rng: np.random.Generator,
                 matrices=None) -> Batch:
    """Draw ``batch_size`` instances with replacement, then n input + m target views each.

    ``matrices`` optionally caches each instance's descriptor matrix.
    """
    if not instances:
        raise DataError("cannot sample from an empty dataset")
    p = np.asarray(weights, dtype=np.float64)
    p = p / p.sum()
    idx = rng.choice(len(instances), size=cfg.batch_size, replace=True, p=p)
    n, m = cfg.views_in, cfg.views_target
    k = n + m
    picks = np.empty((cfg.batch_size, k), dtype=np.int64)
    for r, i in enumerate(idx):
        nv = len(instances[i].views)
        picks[r] = rng.choice(nv, size=k, replace=nv < k)
    mats = matrices if matrices is not None else [inst.descriptor_matrix() for inst in instances]
    D = mats[idx[0]].shape[1]
    views = np.empty((cfg.batch_size, k, D))
    for r, i in enumerate(idx):
        views[r] = mats[i][picks[r]]
    return Batch(
        instance_index=idx,
        class_ids=np.array([instances[i].class_id for i in idx], dtype=np.int64),
        inputs=views[:, :n],
        unseen=views[:, n:].reshape(-1, D),
        unseen_owner=np.repeat(np.arange(cfg.batch_size), m),
        input_views=picks[:, :n],
        target_views=picks[:, n:],
    )


def select_eval_views(instance: InstanceRecord, k: int = 5) -> list:
    """Top-``k`` views by visibility (descending), ties by ascending view_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = sorted(instance.views, key=lambda v: (-v.visibility, v.view_id))
    return order[:k]


# ---------------------------------------------------------------------------
# synthetic complementary-views generator


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 20
    instances_per_class: object = 100  # int, or one count per class
    views_per_instance: int = 12
    D: int = 256
    parts_per_class: int = 4
    noise_std: float = 0.3
    distractor_strength: float = 0.5
    seed: int = 0

    def class_counts(self) -> list:
        ipc = self.instances_per_class
        if isinstance(ipc, (int, np.integer)):
            return [int(ipc)] * self.num_classes
        counts = [int(c) for c in ipc]
        if len(counts) != self.num_classes:
            raise ValueError("instances_per_class list must have num_classes entries")
        return counts


@dataclass
class SyntheticData:
    instances: list
    vocab: ClassVocabulary
    parts: np.ndarray       # (C, P, D) orthonormal part directions
    distractor: np.ndarray  # (D,)
    D: int


def gen_synthetic(cfg: SynthConfig) -> SyntheticData:
    """Instances whose views each show one of their class's parts.

    Per view: ``normalize(part_r + distractor_strength·g + noise_std·ε)``
    with ``ε ~ N(0, I_D)``, ``r`` cycling over the class's parts from a
    random per-instance offset, and ``g`` one unit distractor shared by
    every class. ``g`` is the embedding of class 0 (think of a wall or floor
    leaking into every crop), so plain averaging drifts toward that class
    while a fusion that learns to discount ``g`` does not.
    """
    C, P, D = cfg.num_classes, cfg.parts_per_class, cfg.D
    if P < 1 or C < 1:
        raise ValueError("need num_classes >= 1 and parts_per_class >= 1")
    if D < P * C:
        raise ValueError(
            f"D={D} cannot hold {C}·{P} orthonormal parts (need D >= {P * C})")
    counts = cfg.class_counts()
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    basis, _ = np.linalg.qr(rng.standard_normal((D, C * P)))
    parts = basis.T.reshape(C, P, D)
    protos = parts.sum(axis=1)
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    g = protos[0].copy()

    instances = []
    iid = 0
    for c in range(C):
        for _ in range(counts[c]):
            offset = int(rng.integers(P))
            noise = rng.standard_normal((cfg.views_per_instance, D))
            vis = rng.uniform(0.0, 1.0, size=cfg.views_per_instance)
            points = int(rng.integers(50, 500))
            views = []
            for v in range(cfg.views_per_instance):
                d = parts[c, (offset + v) % P] + cfg.distractor_strength * g + cfg.noise_std * noise[v]
                views.append(ViewObservation(v, d / np.linalg.norm(d), float(vis[v])))
            instances.append(InstanceRecord(iid, c, points, views))
            iid += 1
    vocab = ClassVocabulary([
        ClassEntry(c, f"class_{c:03d}", protos[c].copy(), counts[c]) for c in range(C)])
    return SyntheticData(instances, vocab, parts, g, D)


def oracle_prototype_predict(view_sets, parts: np.ndarray) -> np.ndarray:
    """Classify with knowledge of the generator: energy of the views in each class's part subspace."""
    preds = np.empty(len(view_sets), dtype=np.int64)
    for k, views in enumerate(view_sets):
        proj = np.einsum("vd,cpd->cvp", np.asarray(views), parts)
        preds[k] = int(np.argmax((proj ** 2).sum(axis=(1, 2))))
    return preds


def split_instances(instances, test_fraction: float, seed: int) -> tuple:
    """Stratified per-class split -> ``(train, test)``, both sorted by instance_id."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng([seed, 0x5B17])
    by_class: dict = {}
    for inst in instances:
        by_class.setdefault(inst.class_id, []).append(inst)
    train, test = [], []
    for c in sorted(by_class):
        members = by_class[c]
        k = int(round(test_fraction * len(members)))
        chosen = set(rng.choice(len(members), size=k, replace=False).tolist()) if k else set()
        for j, inst in enumerate(members):
            (test if j in chosen else train).append(inst)
    return sorted(train, key=lambda r: r.instance_id), sorted(test, key=lambda r: r.instance_id)


def with_frequencies(vocab: ClassVocabulary, instances) -> ClassVocabulary:
    """Copy of ``vocab`` whose train_frequency counts ``instances``."""
    counts: dict = {}
    for inst in instances:
        counts[inst.class_id] = counts.get(inst.class_id, 0) + 1
    return ClassVocabulary([ClassEntry(e.class_id, e.name, e.embedding, counts.get(e.class_id, 0))
                            for e in vocab.entries])
