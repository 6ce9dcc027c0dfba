"""On-disk artifacts: feature tables, triplet lists, score matrices, reports.

Formats
-------
features   ``id<TAB>category<TAB>v1,v2,...,vd`` (UTF-8 TSV)
triplets   JSON Lines, one :class:`TripletRecord` per line
scores     optional ``# key=value`` comment lines, a header row
           ``<TAB>g1<TAB>...<TAB>gg``, then ``query_id<TAB>s1<TAB>...<TAB>sg``
truth      ``query_id<TAB>target_id<TAB>category``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CATEGORIES = ("shirt", "dress", "toptee")
SPLITS = ("train", "val", "test")


class ParseError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class DuplicateIdError(ValueError):
    pass


class MissingIdError(ValueError):
    """A triplet or truth entry names an id the store does not hold."""


@dataclass(frozen=True)
class FeatureVector:
    id: str
    category: str
    values: np.ndarray


class FeatureStore:
    """Feature vectors keyed by item id, in insertion order."""

    def __init__(self, vectors: Iterable[FeatureVector] = ()):
        self._index: dict[str, int] = {}
        self._items: list[FeatureVector] = []
        self.dim: int | None = None
        for v in vectors:
            self.add(v)

    def add(self, vec: FeatureVector):
        values = np.asarray(vec.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise DimensionError(f"{vec.id}: feature must be a non-empty vector")
        if self.dim is not None and values.size != self.dim:
            raise DimensionError(f"{vec.id}: dimension {values.size}, store has {self.dim}")
        if vec.id in self._index:
            raise DuplicateIdError(f"duplicate id {vec.id!r}")
        if vec.category not in CATEGORIES:
            raise ParseError(f"{vec.id}: unknown category {vec.category!r}")
        if not np.all(np.isfinite(values)):
            raise ParseError(f"{vec.id}: non-finite value")
        self.dim = values.size
        self._index[vec.id] = len(self._items)
        self._items.append(FeatureVector(vec.id, vec.category, values))

    def __len__(self):
        return len(self._items)

    def __contains__(self, item_id):
        return item_id in self._index

    def __getitem__(self, item_id) -> FeatureVector:
        return self._items[self._index[item_id]]

    def __iter__(self):
        return iter(self._items)

    @property
    def ids(self) -> list[str]:
        return [v.id for v in self._items]

    def matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        missing = [i for i in ids if i not in self._index]
        if missing:
            raise MissingIdError(f"unknown feature ids: {missing[:5]}")
        if not ids:
            return np.zeros((0, self.dim or 0))
        return np.stack([self._items[self._index[i]].values for i in ids])

    def categories(self) -> dict[str, str]:
        return {v.id: v.category for v in self._items}

    def __eq__(self, other):
        if not isinstance(other, FeatureStore) or self.ids != other.ids:
            return False
        return all(a.category == b.category and np.array_equal(a.values, b.values)
                   for a, b in zip(self, other))


def load_feature_store(path) -> FeatureStore:
    store = FeatureStore()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            item_id, category, raw = parts
            try:
                values = np.array([float(v) for v in raw.split(",")])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad number in feature values") from None
            try:
                store.add(FeatureVector(item_id, category, values))
            except (ParseError, DimensionError, DuplicateIdError) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
    return store


def save_feature_store(store: FeatureStore, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in store:
            fh.write(f"{v.id}\t{v.category}\t{','.join(repr(float(x)) for x in v.values)}\n")


@dataclass(frozen=True)
class TripletRecord:
    candidate_id: str
    target_id: str
    captions: tuple[str, ...]
    category: str
    split: str
    qid: str = ""

    def __post_init__(self):
        if not self.captions:
            raise ParseError("triplet needs at least one caption")
        if self.category not in CATEGORIES:
            raise ParseError(f"unknown category {self.category!r}")
        if self.split not in SPLITS:
            raise ParseError(f"unknown split {self.split!r}")


def load_triplets(path) -> list[TripletRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = TripletRecord(
                    candidate_id=raw["candidate_id"], target_id=raw["target_id"],
                    captions=tuple(raw["captions"]), category=raw["category"],
                    split=raw["split"], qid=raw.get("qid") or f"q{lineno - 1:05d}")
            except (json.JSONDecodeError, KeyError, TypeError, ParseError) as exc:
                raise ParseError(f"{path}:{lineno}: bad triplet record ({exc})") from None
            records.append(rec)
    return records


def save_triplets(records: Iterable[TripletRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            d = asdict(r)
            d["captions"] = list(r.captions)
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def validate_triplets(records: Sequence[TripletRecord], store: FeatureStore):
    seen = set()
    for r in records:
        for item_id in (r.candidate_id, r.target_id):
            if item_id not in store:
                raise MissingIdError(f"triplet {r.qid}: unknown id {item_id!r}")
        if r.qid in seen:
            raise DuplicateIdError(f"duplicate query id {r.qid!r}")
        seen.add(r.qid)


@dataclass
class ScoreMatrix:
    query_ids: list[str]
    gallery_ids: list[str]
    values: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        q, g = len(self.query_ids), len(self.gallery_ids)
        if q < 1 or g < 1:
            raise DimensionError("score matrix needs q >= 1 and g >= 1")
        if self.values.shape != (q, g):
            raise DimensionError(f"values shape {self.values.shape} != ({q}, {g})")
        if np.isnan(self.values).any():
            raise ParseError("score matrix contains NaN")

    def __eq__(self, other):
        return (isinstance(other, ScoreMatrix) and self.query_ids == other.query_ids
                and self.gallery_ids == other.gallery_ids
                and np.array_equal(self.values, other.values))

    def aligned_with(self, other: "ScoreMatrix") -> bool:
        return self.query_ids == other.query_ids and self.gallery_ids == other.gallery_ids


def save_score_matrix(m: ScoreMatrix, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(m.meta):
            fh.write(f"# {key}={m.meta[key]}\n")
        fh.write("\t" + "\t".join(m.gallery_ids) + "\n")
        for qid, row in zip(m.query_ids, m.values):
            fh.write(qid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def load_score_matrix(path) -> ScoreMatrix:
    meta = {}
    header = None
    query_ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                meta[key] = value
                continue
            if not line:
                continue
            parts = line.split("\t")
            if header is None:
                if parts[0] != "":
                    raise ParseError(f"{path}:{lineno}: header must start with a tab")
                header = parts[1:]
                continue
            if len(parts) - 1 != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} scores, "
                                 f"got {len(parts) - 1}")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad number") from None
            query_ids.append(parts[0])
    if header is None:
        raise ParseError(f"{path}: missing header row")
    return ScoreMatrix(query_ids, header, np.array(rows).reshape(len(rows), len(header)), meta)


@dataclass(frozen=True)
class GroundTruth:
    target: dict[str, str]
    category: dict[str, str]

    @classmethod
    def from_triplets(cls, records: Iterable[TripletRecord]) -> "GroundTruth":
        records = list(records)
        return cls({r.qid: r.target_id for r in records},
                   {r.qid: r.category for r in records})

    def subset(self, qids: Iterable[str]) -> "GroundTruth":
        qids = list(qids)
        return GroundTruth({q: self.target[q] for q in qids},
                           {q: self.category[q] for q in qids})


def save_truth(truth: GroundTruth, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, target in truth.target.items():
            fh.write(f"{qid}\t{target}\t{truth.category[qid]}\n")


def load_truth(path) -> GroundTruth:
    target, category = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected query<TAB>target<TAB>category")
            if parts[2] not in CATEGORIES:
                raise ParseError(f"{path}:{lineno}: unknown category {parts[2]!r}")
            target[parts[0]] = parts[1]
            category[parts[0]] = parts[2]
    return GroundTruth(target, category)


@dataclass
class RecallReport:
    per_category: dict[str, tuple[float, float]]
    average: float
    ks: tuple[int, int] = (10, 50)

    def to_json(self) -> dict:
        k1, k2 = self.ks
        return {
            "categories": {c: {f"R@{k1}": r1, f"R@{k2}": r2}
                           for c, (r1, r2) in self.per_category.items()},
            "average": self.average,
        }

    def table(self) -> str:
        k1, k2 = self.ks
        lines = [f"{'category':<10}{'R@' + str(k1):>10}{'R@' + str(k2):>10}"]
        for c, (r1, r2) in self.per_category.items():
            lines.append(f"{c:<10}{r1:>10.2f}{r2:>10.2f}")
        lines.append(f"{'average':<10}{self.average:>20.2f}")
        return "\n".join(lines)


def write_json(obj: Mapping, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic composed-retrieval data
# ---------------------------------------------------------------------------

ATTRIBUTE_WORDS = (
    "white", "black", "red", "blue", "green", "yellow", "pink", "purple",
    "striped", "floral", "plaid", "dotted", "sleeveless", "longer", "shorter", "tighter",
    "looser", "darker", "lighter", "shiny", "graphic", "lace", "denim", "silk",
)
_ADD_TEMPLATES = ("is {}", "make it {}", "more {}", "{}")
_DROP_TEMPLATES = ("is not {}", "no {}", "not {}", "less {}")
FILLER_WORDS = ("is", "make", "it", "more", "no", "not", "less", "and")


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for :func:`synth_dataset`.

    Items come in families that share a random style vector; each family
    enumerates every subset of ``attrs_per_family`` attribute directions.
    A triplet pairs two members of one family and its captions name the
    attributes to add and to drop, so
    ``target = candidate + sum(+/- named directions) + noise``.
    """
    n_items: int = 100
    dim: int = 16
    n_attrs: int = 8
    n_triplets: int = 400
    noise: float = 0.01
    attrs_per_family: int = 4
    val_fraction: float = 0.2
    style_scale: float = 1.0
    attr_scale: float = 1.0
    typo_rate: float = 0.0
    ir_dim: int = 32

    def validate(self):
        if not 1 <= self.n_attrs <= len(ATTRIBUTE_WORDS):
            raise ValueError(f"n_attrs must be in [1, {len(ATTRIBUTE_WORDS)}]")
        if self.dim < self.n_attrs:
            raise ValueError("dim must be >= n_attrs")
        if not 1 <= self.attrs_per_family <= self.n_attrs:
            raise ValueError("attrs_per_family must be in [1, n_attrs]")
        if self.n_items < 2 or self.n_triplets < 1:
            raise ValueError("need n_items >= 2 and n_triplets >= 1")
        if self.noise < 0 or not 0 <= self.val_fraction < 1 or not 0 <= self.typo_rate <= 1:
            raise ValueError("noise >= 0, val_fraction in [0, 1), typo_rate in [0, 1]")
        if self.ir_dim < 1:
            raise ValueError("ir_dim must be >= 1")


@dataclass
class SynthDataset:
    features: FeatureStore
    ir_features: FeatureStore
    triplets: list[TripletRecord]
    word_counts: dict[str, int]
    directions: np.ndarray
    attributes: dict[str, frozenset[int]]

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_feature_store(self.features, out / "features.tsv")
        save_feature_store(self.ir_features, out / "ir_features.tsv")
        save_triplets(self.triplets, out / "triplets.jsonl")
        with open(out / "wordlist.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for w in sorted(self.word_counts):
                fh.write(f"{w}\t{self.word_counts[w]}\n")


def _typo(word, rng):
    if len(word) < 3:
        return word
    i = int(rng.integers(1, len(word) - 1))
    return word[:i] + word[i + 1] + word[i] + word[i + 2:]


def _captions(added, dropped, rng, typo_rate):
    phrases = []
    for a in added:
        phrases.append((_ADD_TEMPLATES, a))
    for a in dropped:
        phrases.append((_DROP_TEMPLATES, a))
    phrases = [phrases[i] for i in rng.permutation(len(phrases))]
    rendered = []
    for templates, attr in phrases:
        word = ATTRIBUTE_WORDS[attr]
        if typo_rate and rng.uniform() < typo_rate:
            word = _typo(word, rng)
        rendered.append(templates[int(rng.integers(len(templates)))].format(word))
    n_caps = 1 if len(rendered) == 1 else int(rng.integers(1, 3))
    cut = int(rng.integers(1, len(rendered))) if n_caps == 2 else len(rendered)
    parts = [rendered[:cut], rendered[cut:]] if n_caps == 2 else [rendered]
    return tuple(" and ".join(p) for p in parts)


def synth_dataset(seed: int, spec: SynthSpec = SynthSpec()) -> SynthDataset:
    spec.validate()
    rng = np.random.default_rng([int(seed), 0])
    dirs, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.n_attrs)))
    dirs = dirs.T * spec.attr_scale
    ir_map = rng.standard_normal((spec.ir_dim, spec.dim)) / np.sqrt(spec.dim)

    features, ir_features = FeatureStore(), FeatureStore()
    attributes: dict[str, frozenset[int]] = {}
    families: list[list[str]] = []
    family_size = 2 ** spec.attrs_per_family
    fam = 0
    while len(features) < spec.n_items:
        category = CATEGORIES[fam % len(CATEGORIES)]
        style = rng.standard_normal(spec.dim) * spec.style_scale
        pool = np.sort(rng.choice(spec.n_attrs, spec.attrs_per_family, replace=False))
        members = []
        for mask in range(family_size):
            if len(features) >= spec.n_items:
                break
            attrs = frozenset(int(pool[b]) for b in range(spec.attrs_per_family) if mask >> b & 1)
            x = style + sum((dirs[a] for a in sorted(attrs)), np.zeros(spec.dim))
            x = x + rng.uniform(-spec.noise, spec.noise, size=spec.dim)
            item_id = f"item{len(features):05d}"
            features.add(FeatureVector(item_id, category, x))
            ir_features.add(FeatureVector(item_id, category, np.tanh(ir_map @ x)))
            attributes[item_id] = attrs
            members.append(item_id)
        families.append(members)
        fam += 1

    pairs = [(c, t) for members in families for c in members for t in members if c != t]
    if spec.n_triplets > len(pairs):
        raise ValueError(f"n_triplets={spec.n_triplets} exceeds the {len(pairs)} distinct pairs")
    chosen = rng.choice(len(pairs), spec.n_triplets, replace=False)
    n_val = int(round(spec.val_fraction * spec.n_triplets))
    triplets = []
    for i, p in enumerate(chosen):
        c, t = pairs[p]
        added = sorted(attributes[t] - attributes[c])
        dropped = sorted(attributes[c] - attributes[t])
        caps = _captions(added, dropped, rng, spec.typo_rate)
        split = "val" if i >= spec.n_triplets - n_val else "train"
        triplets.append(TripletRecord(c, t, caps, features[c].category, split, f"q{i:05d}"))

    counts: dict[str, int] = {}
    for w in FILLER_WORDS + ATTRIBUTE_WORDS[:spec.n_attrs]:
        counts[w] = 1
    for r in triplets:
        for cap in r.captions:
            for w in cap.split():
                if w in counts:
                    counts[w] += 1
    return SynthDataset(features, ir_features, triplets, counts, dirs, attributes)
