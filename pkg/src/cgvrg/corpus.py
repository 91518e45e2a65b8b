"""Corpus loading, vocabularies, caption triple extraction, tagging, toy data."""
from __future__ import annotations

import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
TAGS = ("none", "predicate", "object")
TAG_NONE, TAG_PREDICATE, TAG_OBJECT = 0, 1, 2

# tokens dropped when a candidate predicate is read off the span between two objects
_SPAN_STOPWORDS = frozenset(
    "a an the some two three four several many its his her their this that these those and".split()
)
_VOWELS = set("aeiou")

MAX_REGIONS = 100


class CorpusError(ValueError):
    pass


@dataclass
class Region:
    bbox: tuple[float, float, float, float]
    label: str
    feature: np.ndarray


@dataclass
class ImageRecord:
    image_id: str
    width: float
    height: float
    regions: list[Region]
    captions: list[list[str]]

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "regions": [
                {"bbox": list(r.bbox), "label": r.label, "feature": [float(v) for v in r.feature]}
                for r in self.regions
            ],
            "captions": [" ".join(c) for c in self.captions],
        }


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str
    source_caption_index: int = 0


def tokenize(sentence: str) -> list[str]:
    return sentence.lower().split()


# ---------------------------------------------------------------------------
# loading


def _fail(index: int, field_name: str, msg: str):
    raise CorpusError(f"record {index}: field {field_name!r}: {msg}")


def parse_record(obj: dict, index: int = 0, max_regions: int = MAX_REGIONS) -> ImageRecord:
    for key in ("image_id", "width", "height", "regions", "captions"):
        if key not in obj:
            _fail(index, key, "missing")
    width, height = obj["width"], obj["height"]
    if not isinstance(width, (int, float)) or not isinstance(height, (int, float)) or width <= 0 or height <= 0:
        _fail(index, "width/height", "must be positive numbers")
    raw_regions = obj["regions"]
    if not isinstance(raw_regions, list) or not 1 <= len(raw_regions) <= max_regions:
        _fail(index, "regions", f"need between 1 and {max_regions} regions")
    regions = []
    for k, r in enumerate(raw_regions):
        bbox = r.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            _fail(index, f"regions[{k}].bbox", "need 4 numbers")
        x1, y1, x2, y2 = (float(v) for v in bbox)
        if not (x1 < x2 and y1 < y2):
            _fail(index, f"regions[{k}].bbox", f"degenerate box {bbox}")
        if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
            _fail(index, f"regions[{k}].bbox", f"box {bbox} outside {width}x{height} image")
        label = r.get("label")
        if not isinstance(label, str) or not label:
            _fail(index, f"regions[{k}].label", "must be a non-empty string")
        feat = r.get("feature")
        if not isinstance(feat, list) or not feat:
            _fail(index, f"regions[{k}].feature", "must be a non-empty list of numbers")
        regions.append(Region((x1, y1, x2, y2), label.lower(), np.asarray(feat, dtype=np.float32)))
    caps = obj["captions"]
    if not isinstance(caps, list) or not caps:
        _fail(index, "captions", "need at least one caption")
    captions = []
    for k, c in enumerate(caps):
        toks = tokenize(c) if isinstance(c, str) else [str(t).lower() for t in c]
        if not toks:
            _fail(index, f"captions[{k}]", "empty caption")
        captions.append(toks)
    return ImageRecord(str(obj["image_id"]), width, height, regions, captions)


def load_corpus(path: str | Path, max_regions: int = MAX_REGIONS) -> list[ImageRecord]:
    records = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(l for l in fh if l.strip()):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"record {index}: invalid JSON: {exc}") from None
            rec = parse_record(obj, index, max_regions)
            for k, r in enumerate(rec.regions):
                if dim is None:
                    dim = r.feature.shape[0]
                elif r.feature.shape[0] != dim:
                    raise CorpusError(
                        f"record {index}: field 'regions[{k}].feature': feature dimension "
                        f"inconsistency ({r.feature.shape[0]} vs {dim})"
                    )
            records.append(rec)
    return records


def write_corpus(records: Iterable[ImageRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# vocabularies


def normalize_token(token: str) -> str:
    """Crude verb-suffix stripping used as a matching key ("feeding" -> "feed")."""
    t = token
    for suffix in ("ing", "ed"):
        if t.endswith(suffix) and len(t) - len(suffix) >= 3:
            t = t[: -len(suffix)]
            if len(t) >= 3 and t[-1] == t[-2] and t[-1] not in _VOWELS and t[-1] not in "lsz":
                t = t[:-1]
            break
    else:
        if t.endswith("s") and len(t) > 3 and not t.endswith(("ss", "us", "is")):
            t = t[:-1]
    if t.endswith("e") and len(t) > 3 and not t.endswith("ee"):
        t = t[:-1]
    return t


def _key(tokens: Sequence[str]) -> tuple[str, ...]:
    return tuple(normalize_token(t) for t in tokens)


@dataclass
class Vocabularies:
    words: list[str]
    object_categories: list[str]
    predicate_lexicon: list[str]
    synonyms: dict[str, str] = field(default_factory=dict)
    tags: tuple[str, ...] = TAGS

    def __post_init__(self):
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.category_index = {c: i for i, c in enumerate(self.object_categories)}
        self.predicate_index = {p: i for i, p in enumerate(self.predicate_lexicon)}
        # longest entries first so the first hit at a position is the maximal match
        self._lexicon_keys = sorted(
            ((_key(p.split()), p) for p in self.predicate_lexicon), key=lambda kp: (-len(kp[0]), kp[1])
        )

    @property
    def pad(self) -> int:
        return self.word_index[PAD]

    @property
    def bos(self) -> int:
        return self.word_index[BOS]

    @property
    def eos(self) -> int:
        return self.word_index[EOS]

    @property
    def unk(self) -> int:
        return self.word_index[UNK]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.word_index.get(t, self.unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def category_of(self, token: str) -> str | None:
        if token in self.category_index:
            return token
        return self.synonyms.get(token)

    def match_predicate(self, tokens: Sequence[str], start: int, stop: int | None = None) -> tuple[str, int] | None:
        """Longest lexicon entry starting at ``start`` and ending before ``stop``."""
        stop = len(tokens) if stop is None else stop
        for key, pred in self._lexicon_keys:
            end = start + len(key)
            if end <= stop and _key(tokens[start:end]) == key:
                return pred, end
        return None

    def to_json(self) -> dict:
        return {
            "word_vocab": [[i, w] for i, w in enumerate(self.words)],
            "object_categories": [[i, c] for i, c in enumerate(self.object_categories)],
            "predicate_lexicon": [[i, p] for i, p in enumerate(self.predicate_lexicon)],
            "tag_vocab": [[i, t] for i, t in enumerate(self.tags)],
            "synonyms": dict(sorted(self.synonyms.items())),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabularies":
        def ordered(entries):
            out = [None] * len(entries)
            for i, v in entries:
                out[i] = v
            return out

        return cls(
            words=ordered(obj["word_vocab"]),
            object_categories=ordered(obj["object_categories"]),
            predicate_lexicon=ordered(obj["predicate_lexicon"]),
            synonyms=dict(obj.get("synonyms", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabularies":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _object_mentions(caption: Sequence[str], vocab: Vocabularies) -> list[tuple[int, str]]:
    return [(i, c) for i, t in enumerate(caption) if (c := vocab.category_of(t)) is not None]


def _span_matches(caption: Sequence[str], start: int, stop: int, vocab: Vocabularies) -> list[tuple[str, int, int]]:
    """Greedy left-to-right maximal lexicon matches inside [start, stop)."""
    out = []
    i = start
    while i < stop:
        hit = vocab.match_predicate(caption, i, stop)
        if hit is None:
            i += 1
        else:
            out.append((hit[0], i, hit[1]))
            i = hit[1]
    return out


def extract_triples(caption: Sequence[str], vocab: Vocabularies, caption_index: int = 0) -> list[Triple]:
    """Lexicon-pattern triple extraction between adjacent object mentions.

    A predicate whose first surface token is a participle ("feeding",
    "flying over") attaches to the clause head: if the left object was itself
    reached through a prepositional triple, the subject is that triple's head.
    """
    mentions = _object_mentions(caption, vocab)
    head_of: dict[int, str] = {}
    triples: list[Triple] = []
    seen = set()
    for (i, a), (j, b) in zip(mentions, mentions[1:]):
        head_of.setdefault(i, a)
        matches = _span_matches(caption, i + 1, j, vocab)
        if len(matches) != 1:
            continue
        pred, start, _ = matches[0]
        participle = caption[start].endswith("ing")
        subject = head_of[i] if participle else a
        if not participle:
            head_of[j] = head_of[i]
        key = (subject, pred, b)
        if key not in seen:
            seen.add(key)
            triples.append(Triple(subject, pred, b, caption_index))
    return triples


def label_tags(caption: Sequence[str], vocab: Vocabularies) -> list[str]:
    tags = ["none"] * len(caption)
    for pred, start, end in _span_matches(caption, 0, len(caption), vocab):
        for k in range(start, end):
            tags[k] = "predicate"
    for i, _ in _object_mentions(caption, vocab):
        tags[i] = "object"
    return tags


def _candidate_predicates(caption: Sequence[str], vocab: Vocabularies) -> list[str]:
    mentions = _object_mentions(caption, vocab)
    out = []
    for (i, _), (j, _) in zip(mentions, mentions[1:]):
        span = [t for t in caption[i + 1: j] if t not in _SPAN_STOPWORDS]
        if span:
            out.append(" ".join(span))
    return out


def build_vocabularies(corpus: Sequence[ImageRecord], predicate_cap: int = 200, min_word_freq: int = 1,
                       synonyms: dict[str, str] | None = None,
                       candidate_predicates: Sequence[str] | None = None) -> Vocabularies:
    """Word vocabulary, categories (region labels) and the top-M predicate lexicon.

    Without an explicit candidate list, candidates are the determiner-stripped
    spans between adjacent object mentions. The lexicon keeps the M candidates
    that occur most often in extracted triples, ties broken lexicographically.
    """
    if not corpus:
        raise CorpusError("build_vocabularies: empty corpus")
    synonyms = dict(synonyms or {})
    categories = sorted({r.label for rec in corpus for r in rec.regions} | set(synonyms.values()))
    word_counts = Counter(t for rec in corpus for cap in rec.captions for t in cap)
    words = list(SPECIALS) + sorted(w for w, n in word_counts.items() if n >= min_word_freq and w not in SPECIALS)

    probe = Vocabularies(words, categories, [], synonyms)
    if candidate_predicates is None:
        surface = Counter(p for rec in corpus for cap in rec.captions for p in _candidate_predicates(cap, probe))
        # one representative surface form per normalised key
        by_key: dict[tuple[str, ...], str] = {}
        for p, n in sorted(surface.items(), key=lambda kv: (-kv[1], kv[0])):
            by_key.setdefault(_key(p.split()), p)
        candidate_predicates = sorted(by_key.values())
    probe = Vocabularies(words, categories, sorted(set(candidate_predicates)), synonyms)

    pred_counts = Counter(
        t.predicate for rec in corpus for k, cap in enumerate(rec.captions) for t in extract_triples(cap, probe, k)
    )
    ranked = sorted(pred_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    lexicon = [p for p, _ in ranked[:predicate_cap]]
    return Vocabularies(words, categories, lexicon, synonyms)


def image_triples(rec: ImageRecord, vocab: Vocabularies) -> list[Triple]:
    out, seen = [], set()
    for k, cap in enumerate(rec.captions):
        for t in extract_triples(cap, vocab, k):
            if (t.subject, t.predicate, t.object) not in seen:
                seen.add((t.subject, t.predicate, t.object))
                out.append(t)
    return out


# ---------------------------------------------------------------------------
# synthetic toy corpus

TOY_CATEGORIES = ("cat", "dog", "table", "chair", "cup", "book", "bird", "lamp", "box", "plant", "bowl", "vase")
IMAGE_SIZE = 100


def _overlap(a0, a1, b0, b1) -> float:
    return min(a1, b1) - max(a0, b0)


def _rel_on(s, o):
    return _overlap(s[0], s[2], o[0], o[2]) > 0 and abs(s[3] - o[1]) <= 2 and s[1] < o[1]


def _rel_left_of(s, o):
    min_h = min(s[3] - s[1], o[3] - o[1])
    return o[0] - s[2] >= 5 and _overlap(s[1], s[3], o[1], o[3]) >= 0.5 * min_h


def _rel_in(s, o):
    return s[0] > o[0] and s[1] > o[1] and s[2] < o[2] and s[3] < o[3]


def _rel_flying_over(s, o):
    return _overlap(s[0], s[2], o[0], o[2]) > 0 and o[1] - s[3] >= 10


def _place_on(rng):
    ox1 = rng.integers(5, 45)
    ow = rng.integers(25, 45)
    oy1 = rng.integers(30, 45)
    oh = rng.integers(12, 20)
    sw = rng.integers(8, ow)
    sx1 = ox1 + rng.integers(0, ow - sw + 1)
    sh = rng.integers(10, 22)
    s = (sx1, oy1 - sh, sx1 + sw, oy1)
    return s, (ox1, oy1, ox1 + ow, oy1 + oh)


def _place_left_of(rng):
    y1 = rng.integers(5, 30)
    sw, ow = rng.integers(12, 30), rng.integers(12, 30)
    sx1 = rng.integers(2, 20)
    gap = rng.integers(8, 20)
    ox1 = sx1 + sw + gap
    sh, oh = rng.integers(18, 30), rng.integers(18, 30)
    oy1 = y1 + rng.integers(-4, 5)
    return (sx1, y1, sx1 + sw, y1 + sh), (ox1, max(oy1, 1), ox1 + ow, max(oy1, 1) + oh)


def _place_in(rng):
    ox1, oy1 = rng.integers(5, 30), rng.integers(5, 15)
    ow, oh = rng.integers(35, 60), rng.integers(35, 48)
    sw, sh = rng.integers(8, ow // 2), rng.integers(8, oh // 2)
    sx1 = ox1 + rng.integers(3, ow - sw - 2)
    sy1 = oy1 + rng.integers(3, oh - sh - 2)
    return (sx1, sy1, sx1 + sw, sy1 + sh), (ox1, oy1, ox1 + ow, oy1 + oh)


def _place_flying_over(rng):
    ox1, ow = rng.integers(5, 40), rng.integers(25, 50)
    oy1, oh = rng.integers(40, 50), rng.integers(10, 16)
    sw, sh = rng.integers(8, 20), rng.integers(8, 14)
    sx1 = ox1 + rng.integers(0, ow - sw + 1)
    sy2 = oy1 - rng.integers(12, 20)
    return (sx1, sy2 - sh, sx1 + sw, sy2), (ox1, oy1, ox1 + ow, oy1 + oh)


# (surface phrase, geometry rule, placement sampler)
TOY_PREDICATES = (
    ("on", _rel_on, _place_on),
    ("left of", _rel_left_of, _place_left_of),
    ("in", _rel_in, _place_in),
    ("flying over", _rel_flying_over, _place_flying_over),
)


def relations_between(s, o, num_predicates: int) -> list[str]:
    return [name for name, rule, _ in TOY_PREDICATES[:num_predicates] if rule(s, o)]


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible substream of the pipeline seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def category_prototypes(seed: int, num_categories: int, feature_dim: int) -> np.ndarray:
    rng = named_rng(seed, "toygen/prototypes")
    return np.round(rng.standard_normal((num_categories, feature_dim)), 6)


def generate_toy_records(seed: int, num_images: int = 20, num_categories: int = 6, num_predicates: int = 3,
                         feature_dim: int = 32, noise: float = 0.1,
                         categories: Sequence[str] | None = None) -> list[ImageRecord]:
    """Images with one verbalised geometric triple plus an optional distractor region."""
    if num_categories < 2 or num_predicates < 1 or num_images < 1 or feature_dim < 1 or noise < 0:
        raise ValueError("invalid toy corpus parameters")
    if num_predicates > len(TOY_PREDICATES):
        raise ValueError(f"at most {len(TOY_PREDICATES)} toy predicates are defined")
    names = list(categories or TOY_CATEGORIES)[:num_categories]
    if len(names) < num_categories:
        raise ValueError(f"only {len(names)} category names available")
    protos = category_prototypes(seed, num_categories, feature_dim)
    rng = named_rng(seed, "toygen")
    records = []
    for n in range(num_images):
        while True:
            p = int(rng.integers(num_predicates))
            s_cat, o_cat = (int(c) for c in rng.choice(num_categories, size=2, replace=False))
            s_box, o_box = TOY_PREDICATES[p][2](rng)
            boxes = [(s_cat, tuple(int(v) for v in s_box)), (o_cat, tuple(int(v) for v in o_box))]
            if rng.random() < 0.5:
                dw, dh = int(rng.integers(8, 20)), int(rng.integers(8, 14))
                dx1 = int(rng.integers(0, IMAGE_SIZE - dw))
                dy1 = int(rng.integers(82, IMAGE_SIZE - dh + 1))
                boxes.append((int(rng.integers(num_categories)), (dx1, dy1, dx1 + dw, dy1 + dh)))
            rels = [
                (a, name, b)
                for a in range(len(boxes)) for b in range(len(boxes)) if a != b
                for name in relations_between(boxes[a][1], boxes[b][1], num_predicates)
            ]
            in_bounds = all(0 <= b[0] < b[2] <= IMAGE_SIZE and 0 <= b[1] < b[3] <= IMAGE_SIZE for _, b in boxes)
            if in_bounds and rels == [(0, TOY_PREDICATES[p][0], 1)]:
                break
        order = rng.permutation(len(boxes))
        regions = []
        for k in order:
            cat, box = boxes[k]
            feat = protos[cat] + (noise * rng.standard_normal(feature_dim) if noise > 0 else 0.0)
            regions.append(Region(box, names[cat], np.round(feat, 6)))
        caption = f"a {names[s_cat]} {TOY_PREDICATES[p][0]} a {names[o_cat]}".split()
        records.append(ImageRecord(f"toy{n:04d}", IMAGE_SIZE, IMAGE_SIZE, regions, [caption]))
    return records


def generate_toy_corpus(path: str | Path, seed: int, num_images: int = 20, num_categories: int = 6,
                        num_predicates: int = 3, feature_dim: int = 32, noise: float = 0.1) -> Path:
    records = generate_toy_records(seed, num_images, num_categories, num_predicates, feature_dim, noise)
    write_corpus(records, path)
    return Path(path)
