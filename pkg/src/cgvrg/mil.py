"""Weakly supervised multi-instance predicate detection over region pairs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .corpus import ImageRecord, Region, Triple, Vocabularies, image_triples, named_rng

log = logging.getLogger(__name__)

GEOMETRY_DIM = 14
PROB_EPS = 1e-7


def pair_geometry(box_i, box_j, width: float, height: float) -> np.ndarray:
    """Normalised corners of both boxes and their union, IoU and log area ratio."""
    for b in (box_i, box_j):
        if not (b[0] < b[2] and b[1] < b[3]):
            raise ValueError(f"degenerate box {b}")
    scale = np.array([width, height, width, height], dtype=np.float64)
    bi = np.asarray(box_i, dtype=np.float64)
    bj = np.asarray(box_j, dtype=np.float64)
    union = np.array([min(bi[0], bj[0]), min(bi[1], bj[1]), max(bi[2], bj[2]), max(bi[3], bj[3])])
    area_i = (bi[2] - bi[0]) * (bi[3] - bi[1])
    area_j = (bj[2] - bj[0]) * (bj[3] - bj[1])
    iw = max(0.0, min(bi[2], bj[2]) - max(bi[0], bj[0]))
    ih = max(0.0, min(bi[3], bj[3]) - max(bi[1], bj[1]))
    inter = iw * ih
    iou = inter / (area_i + area_j - inter)
    return np.concatenate([bi / scale, bj / scale, union / scale, [iou, math.log(area_i / area_j)]])


def pair_feature(region_i: Region, region_j: Region, width: float, height: float) -> np.ndarray:
    return np.concatenate([region_i.feature, region_j.feature,
                           pair_geometry(region_i.bbox, region_j.bbox, width, height)]).astype(np.float32)


def ordered_pairs(n: int) -> list[tuple[int, int]]:
    return [(u, v) for u in range(n) for v in range(n) if u != v]


def image_pair_features(image: ImageRecord) -> np.ndarray:
    pairs = ordered_pairs(len(image.regions))
    if not pairs:
        return np.zeros((0, 2 * image.regions[0].feature.shape[0] + GEOMETRY_DIM), dtype=np.float32)
    return np.stack([pair_feature(image.regions[u], image.regions[v], image.width, image.height)
                     for u, v in pairs])


class MilModel:
    """Pair feature -> ReLU hidden layer -> per-predicate sigmoid."""

    def __init__(self, input_dim: int, hidden: int, num_predicates: int, seed: int = 0,
                 params: Parameters | None = None):
        self.input_dim = input_dim
        self.hidden = hidden
        self.num_predicates = num_predicates
        if params is None:
            rng = named_rng(seed, "mil")
            params = Parameters()
            ad.add_linear(params, "mil/hidden", input_dim, hidden, rng)
            ad.add_linear(params, "mil/out", hidden, num_predicates, rng)
        self.params = params

    def meta(self) -> dict:
        return {"kind": "mil", "input_dim": self.input_dim, "hidden": self.hidden,
                "num_predicates": self.num_predicates}

    @classmethod
    def from_checkpoint(cls, params: Parameters, meta: dict) -> "MilModel":
        return cls(meta["input_dim"], meta["hidden"], meta["num_predicates"], params=params)

    def logits(self, feats) -> Tensor:
        x = ad.as_tensor(feats, self.params["mil/hidden/w"].dtype)
        if x.data.ndim == 1:
            x = Tensor(x.data[None, :])
        if x.shape[-1] != self.input_dim:
            raise ad.ShapeError(f"MIL model expects pair features of length {self.input_dim}, got {x.shape[-1]}")
        p = self.params
        h = ad.relu(ad.linear(x, p["mil/hidden/w"], p["mil/hidden/b"]))
        return ad.linear(h, p["mil/out/w"], p["mil/out/b"])

    def probabilities(self, feats) -> Tensor:
        return ad.sigmoid(self.logits(feats))


def predicate_scores(pf: np.ndarray, model: MilModel) -> np.ndarray:
    with ad.no_grad():
        return model.probabilities(pf).data[0]


# ---------------------------------------------------------------------------
# bags


@dataclass
class Bag:
    predicate_index: int
    members: list[int]
    positive: bool


@dataclass
class ImageBags:
    pairs: list[tuple[int, int]]
    positive: dict[int, Bag] = field(default_factory=dict)
    negative: dict[int, Bag] = field(default_factory=dict)
    dropped: int = 0

    def present(self) -> set[int]:
        return set(self.positive)


def build_bags(image: ImageRecord, triples: Sequence[Triple], vocab: Vocabularies) -> ImageBags:
    n = len(image.regions)
    if n < 2:
        raise ValueError(f"build_bags: image {image.image_id} has fewer than 2 regions")
    pairs = ordered_pairs(n)
    labels = [vocab.category_of(r.label) or r.label for r in image.regions]
    pos_members: dict[int, set[int]] = {}
    dropped = 0
    for t in triples:
        j = vocab.predicate_index.get(t.predicate)
        if j is None:
            continue
        members = {k for k, (u, v) in enumerate(pairs) if labels[u] == t.subject and labels[v] == t.object}
        if not members:
            dropped += 1
            continue
        pos_members.setdefault(j, set()).update(members)
    bags = ImageBags(pairs, dropped=dropped)
    everything = list(range(len(pairs)))
    for j in range(len(vocab.predicate_lexicon)):
        if j in pos_members:
            members = sorted(pos_members[j])
            bags.positive[j] = Bag(j, members, True)
            bags.negative[j] = Bag(j, [k for k in everything if k not in pos_members[j]], False)
        else:
            bags.negative[j] = Bag(j, everything, False)
    return bags


def noisy_or(instance_probs: Sequence[float]) -> float:
    probs = list(instance_probs)
    if not probs:
        raise ValueError("noisy_or: empty bag")
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"noisy_or: probability {p} outside [0, 1]")
    if any(p == 1.0 for p in probs):
        return 1.0
    out = -math.expm1(math.fsum(math.log1p(-p) for p in probs))
    # the exact value is never below the largest instance; keep rounding from breaking that
    return min(1.0, max(out, max(probs)))


def log_one_minus_bag(instance_probs: Tensor, membership: np.ndarray) -> Tensor:
    """log(1 - noisy_or) per predicate column, i.e. sum of log(1 - p) over members.

    ``instance_probs`` is (N, M); ``membership`` is a constant (N, M) 0/1 mask.
    """
    q = ad.log(ad.clamp(1.0 - instance_probs, PROB_EPS, 1.0 - PROB_EPS))
    ones = np.ones((1, membership.shape[0]), dtype=instance_probs.dtype)
    return ad.matmul(Tensor(ones), ad.elementwise_mul(q, Tensor(membership.astype(instance_probs.dtype))))


def noisy_or_tensor(instance_probs: Tensor, membership: np.ndarray | None = None) -> Tensor:
    if membership is None:
        membership = np.ones(instance_probs.shape, dtype=instance_probs.dtype)
    return 1.0 - ad.exp(log_one_minus_bag(instance_probs, membership))


def _bag_masks(bags: ImageBags, num_predicates: int):
    n_pairs = len(bags.pairs)
    pos = np.zeros((n_pairs, num_predicates))
    neg = np.zeros((n_pairs, num_predicates))
    pos_cols = np.zeros(num_predicates)
    neg_cols = np.zeros(num_predicates)
    for j, bag in bags.positive.items():
        pos[bag.members, j] = 1.0
        pos_cols[j] = 1.0
    for j, bag in bags.negative.items():
        if bag.members:
            neg[bag.members, j] = 1.0
            neg_cols[j] = 1.0
    return pos, neg, pos_cols, neg_cols


def mil_loss_from_bags(feats: np.ndarray, bags: ImageBags, model: MilModel) -> Tensor:
    """-sum_j [present: log p_pos + log(1 - p_neg); absent: log(1 - p_all)]."""
    m = model.num_predicates
    if m == 0:
        raise ValueError("mil_loss: empty predicate lexicon")
    probs = model.probabilities(feats)
    pos, neg, pos_cols, neg_cols = _bag_masks(bags, m)
    dtype = probs.dtype
    # negative (or all-pairs) bags: log(1 - p_bag) = sum log(1 - p)
    neg_term = ad.clamp(log_one_minus_bag(probs, neg), math.log(PROB_EPS), math.log1p(-PROB_EPS))
    loss = ad.matmul(neg_term, Tensor(neg_cols[:, None].astype(dtype)))
    if pos_cols.any():
        s_pos = log_one_minus_bag(probs, pos)
        p_pos = ad.clamp(1.0 - ad.exp(s_pos), PROB_EPS, 1.0 - PROB_EPS)
        loss = ad.add(loss, ad.matmul(ad.log(p_pos), Tensor(pos_cols[:, None].astype(dtype))))
    return ad.scalar_scale(ad.sum_all(loss), -1.0)


def mil_loss(image: ImageRecord, triples: Sequence[Triple], model: MilModel, vocab: Vocabularies) -> Tensor:
    if not image.regions:
        raise ValueError("mil_loss: image has no regions")
    bags = build_bags(image, triples, vocab)
    return mil_loss_from_bags(image_pair_features(image), bags, model)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class MilTrainResult:
    model: MilModel
    epoch_losses: list[float]
    dropped_triples: int
    bag_stats: dict[str, dict[str, int]]


def _prepare(corpus: Sequence[ImageRecord], vocab: Vocabularies):
    items = []
    for rec in corpus:
        if len(rec.regions) < 2:
            continue
        bags = build_bags(rec, image_triples(rec, vocab), vocab)
        items.append((rec, image_pair_features(rec), bags))
    return items


def train_mil(corpus: Sequence[ImageRecord], vocab: Vocabularies, epochs: int = 30, lr: float = 0.005,
              batch_size: int = 4, hidden: int = 64, seed: int = 0,
              model: MilModel | None = None) -> MilTrainResult:
    if not corpus:
        raise ValueError("train_mil: empty corpus")
    items = _prepare(corpus, vocab)
    dim = items[0][1].shape[1] if items else 2 * corpus[0].regions[0].feature.shape[0] + GEOMETRY_DIM
    if model is None:
        model = MilModel(dim, hidden, len(vocab.predicate_lexicon), seed=seed)
    rng = named_rng(seed, "mil/shuffle")
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        total = 0.0
        for start in range(0, len(order), batch_size):
            model.params.zero_grad()
            batch = [items[k] for k in order[start: start + batch_size]]
            loss = None
            for _, feats, bags in batch:
                term = mil_loss_from_bags(feats, bags, model)
                loss = term if loss is None else ad.add(loss, term)
            ad.backward(loss)
            ad.adam_step(model.params, lr)
            total += loss.item()
        losses.append(total / max(len(items), 1))
        log.info("mil epoch %d loss %.5f", epoch + 1, losses[-1])
    stats = {}
    for j, pred in enumerate(vocab.predicate_lexicon):
        stats[pred] = {
            "positive_bags": sum(1 for _, _, b in items if j in b.positive),
            "negative_bags": sum(1 for _, _, b in items if b.negative[j].members),
            "mean_positive_size": _mean([len(b.positive[j].members) for _, _, b in items if j in b.positive]),
        }
    return MilTrainResult(model, losses, sum(b.dropped for _, _, b in items), stats)


def _mean(xs):
    return float(np.mean(xs)) if xs else 0.0


def bag_scores(corpus: Sequence[ImageRecord], vocab: Vocabularies, model: MilModel):
    """Image-level noisy-OR score and presence label for every (image, predicate)."""
    scores, labels = [], []
    with ad.no_grad():
        for rec, feats, bags in _prepare(corpus, vocab):
            probs = model.probabilities(feats).data.astype(np.float64)
            for j in range(model.num_predicates):
                scores.append(noisy_or(probs[:, j].tolist()))
                labels.append(j in bags.positive)
    return np.asarray(scores), np.asarray(labels, dtype=bool)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive."""
    if not labels.any():
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / hits.sum())


def bag_average_precision(corpus, vocab, model) -> float:
    return average_precision(*bag_scores(corpus, vocab, model))
