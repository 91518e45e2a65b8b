"""Caption-guided relationship graph: construction from MIL scores and GCN encoding."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .corpus import ImageRecord, Vocabularies
from .mil import MilModel, image_pair_features, ordered_pairs


@dataclass(frozen=True)
class PredicateNode:
    head: int
    predicate: int
    tail: int
    prob: float


@dataclass
class CgvrgGraph:
    image_id: str
    object_labels: list[str]
    object_features: np.ndarray
    predicate_nodes: list[PredicateNode] = field(default_factory=list)

    @property
    def num_objects(self) -> int:
        return len(self.object_labels)

    def out_edges(self, i: int) -> list[int]:
        return [k for k, r in enumerate(self.predicate_nodes) if r.head == i]

    def in_edges(self, i: int) -> list[int]:
        return [k for k, r in enumerate(self.predicate_nodes) if r.tail == i]

    def to_json(self, vocab: Vocabularies | None = None) -> dict:
        nodes = []
        for k, r in enumerate(self.predicate_nodes):
            entry = {"head": r.head, "predicate": r.predicate, "tail": r.tail, "prob": round(r.prob, 6)}
            if vocab is not None:
                entry["predicate_label"] = vocab.predicate_lexicon[r.predicate]
            nodes.append(entry)
        return {
            "image_id": self.image_id,
            "objects": [{"index": i, "label": l} for i, l in enumerate(self.object_labels)],
            "predicates": nodes,
            "edges": [[f"o{r.head}", f"r{k}"] for k, r in enumerate(self.predicate_nodes)]
            + [[f"r{k}", f"o{r.tail}"] for k, r in enumerate(self.predicate_nodes)],
        }

    @classmethod
    def from_json(cls, obj: dict, image: ImageRecord) -> "CgvrgGraph":
        labels = [o["label"] for o in obj["objects"]]
        feats = np.stack([r.feature for r in image.regions])
        nodes = [PredicateNode(p["head"], p["predicate"], p["tail"], p["prob"]) for p in obj["predicates"]]
        return cls(obj["image_id"], labels, feats, nodes)


def build_graph(image: ImageRecord, mil: MilModel, vocab: Vocabularies, threshold: float = 0.5,
                edge_cap: int = 20) -> CgvrgGraph:
    """Argmax predicate per ordered pair, keep those >= threshold, top ``edge_cap`` by probability."""
    labels = [vocab.category_of(r.label) or r.label for r in image.regions]
    feats = np.stack([r.feature for r in image.regions])
    graph = CgvrgGraph(image.image_id, labels, feats)
    pairs = ordered_pairs(len(image.regions))
    if not pairs or mil.num_predicates == 0:
        return graph
    with ad.no_grad():
        probs = mil.probabilities(image_pair_features(image)).data.astype(np.float64)
    best = probs.argmax(axis=1)
    best_p = probs[np.arange(len(pairs)), best]
    keep = [k for k in range(len(pairs)) if best_p[k] >= threshold]
    keep.sort(key=lambda k: (-best_p[k], k))
    for k in keep[:edge_cap]:
        u, v = pairs[k]
        graph.predicate_nodes.append(PredicateNode(u, int(best[k]), v, float(best_p[k])))
    return graph


def save_graphs(graphs: Sequence[CgvrgGraph], path, vocab: Vocabularies | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_json(vocab), separators=(",", ":")) + "\n")


def load_graphs(path, corpus: Sequence[ImageRecord]) -> dict[str, CgvrgGraph]:
    by_id = {rec.image_id: rec for rec in corpus}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["image_id"]] = CgvrgGraph.from_json(obj, by_id[obj["image_id"]])
    return out


# ---------------------------------------------------------------------------
# node features


def init_graph_params(params: Parameters, rng: np.random.Generator, *, num_categories: int, num_predicates: int,
                      embed_dim: int, feature_dim: int, node_dim: int, prefix: str = "cap/graph") -> None:
    ad.add_embedding(params, f"{prefix}/object_embed", num_categories, embed_dim, rng)
    ad.add_embedding(params, f"{prefix}/predicate_embed", max(num_predicates, 1), embed_dim, rng)
    ad.add_linear(params, f"{prefix}/phi_o", embed_dim + feature_dim, node_dim, rng)
    ad.add_linear(params, f"{prefix}/phi_r", embed_dim, node_dim, rng)
    ad.add_linear(params, f"{prefix}/f_r", 3 * node_dim, node_dim, rng)
    ad.add_linear(params, f"{prefix}/f_in", 2 * node_dim, node_dim, rng)
    ad.add_linear(params, f"{prefix}/f_out", 2 * node_dim, node_dim, rng)


def _ffn(params: Parameters, path: str, x: Tensor) -> Tensor:
    return ad.relu(ad.linear(x, params[f"{path}/w"], params[f"{path}/b"]))


def fuse_node_features(graph: CgvrgGraph, params: Parameters, vocab: Vocabularies,
                       prefix: str = "cap/graph") -> tuple[Tensor, Tensor | None]:
    """g_o = phi_o([text; visual]) per object, g_r = phi_r(text) per predicate node."""
    try:
        cats = [vocab.category_index[l] for l in graph.object_labels]
    except KeyError as exc:
        raise KeyError(f"object label {exc.args[0]!r} missing from the embedding table") from None
    dtype = params[f"{prefix}/phi_o/w"].dtype
    text = ad.gather_rows(params[f"{prefix}/object_embed"], cats)
    visual = Tensor(graph.object_features.astype(dtype))
    g_o = _ffn(params, f"{prefix}/phi_o", ad.concat_last_axis(text, visual))
    if not graph.predicate_nodes:
        return g_o, None
    preds = [r.predicate for r in graph.predicate_nodes]
    g_r = _ffn(params, f"{prefix}/phi_r", ad.gather_rows(params[f"{prefix}/predicate_embed"], preds))
    return g_o, g_r


def encode_graph(graph: CgvrgGraph, g_o: Tensor, g_r: Tensor | None, params: Parameters,
                 prefix: str = "cap/graph") -> tuple[Tensor, Tensor | None]:
    """One graph-convolution layer over the object/predicate bipartite structure.

    x_r = f_r([g_head; g_tail; g_r]); x_o averages f_out messages from predicates
    it heads and f_in messages from predicates it is the tail of. Objects with
    no edges keep x_o = g_o.
    """
    n = graph.num_objects
    if g_r is None:
        return g_o, None
    heads = [r.head for r in graph.predicate_nodes]
    tails = [r.tail for r in graph.predicate_nodes]
    m = len(heads)
    g_head = ad.gather_rows(g_o, heads)
    g_tail = ad.gather_rows(g_o, tails)
    x_r = _ffn(params, f"{prefix}/f_r", ad.concat_last_axis(g_head, g_tail, g_r))

    msg_out = _ffn(params, f"{prefix}/f_out", ad.concat_last_axis(g_head, g_r))
    msg_in = _ffn(params, f"{prefix}/f_in", ad.concat_last_axis(g_tail, g_r))
    a_out = np.zeros((n, m))
    a_in = np.zeros((n, m))
    a_out[heads, np.arange(m)] = 1.0
    a_in[tails, np.arange(m)] = 1.0
    degree = a_out.sum(axis=1) + a_in.sum(axis=1)
    isolated = degree == 0
    inv = np.where(isolated, 0.0, 1.0 / np.maximum(degree, 1.0))[:, None]
    dtype = g_o.dtype
    agg = ad.add(ad.matmul(Tensor((a_out * inv).astype(dtype)), msg_out),
                 ad.matmul(Tensor((a_in * inv).astype(dtype)), msg_in))
    if not isolated.any():
        return agg, x_r
    keep = Tensor(isolated[:, None].astype(dtype))
    return ad.add(agg, ad.elementwise_mul(keep, g_o)), x_r
