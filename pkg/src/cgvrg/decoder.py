"""Two-layer attention LSTM that emits a word and an object/predicate/none tag per step."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .corpus import TAGS, TAG_NONE, Vocabularies, named_rng
from .graph import CgvrgGraph, encode_graph, fuse_node_features, init_graph_params

MT_I = "MT-I"
MT_II = "MT-II"
BLOCKS = (MT_I, MT_II)


@dataclass(frozen=True)
class CaptionerDims:
    feature_dim: int = 32
    embed: int = 64
    bottom: int = 32
    top: int = 64
    node: int = 64
    att_hidden: int = 32

    def __post_init__(self):
        if self.top != self.node:
            raise ValueError(
                f"top LSTM size ({self.top}) must equal the graph node feature size ({self.node})"
            )


@dataclass
class EncodedGraph:
    graph: CgvrgGraph
    x_o: Tensor
    x_r: Tensor | None
    x_mean: Tensor
    keys_o: Tensor
    keys_r: Tensor | None
    h2_init: Tensor


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor


@dataclass
class StepResult:
    state: DecoderState
    word_logits: Tensor
    tag_logits: Tensor
    tag_probs: Tensor
    att_objects: np.ndarray
    att_predicates: np.ndarray


@dataclass
class GenerationOutput:
    image_id: str
    words: list[str]
    tags: list[str]
    tag_probs: list[list[float]]
    attention_objects: list[list[float]]
    attention_predicates: list[list[float]]
    score: float
    word_ids: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("word_ids")
        d["tag_order"] = list(TAGS)
        return d


def attend(query: Tensor, nodes: Tensor | None, w_q: Tensor, w: Tensor, keys: Tensor) -> tuple[Tensor | None, np.ndarray]:
    """Additive attention: softmax_i(w . tanh(W_q q + W_x x_i)), context = sum_i a_i x_i."""
    if nodes is None:
        return None, np.zeros(0)
    scores = ad.matmul(ad.tanh(ad.add(keys, ad.matmul(query, w_q))), w)  # (n, 1)
    weights = ad.softmax(scores, axis=0)
    context = ad.matmul(ad.transpose(weights), nodes)
    return context, weights.data[:, 0].astype(np.float64)


class Captioner:
    def __init__(self, vocab: Vocabularies, dims: CaptionerDims = CaptionerDims(), block: str = MT_I,
                 seed: int = 0, params: Parameters | None = None):
        if block not in BLOCKS:
            raise ValueError(f"unknown multi-task block {block!r}")
        self.vocab = vocab
        self.dims = dims
        self.block = block
        if params is None:
            params = self._init_params(seed)
        self.params = params

    def _init_params(self, seed: int) -> Parameters:
        d = self.dims
        rng = named_rng(seed, "captioner")
        p = Parameters()
        v = len(self.vocab.words)
        init_graph_params(p, rng, num_categories=len(self.vocab.object_categories),
                          num_predicates=len(self.vocab.predicate_lexicon), embed_dim=d.embed,
                          feature_dim=d.feature_dim, node_dim=d.node)
        ad.add_embedding(p, "cap/word_embed", v, d.embed, rng)
        ad.add_linear(p, "cap/h2_init", d.embed, d.top, rng)
        ad.add_lstm(p, "cap/lstm1", d.top + d.node + d.embed, d.bottom, rng)
        for name in ("att_obj", "att_pred"):
            p.add(f"cap/{name}/w_q", ad.glorot_uniform(rng, d.bottom, d.att_hidden))
            p.add(f"cap/{name}/w_x", ad.glorot_uniform(rng, d.node, d.att_hidden))
            p.add(f"cap/{name}/w", ad.glorot_uniform(rng, d.att_hidden, 1))
        ad.add_lstm(p, "cap/lstm2", d.bottom + 2 * d.node, d.top, rng)
        ad.add_linear(p, "cap/f_y/hidden", d.top, d.top, rng)
        ad.add_linear(p, "cap/f_y/out", d.top, v, rng)
        ad.add_linear(p, "cap/f_z/hidden", d.top, d.top, rng)
        ad.add_linear(p, "cap/f_z/out", d.top, len(TAGS), rng)
        return p

    def meta(self) -> dict:
        return {"kind": "captioner", "block": self.block, "dims": asdict(self.dims)}

    @classmethod
    def from_checkpoint(cls, vocab: Vocabularies, params: Parameters, meta: dict) -> "Captioner":
        return cls(vocab, CaptionerDims(**meta["dims"]), meta["block"], params=params)

    @property
    def dtype(self):
        return self.params["cap/word_embed"].dtype

    # -- encoder side -----------------------------------------------------

    def encode(self, graph: CgvrgGraph) -> EncodedGraph:
        p = self.params
        g_o, g_r = fuse_node_features(graph, p, self.vocab)
        x_o, x_r = encode_graph(graph, g_o, g_r, p)
        nodes = x_o
        if x_r is not None:
            nodes = ad.transpose(ad.concat_last_axis(ad.transpose(x_o), ad.transpose(x_r)))
        x_mean = ad.mean_over_rows(nodes)
        keys_o = ad.matmul(x_o, p["cap/att_obj/w_x"])
        keys_r = None if x_r is None else ad.matmul(x_r, p["cap/att_pred/w_x"])
        if graph.predicate_nodes:
            emb = ad.gather_rows(p["cap/graph/predicate_embed"], [r.predicate for r in graph.predicate_nodes])
            h2 = ad.mean_over_rows(ad.linear(emb, p["cap/h2_init/w"], p["cap/h2_init/b"]))
        else:
            h2 = Tensor(np.zeros((1, self.dims.top), dtype=self.dtype))
        return EncodedGraph(graph, x_o, x_r, x_mean, keys_o, keys_r, h2)

    def init_state(self, enc: EncodedGraph) -> DecoderState:
        zb = np.zeros((1, self.dims.bottom), dtype=self.dtype)
        zt = np.zeros((1, self.dims.top), dtype=self.dtype)
        return DecoderState(Tensor(zb), Tensor(zb.copy()), enc.h2_init, Tensor(zt))

    # -- one decoding step ------------------------------------------------

    def step(self, state: DecoderState, prev_word: int | Tensor, enc: EncodedGraph,
             tag_override: np.ndarray | None = None) -> StepResult:
        p = self.params
        if isinstance(prev_word, Tensor):
            emb = prev_word
        else:
            if not 0 <= prev_word < len(self.vocab.words):
                raise IndexError(f"word index {prev_word} outside vocabulary")
            emb = ad.gather_rows(p["cap/word_embed"], [prev_word])
        x1 = ad.concat_last_axis(state.h2, enc.x_mean, emb)
        h1, c1 = ad.lstm_cell(x1, state.h1, state.c1, p["cap/lstm1/w_x"], p["cap/lstm1/w_h"], p["cap/lstm1/b"])
        ctx_r, a_r = attend(h1, enc.x_r, p["cap/att_pred/w_q"], p["cap/att_pred/w"], enc.keys_r)
        ctx_o, a_o = attend(h1, enc.x_o, p["cap/att_obj/w_q"], p["cap/att_obj/w"], enc.keys_o)
        if ctx_r is None:
            ctx_r = Tensor(np.zeros((1, self.dims.node), dtype=self.dtype))
        x2 = ad.concat_last_axis(h1, ctx_o, ctx_r)
        h2, c2 = ad.lstm_cell(x2, state.h2, state.c2, p["cap/lstm2/w_x"], p["cap/lstm2/w_h"], p["cap/lstm2/b"])

        tag_logits = self._ffn("cap/f_z", h2)
        if tag_override is not None:
            tag_probs = Tensor(np.asarray(tag_override, dtype=self.dtype).reshape(1, len(TAGS)))
        else:
            tag_probs = ad.softmax(tag_logits, axis=-1)
        if self.block == MT_II:
            mixed = ad.add(
                ad.add(ad.elementwise_mul(h2, ad.take(tag_probs, (slice(None), slice(0, 1)))),
                       ad.elementwise_mul(ctx_r, ad.take(tag_probs, (slice(None), slice(1, 2))))),
                ad.elementwise_mul(ctx_o, ad.take(tag_probs, (slice(None), slice(2, 3)))),
            )
            word_logits = self._ffn("cap/f_y", mixed)
        else:
            word_logits = self._ffn("cap/f_y", h2)
        return StepResult(DecoderState(h1, c1, h2, c2), word_logits, tag_logits, tag_probs, a_o, a_r)

    def _ffn(self, path: str, x: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.linear(x, p[f"{path}/hidden/w"], p[f"{path}/hidden/b"]))
        return ad.linear(h, p[f"{path}/out/w"], p[f"{path}/out/b"])

    def word_head(self, h: Tensor) -> Tensor:
        """f_y applied to an arbitrary hidden vector (used to check MT-II mixing)."""
        return self._ffn("cap/f_y", h)

    # -- training objective -------------------------------------------------

    def xe_loss(self, graph: CgvrgGraph | EncodedGraph, tokens: Sequence[str], tags: Sequence[str],
                gamma: float = 0.15, return_stats: bool = False):
        """Teacher-forced -sum_t [log p(word_t) + gamma * log p(tag_t)] with EOS appended."""
        if len(tokens) != len(tags):
            raise ValueError(f"{len(tokens)} tokens but {len(tags)} tags")
        enc = graph if isinstance(graph, EncodedGraph) else self.encode(graph)
        ids = self.vocab.encode(tokens)
        inputs = [self.vocab.bos] + ids
        targets = ids + [self.vocab.eos]
        tag_targets = [TAGS.index(t) for t in tags] + [TAG_NONE]
        embeds = ad.gather_rows(self.params["cap/word_embed"], inputs)
        state = self.init_state(enc)
        total = None
        correct = 0
        for t, (target, tag) in enumerate(zip(targets, tag_targets)):
            res = self.step(state, ad.take(embeds, (slice(t, t + 1),)), enc)
            state = res.state
            w_lp = ad.log_softmax(res.word_logits, axis=-1)
            term = ad.take(w_lp, (0, target))
            if gamma != 0.0:
                z_lp = ad.log_softmax(res.tag_logits, axis=-1)
                term = ad.add(term, ad.scalar_scale(ad.take(z_lp, (0, tag)), gamma))
            total = term if total is None else ad.add(total, term)
            correct += int(np.argmax(res.word_logits.data[0]) == target)
        loss = ad.scalar_scale(total, -1.0)
        if return_stats:
            return loss, correct, len(targets)
        return loss

    # -- inference ----------------------------------------------------------

    def beam_search(self, graph: CgvrgGraph, beam_width: int = 3, max_len: int = 16) -> list[GenerationOutput]:
        if beam_width < 1 or max_len < 1:
            raise ValueError("beam_search needs beam_width >= 1 and max_len >= 1")
        with ad.no_grad():
            enc = self.encode(graph)
            return _beam(self, enc, beam_width, max_len)

    def greedy(self, graph: CgvrgGraph, max_len: int = 16) -> GenerationOutput:
        return self.beam_search(graph, 1, max_len)[0]


@dataclass
class _Hyp:
    ids: list[int]
    score: float
    state: DecoderState | None
    tag_probs: list[list[float]]
    att_o: list[list[float]]
    att_r: list[list[float]]


def _beam(model: Captioner, enc: EncodedGraph, beam_width: int, max_len: int) -> list[GenerationOutput]:
    eos = model.vocab.eos
    live = [_Hyp([], 0.0, model.init_state(enc), [], [], [])]
    done: list[_Hyp] = []
    for t in range(max_len):
        candidates = []
        for rank, hyp in enumerate(live):
            prev = hyp.ids[-1] if hyp.ids else model.vocab.bos
            res = model.step(hyp.state, prev, enc)
            logits = res.word_logits.data[0].astype(np.float64)
            shifted = logits - logits.max()
            logp = shifted - np.log(np.exp(shifted).sum())
            tp = res.tag_probs.data[0].astype(np.float64).tolist()
            for w in range(len(logp)):
                candidates.append((hyp.score + float(logp[w]), w, rank, res, tp))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        parents, live = live, []
        for score, w, rank, res, tp in candidates[:beam_width]:
            base = parents[rank]
            hyp = _Hyp(base.ids + [w], score, res.state, base.tag_probs + [tp],
                       base.att_o + [res.att_objects.tolist()], base.att_r + [res.att_predicates.tolist()])
            (done if w == eos else live).append(hyp)
        if not live:
            break
        best_done = max((h.score for h in done), default=-np.inf)
        if best_done >= max(h.score for h in live):
            break
    done.extend(live)
    done.sort(key=lambda h: (-h.score, h.ids))
    return [_to_output(model, enc, h) for h in done[:beam_width]]


def _to_output(model: Captioner, enc: EncodedGraph, hyp: _Hyp) -> GenerationOutput:
    ids = list(hyp.ids)
    n = len(ids)
    if ids and ids[-1] == model.vocab.eos:
        n -= 1
    tag_probs = hyp.tag_probs[:n]
    return GenerationOutput(
        image_id=enc.graph.image_id,
        words=model.vocab.decode(ids[:n]),
        tags=[TAGS[int(np.argmax(tp))] for tp in tag_probs],
        tag_probs=tag_probs,
        attention_objects=hyp.att_o[:n],
        attention_predicates=hyp.att_r[:n],
        score=hyp.score,
        word_ids=ids,
    )
