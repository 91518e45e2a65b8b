"""Property suites shared by the ``selfcheck`` command and the acceptance tests.

Every check returns a ``CheckResult``; none of them raise on failure.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import SPECIALS, TAGS, ImageRecord, Region, Triple, Vocabularies
from .decoder import MT_I, MT_II, Captioner, CaptionerDims
from .graph import CgvrgGraph, PredicateNode
from .metrics import bleu, build_idf, cider_d_single, gaussian_length_penalty, rouge_l
from .mil import GEOMETRY_DIM, MilModel, mil_loss, noisy_or


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# gradients


def _leaf(rng, shape, low=None, high=None, away_from=None) -> Tensor:
    if low is None:
        x = rng.normal(size=shape)
    else:
        x = rng.uniform(low, high, size=shape)
    if away_from is not None:
        # push values at least 0.1 away from each kink
        for k in away_from:
            near = np.abs(x - k) < 0.1
            x[near] = k + np.where(x[near] >= k, 0.1, -0.1) + 0.05 * np.sign(x[near] - k + 1e-12)
    return Tensor(x.astype(np.float64), requires_grad=True)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    """One representative call per primitive, with inputs away from non-smooth points."""
    rng = np.random.default_rng(seed)
    L = lambda *a, **k: _leaf(rng, *a, **k)  # noqa: E731
    return {
        "matmul": (ad.matmul, [L((3, 4)), L((4, 2))]),
        "add": (ad.add, [L((3, 4)), L((1, 4))]),
        "elementwise_mul": (ad.elementwise_mul, [L((3, 4)), L((3, 1))]),
        "concat_last_axis": (ad.concat_last_axis, [L((2, 3)), L((2, 2)), L((2, 1))]),
        "relu": (ad.relu, [L((3, 4), away_from=[0.0])]),
        "sigmoid": (ad.sigmoid, [L((3, 4))]),
        "tanh": (ad.tanh, [L((3, 4))]),
        "log": (ad.log, [L((3, 4), 0.5, 2.0)]),
        "exp": (ad.exp, [L((3, 4), -1.0, 1.0)]),
        "mean_over_rows": (ad.mean_over_rows, [L((3, 4))]),
        "sum": (ad.sum_all, [L((3, 4))]),
        "scalar_scale": (lambda a: ad.scalar_scale(a, -1.7), [L((3, 4))]),
        "gather_rows": (lambda t: ad.gather_rows(t, [0, 2, 2, 4]), [L((5, 3))]),
        "take": (lambda a: ad.take(a, (slice(0, 2), slice(1, 3))), [L((3, 4))]),
        "take_advanced": (lambda a: ad.take(a, ([0, 2, 2], [1, 3, 3])), [L((3, 4))]),
        "transpose": (ad.transpose, [L((3, 4))]),
        "clamp": (lambda a: ad.clamp(a, -0.5, 0.5), [L((3, 4), -1.0, 1.0, away_from=[-0.5, 0.5])]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [L((3, 4))]),
        "softmax_axis0": (lambda a: ad.softmax(a, axis=0), [L((3, 4))]),
        "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [L((3, 4))]),
    }


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    if out.data.size == 1:
        return ad.scalar_scale(out, float(weights.reshape(-1)[0]))
    return ad.sum_all(ad.elementwise_mul(out, Tensor(weights.reshape(out.shape))))


def check_primitive_gradients(tolerance: float = 1e-6, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed + 1)
        worst = {}
        for name, (fn, inputs) in primitive_cases(seed).items():
            with ad.no_grad():
                shape = fn(*inputs).shape
            w = rng.normal(size=shape)
            rep = ad.gradient_check(lambda: _weighted_sum(fn(*inputs), w),
                                    {f"in{k}": t for k, t in enumerate(inputs)}, tolerance=tolerance)
            worst[name] = rep.max_rel_error
        bad = {k: v for k, v in worst.items() if v >= tolerance}
        return not bad, f"max rel error {max(worst.values()):.2e} over {len(worst)} primitives" + (
            f"; failing {bad}" if bad else "")
    return _timed("gradients/primitives", run)


def tiny_vocab() -> Vocabularies:
    return Vocabularies(list(SPECIALS) + ["a", "cat", "dog", "on", "in", "table"],
                        ["cat", "dog", "table"], ["on", "in"])


def mil_gradient_case(seed: int = 0):
    """2-region image, 2-predicate lexicon, one positive triple, float64 detector."""
    rng = np.random.default_rng(seed)
    vocab = tiny_vocab()
    regions = [Region((10.0, 10.0, 40.0, 50.0), "cat", rng.normal(size=3)),
               Region((30.0, 45.0, 90.0, 95.0), "table", rng.normal(size=3))]
    image = ImageRecord("grad", 100, 100, regions, [["a", "cat", "on", "a", "table"]])
    triples = [Triple("cat", "on", "table", 0)]
    model = MilModel(2 * 3 + GEOMETRY_DIM, 6, 2, seed=seed)
    model.params = model.params.astype(np.float64)
    return image, triples, model, vocab


def check_mil_gradient(tolerance: float = 1e-4) -> CheckResult:
    def run():
        image, triples, model, vocab = mil_gradient_case()
        rep = ad.gradient_check(lambda: mil_loss(image, triples, model, vocab), model.params, tolerance=tolerance)
        return rep.passed, f"max rel error {rep.max_rel_error:.2e} over {rep.checked_entries} entries"
    return _timed("gradients/mil_loss", run)


TINY_DIMS = CaptionerDims(feature_dim=4, embed=6, bottom=5, top=6, node=6, att_hidden=4)


def tiny_graph(seed: int = 0, with_predicates: bool = True, feature_dim: int = 4) -> CgvrgGraph:
    rng = np.random.default_rng(seed)
    nodes = [PredicateNode(0, 0, 2, 0.9), PredicateNode(1, 1, 2, 0.7)] if with_predicates else []
    return CgvrgGraph(f"tiny{seed}", ["cat", "dog", "table"], rng.normal(size=(3, feature_dim)), nodes)


def tiny_captioner(block: str, seed: int = 0, vocab: Vocabularies | None = None,
                   dims: CaptionerDims = TINY_DIMS) -> Captioner:
    model = Captioner(vocab or tiny_vocab(), dims, block, seed=seed)
    model.params = model.params.astype(np.float64)
    return model


def decode_step_loss(model: Captioner, graph: CgvrgGraph, words=(4, 5), seed: int = 0) -> Callable[[], Tensor]:
    """Encode, then run steps; the last one starts from a non-zero recurrent state."""
    rng = np.random.default_rng(seed)
    w_word = rng.normal(size=(1, len(model.vocab.words)))
    w_tag = rng.normal(size=(1, len(TAGS)))

    def fn():
        enc = model.encode(graph)
        state = model.init_state(enc)
        prev = model.vocab.bos
        total = None
        for w in words:
            res = model.step(state, prev, enc)
            state, prev = res.state, w
            term = ad.add(_weighted_sum(ad.log_softmax(res.word_logits), w_word),
                          _weighted_sum(res.tag_probs, w_tag))
            total = term if total is None else ad.add(total, term)
        return total
    return fn


def check_decoder_gradient(block: str, tolerance: float = 1e-4) -> CheckResult:
    def run():
        model = tiny_captioner(block)
        # the loss sums many log-probabilities, so a 1e-5 step is dominated by round-off
        rep = ad.gradient_check(decode_step_loss(model, tiny_graph()), model.params, step=1e-4,
                                tolerance=tolerance)
        return rep.passed, f"max rel error {rep.max_rel_error:.2e} over {rep.checked_entries} entries"
    return _timed(f"gradients/{block} step", run)


# ---------------------------------------------------------------------------
# noisy-OR


def check_noisy_or(cases: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        if noisy_or([0.5, 0.5]) != 0.75:
            return False, "noisy_or([0.5, 0.5]) != 0.75"
        for c in range(cases):
            n = int(rng.integers(1, 25))
            # mix of ordinary, tiny and near-one instance probabilities
            kind = c % 3
            if kind == 0:
                p = rng.uniform(0, 1, size=n)
            elif kind == 1:
                p = rng.uniform(0, 1e-6, size=n)
            else:
                p = 1 - rng.uniform(0, 1e-3, size=n)
            p = p.tolist()
            out = noisy_or(p)
            if not max(p) <= out <= 1.0:
                return False, f"case {c}: bound violated ({max(p)} > {out})"
            extra = float(rng.uniform(0, 1))
            if noisy_or(p + [extra]) < out:
                return False, f"case {c}: adding {extra} decreased the bag probability"
            perm = [p[k] for k in rng.permutation(n)]
            if noisy_or(perm) != out:
                return False, f"case {c}: permutation changed the result"
        return True, f"{cases} randomized bags"
    return _timed("noisy-or properties", run)


# ---------------------------------------------------------------------------
# beam search


def exhaustive_best(model: Captioner, graph: CgvrgGraph, max_len: int) -> tuple[list[int], float]:
    """Scores every sequence that ends in EOS or reaches ``max_len``; returns the best."""
    eos = model.vocab.eos
    best_ids, best_score = None, -math.inf
    with ad.no_grad():
        enc = model.encode(graph)
        stack = [([], 0.0, model.init_state(enc))]
        while stack:
            ids, score, state = stack.pop()
            prev = ids[-1] if ids else model.vocab.bos
            res = model.step(state, prev, enc)
            logits = res.word_logits.data[0].astype(np.float64)
            shifted = logits - logits.max()
            logp = shifted - np.log(np.exp(shifted).sum())
            for w, lp in enumerate(logp):
                seq, s = ids + [w], score + float(lp)
                if w == eos or len(seq) == max_len:
                    if s > best_score or (s == best_score and seq < best_ids):
                        best_ids, best_score = seq, s
                else:
                    stack.append((seq, s, res.state))
    return best_ids, best_score


def reference_greedy(model: Captioner, graph: CgvrgGraph, max_len: int) -> tuple[list[int], float]:
    with ad.no_grad():
        enc = model.encode(graph)
        state, prev, ids, score = model.init_state(enc), model.vocab.bos, [], 0.0
        for _ in range(max_len):
            res = model.step(state, prev, enc)
            logits = res.word_logits.data[0].astype(np.float64)
            shifted = logits - logits.max()
            logp = shifted - np.log(np.exp(shifted).sum())
            w = int(np.argmax(logp))
            ids.append(w)
            score += float(logp[w])
            state, prev = res.state, w
            if w == model.vocab.eos:
                break
    return ids, score


def oracle_model(seed: int) -> tuple[Captioner, CgvrgGraph, int]:
    """Random float64 model over the 4-word vocabulary of special tokens."""
    rng = np.random.default_rng(seed)
    vocab = Vocabularies(list(SPECIALS), ["cat", "dog", "table"], ["on", "in"])
    block = MT_I if seed % 2 == 0 else MT_II
    model = tiny_captioner(block, seed=seed, vocab=vocab)
    # sharpen the word head so sequences differ noticeably in probability
    for k in ("cap/f_y/out/w", "cap/f_y/out/b"):
        model.params[k].data[...] = rng.normal(scale=2.0, size=model.params[k].shape)
    max_len = 1 + seed % 4
    return model, tiny_graph(seed, with_predicates=seed % 3 != 0), max_len


def check_beam_oracle(seeds: int = 50, tolerance: float = 1e-9) -> CheckResult:
    def run():
        for seed in range(seeds):
            model, graph, max_len = oracle_model(seed)
            v = len(model.vocab.words)
            best = model.beam_search(graph, v**max_len, max_len)[0]
            ids, score = exhaustive_best(model, graph, max_len)
            if best.word_ids != ids or abs(best.score - score) > tolerance:
                return False, f"seed {seed}: beam {best.word_ids} {best.score} vs exhaustive {ids} {score}"
            g_ids, g_score = reference_greedy(model, graph, max_len)
            b1 = model.beam_search(graph, 1, max_len)[0]
            if b1.word_ids != g_ids or abs(b1.score - g_score) > tolerance:
                return False, f"seed {seed}: beam-1 {b1.word_ids} vs greedy {g_ids}"
        return True, f"{seeds} random models, T in 1..4, |V| = 4"
    return _timed("beam vs exhaustive", run)


# ---------------------------------------------------------------------------
# MT-II mixing


def check_mt2_degeneracy(seeds: int = 10, tolerance: float = 1e-7, sum_tol: float = 1e-6) -> CheckResult:
    def run():
        none = np.array([1.0, 0.0, 0.0])
        worst_mix = worst_sum = 0.0
        for seed in range(seeds):
            model = tiny_captioner(MT_II, seed=seed)
            graph = tiny_graph(seed, with_predicates=seed % 2 == 0)
            with ad.no_grad():
                enc = model.encode(graph)
                state, prev = model.init_state(enc), model.vocab.bos
                for w in (4, 5, 6, model.vocab.eos):
                    forced = model.step(state, prev, enc, tag_override=none)
                    p_mix = ad.softmax(forced.word_logits).data
                    p_ref = ad.softmax(model.word_head(forced.state.h2)).data
                    worst_mix = max(worst_mix, float(np.abs(p_mix - p_ref).max()))
                    res = model.step(state, prev, enc)
                    sums = [float(res.tag_probs.data.sum()), float(res.att_objects.sum())]
                    if graph.predicate_nodes:
                        sums.append(float(res.att_predicates.sum()))
                    worst_sum = max(worst_sum, max(abs(s - 1.0) for s in sums))
                    state, prev = res.state, w
        ok = worst_mix <= tolerance and worst_sum <= sum_tol
        return ok, f"max |p_mix - f_y(h2)| {worst_mix:.1e}, max |sum - 1| {worst_sum:.1e}"
    return _timed("MT-II none-tag degeneracy", run)


# ---------------------------------------------------------------------------
# metrics


def check_metric_oracles() -> CheckResult:
    def run():
        cand = "a cat sits on a red mat".split()
        others = ["a dog runs in the park".split(), "two birds fly over water".split()]
        idf = build_idf([[cand]] + [[o] for o in others])
        problems = []
        cider = cider_d_single(cand, [cand], idf)
        if abs(cider - 10.0) > 1e-6:
            problems.append(f"CIDEr-D identical {cider}")
        b4 = bleu([cand], [[cand]])[3]
        if b4 != 1.0:
            problems.append(f"BLEU-4 identical {b4}")
        hand = {
            "bleu1 [the cat] vs [the the cat]": (bleu([["the", "cat"]], [[["the", "the", "cat"]]])[0], 0.6065),
            "rouge-l [a b c d] vs [a c d]": (rouge_l(list("abcd"), [list("acd")]), 0.8798),
            "length penalty delta 6": (gaussian_length_penalty(10, 4), 0.6065),
            "cider no overlap": (cider_d_single(others[1], [cand], idf), 0.0),
        }
        for name, (got, want) in hand.items():
            if round(got, 4) != want:
                problems.append(f"{name}: {got:.6f} != {want}")
        return not problems, "; ".join(problems) or f"{len(hand) + 2} oracle values"
    return _timed("metric oracles", run)


def run_all(full: bool = True) -> list[CheckResult]:
    return [
        check_primitive_gradients(),
        check_mil_gradient(),
        check_decoder_gradient(MT_I),
        check_decoder_gradient(MT_II),
        check_noisy_or(1000),
        check_beam_oracle(50 if full else 10),
        check_mt2_degeneracy(),
        check_metric_oracles(),
    ]
