"""BLEU-1..4, ROUGE-L and CIDEr-D, written from their standard definitions.

Candidates and references are token lists. Scores are comparable within this
package only; tokenisation is a plain lowercase/punctuation-strip/split.
"""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

Tokens = Sequence[str]

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0


def metric_tokenize(sentence: str) -> list[str]:
    return _PUNCT.sub("", sentence.lower()).split()


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n with clipped precision and closest-length brevity penalty."""
    if len(candidates) != len(reference_sets):
        raise ValueError(f"{len(candidates)} candidates but {len(reference_sets)} reference sets")
    if not candidates:
        raise ValueError("bleu: empty input")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        cand_len += len(cand)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                for g, c in ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], c)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matches[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference_set: Sequence[Tokens], beta: float = 1.2) -> float:
    if not reference_set:
        raise ValueError("rouge_l: empty reference set")
    best = 0.0
    for ref in reference_set:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
    return best


def rouge_l_corpus(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]]) -> float:
    return float(np.mean([rouge_l(c, refs) for c, refs in zip(candidates, reference_sets)]))


# ---------------------------------------------------------------------------
# CIDEr-D


@dataclass(frozen=True)
class IdfStats:
    doc_freq: dict[tuple[str, ...], int]
    num_docs: int

    def idf(self, gram: tuple[str, ...]) -> float:
        return math.log(float(self.num_docs)) - math.log(max(1.0, float(self.doc_freq.get(gram, 0))))


def build_idf(reference_sets: Sequence[Sequence[Tokens]], max_n: int = 4) -> IdfStats:
    """Document frequency per n-gram; one document per image's reference set."""
    if not reference_sets:
        raise ValueError("build_idf: empty corpus")
    df: Counter = Counter()
    for refs in reference_sets:
        grams = set()
        for r in refs:
            for n in range(1, max_n + 1):
                grams.update(ngrams(r, n))
        df.update(grams)
    return IdfStats(dict(df), len(reference_sets))


def _tfidf(tokens: Tokens, idf: IdfStats, max_n: int):
    vecs, norms = [], []
    for n in range(1, max_n + 1):
        vec = {g: c * idf.idf(g) for g, c in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def gaussian_length_penalty(cand_len: int, ref_len: int, sigma: float = CIDER_SIGMA) -> float:
    delta = float(cand_len - ref_len)
    return math.exp(-(delta**2) / (2 * sigma**2))


def cider_d_single(candidate: Tokens, references: Sequence[Tokens], idf: IdfStats, max_n: int = 4,
                   sigma: float = CIDER_SIGMA) -> float:
    if not references:
        raise ValueError("cider_d: empty reference set")
    c_vecs, c_norms = _tfidf(candidate, idf, max_n)
    total = np.zeros(max_n)
    for ref in references:
        r_vecs, r_norms = _tfidf(ref, idf, max_n)
        penalty = gaussian_length_penalty(len(candidate), len(ref), sigma)
        for n in range(max_n):
            # candidate weights clipped to the reference's
            num = sum(min(v, r_vecs[n][g]) * r_vecs[n][g] for g, v in c_vecs[n].items() if g in r_vecs[n])
            if c_norms[n] > 0 and r_norms[n] > 0:
                total[n] += penalty * num / (c_norms[n] * r_norms[n])
    return float(CIDER_SCALE * total.mean() / len(references))


def cider_d(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]], idf: IdfStats,
            max_n: int = 4) -> tuple[float, list[float]]:
    if len(candidates) != len(reference_sets):
        raise ValueError(f"{len(candidates)} candidates but {len(reference_sets)} reference sets")
    per = [cider_d_single(c, refs, idf, max_n) for c, refs in zip(candidates, reference_sets)]
    return (float(np.mean(per)) if per else 0.0), per


def evaluate(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]],
             idf: IdfStats | None = None, image_ids: Sequence[str] | None = None) -> dict:
    idf = idf or build_idf(reference_sets)
    b = bleu(candidates, reference_sets)
    mean_cider, per = cider_d(candidates, reference_sets, idf)
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(candidates))]
    return {
        "BLEU-1": b[0], "BLEU-2": b[1], "BLEU-3": b[2], "BLEU-4": b[3],
        "ROUGE-L": rouge_l_corpus(candidates, reference_sets),
        "CIDEr-D": mean_cider,
        "METEOR": None,
        "SPICE": None,
        "absent_metrics": ["METEOR", "SPICE"],
        "per_image_cider_d": dict(zip(ids, per)),
    }
