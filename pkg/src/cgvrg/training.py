"""Captioner training: teacher-forced cross-entropy, then self-critical fine-tuning."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import ImageRecord, Vocabularies, label_tags, named_rng
from .decoder import Captioner, EncodedGraph
from .graph import CgvrgGraph
from .metrics import IdfStats, build_idf, cider_d_single

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    phase: str = "xe"
    epochs: int = 200
    lr: float = 0.002
    batch_size: int = 5
    gamma: float = 0.15
    seed: int = 0
    lr_decay_every: int = 0
    lr_decay_rate: float = 1.0
    scst_steps: int = 200
    max_len: int = 16
    reward: str = "CIDEr-D"

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_rate ** (epoch // self.lr_decay_every)


class MetricsLog:
    """Line-delimited JSON training records."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class Example:
    image: ImageRecord
    graph: CgvrgGraph
    tokens: list[str]
    tags: list[str]


def make_examples(corpus: Sequence[ImageRecord], graphs: dict[str, CgvrgGraph], vocab: Vocabularies) -> list[Example]:
    out = []
    for rec in corpus:
        if rec.image_id not in graphs:
            raise KeyError(f"missing graph for image {rec.image_id}")
        for cap in rec.captions:
            out.append(Example(rec, graphs[rec.image_id], list(cap), label_tags(cap, vocab)))
    return out


@dataclass
class XeResult:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)


def train_xe(model: Captioner, examples: Sequence[Example], config: TrainConfig,
             metrics: MetricsLog | None = None,
             on_epoch_end: Callable[[int, Captioner], None] | None = None) -> XeResult:
    """Minibatch Adam on the mean joint word/tag loss."""
    rng = named_rng(config.seed, "captioner/shuffle")
    result = XeResult()
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        total, correct, count = 0.0, 0, 0
        lr = config.lr_at(epoch)
        for start in range(0, len(order), config.batch_size):
            batch = [examples[k] for k in order[start: start + config.batch_size]]
            model.params.zero_grad()
            loss = None
            for ex in batch:
                l, c, n = model.xe_loss(ex.graph, ex.tokens, ex.tags, config.gamma, return_stats=True)
                loss = l if loss is None else ad.add(loss, l)
                total += l.item()
                correct += c
                count += n
            ad.backward(ad.scalar_scale(loss, 1.0 / len(batch)))
            ad.adam_step(model.params, lr)
        result.epoch_losses.append(total / len(examples))
        result.epoch_accuracy.append(correct / max(count, 1))
        log.info("xe epoch %d loss %.5f acc %.4f", epoch + 1, result.epoch_losses[-1], result.epoch_accuracy[-1])
        if metrics is not None:
            metrics.write(step=epoch + 1, phase="xe", loss=result.epoch_losses[-1],
                          token_accuracy=result.epoch_accuracy[-1], lr=lr)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return result


def teacher_forced_accuracy(model: Captioner, examples: Sequence[Example]) -> float:
    correct = count = 0
    with ad.no_grad():
        for ex in examples:
            _, c, n = model.xe_loss(ex.graph, ex.tokens, ex.tags, 0.0, return_stats=True)
            correct += c
            count += n
    return correct / max(count, 1)


# ---------------------------------------------------------------------------
# self-critical sequence training


@dataclass
class Sample:
    ids: list[int]
    step_logprobs: list[float]
    logprob: ad.Tensor | None


def sample_sequence(model: Captioner, graph: CgvrgGraph | EncodedGraph, rng: np.random.Generator,
                    max_len: int = 16, temperature: float = 1.0) -> Sample:
    """Ancestral sampling until EOS or ``max_len``; keeps the differentiable total log-prob."""
    enc = graph if isinstance(graph, EncodedGraph) else model.encode(graph)
    state = model.init_state(enc)
    prev = model.vocab.bos
    ids, step_lp = [], []
    total = None
    for _ in range(max_len):
        res = model.step(state, prev, enc)
        state = res.state
        logits = res.word_logits if temperature == 1.0 else ad.scalar_scale(res.word_logits, 1.0 / temperature)
        lp = ad.log_softmax(logits, axis=-1)
        probs = np.exp(lp.data[0].astype(np.float64))
        w = int(rng.choice(len(probs), p=probs / probs.sum()))
        chosen = ad.take(lp, (0, w))
        total = chosen if total is None else ad.add(total, chosen)
        ids.append(w)
        step_lp.append(float(chosen.data))
        prev = w
        if w == model.vocab.eos:
            break
    return Sample(ids, step_lp, total)


def strip_eos(ids: Sequence[int], vocab: Vocabularies) -> list[str]:
    out = []
    for i in ids:
        if i == vocab.eos:
            break
        out.append(vocab.words[i])
    return out


@dataclass
class ScstBatchStats:
    loss: float
    mean_reward: float
    mean_baseline: float
    advantages: list[float]
    updated: bool


def scst_step(model: Captioner, batch: Sequence[tuple[ImageRecord, CgvrgGraph]], idf: IdfStats,
              rng: np.random.Generator, lr: float, max_len: int = 16,
              reward_fn: Callable[[list[str], list[list[str]]], float] | None = None,
              apply_update: bool = True) -> ScstBatchStats:
    """One self-critical update: advantage = r(sample) - r(greedy), loss = -adv * log p(sample).

    The tag head gets no gradient here; the sentence reward only scores words.
    When every advantage in the batch is zero the optimizer step is skipped.
    """
    if reward_fn is None:
        def reward_fn(words, refs):
            return cider_d_single(words, refs, idf)
    model.params.zero_grad()
    loss = None
    rewards, baselines, advs = [], [], []
    for image, graph in batch:
        refs = [list(c) for c in image.captions]
        if not refs:
            raise ValueError(f"image {image.image_id} has no references")
        greedy = model.greedy(graph, max_len)
        r_greedy = reward_fn(greedy.words, refs)
        sample = sample_sequence(model, graph, rng, max_len)
        r_sample = reward_fn(strip_eos(sample.ids, model.vocab), refs)
        adv = r_sample - r_greedy
        term = ad.scalar_scale(sample.logprob, -adv / len(batch))
        loss = term if loss is None else ad.add(loss, term)
        rewards.append(r_sample)
        baselines.append(r_greedy)
        advs.append(adv)
    ad.backward(loss)
    updated = apply_update and any(a != 0.0 for a in advs)
    if updated:
        ad.adam_step(model.params, lr)
    return ScstBatchStats(loss.item(), float(np.mean(rewards)), float(np.mean(baselines)), advs, updated)


def greedy_cider(model: Captioner, corpus: Sequence[ImageRecord], graphs: dict[str, CgvrgGraph],
                 idf: IdfStats, max_len: int = 16) -> float:
    scores = []
    for rec in corpus:
        out = model.greedy(graphs[rec.image_id], max_len)
        scores.append(cider_d_single(out.words, [list(c) for c in rec.captions], idf))
    return float(np.mean(scores))


@dataclass
class ScstResult:
    greedy_cider: list[float] = field(default_factory=list)
    sample_rewards: list[float] = field(default_factory=list)
    baseline_rewards: list[float] = field(default_factory=list)


def train_scst(model: Captioner, corpus: Sequence[ImageRecord], graphs: dict[str, CgvrgGraph],
               config: TrainConfig, idf: IdfStats | None = None, metrics: MetricsLog | None = None,
               track_greedy: bool = True) -> ScstResult:
    """Runs ``config.scst_steps`` self-critical updates over shuffled minibatches.

    IDF statistics come from the training references and stay frozen.
    """
    idf = idf or build_idf([[list(c) for c in rec.captions] for rec in corpus])
    rng = named_rng(config.seed, "scst")
    result = ScstResult()
    if track_greedy:
        result.greedy_cider.append(greedy_cider(model, corpus, graphs, idf, config.max_len))
    order: list[int] = []
    for step in range(config.scst_steps):
        if len(order) < config.batch_size:
            order.extend(rng.permutation(len(corpus)).tolist())
        idx, order = order[: config.batch_size], order[config.batch_size:]
        batch = [(corpus[k], graphs[corpus[k].image_id]) for k in idx]
        stats = scst_step(model, batch, idf, rng, config.lr, config.max_len)
        result.sample_rewards.append(stats.mean_reward)
        result.baseline_rewards.append(stats.mean_baseline)
        record = dict(step=step + 1, phase="scst", loss=stats.loss, mean_reward=stats.mean_reward,
                      baseline_reward=stats.mean_baseline, updated=stats.updated)
        if track_greedy:
            result.greedy_cider.append(greedy_cider(model, corpus, graphs, idf, config.max_len))
            record["greedy_cider"] = result.greedy_cider[-1]
        if metrics is not None:
            metrics.write(**record)
        log.info("scst step %d reward %.4f baseline %.4f", step + 1, stats.mean_reward, stats.mean_baseline)
    return result
