"""Command-line pipeline driver.

Stages and the artifacts they write under the output directory:

  gen-toy           corpus.jsonl (or ``corpus_path``)
  build-vocab       vocab.json
  train-mil         mil.ckpt, mil_diagnostics.json, mil_metrics.jsonl
  build-graphs      graphs.jsonl
  train-captioner   captioner_<block>_<phase>.ckpt, <block>_<phase>_metrics.jsonl
  generate          generations.jsonl, traces/<image_id>.json
  evaluate          eval_report.json
  selfcheck         prints one line per property suite

Every stage also writes manifests/<stage>.json with the config hash, seed and
sha256 of each input and output. Before a stage reads an artifact it checks
the producing manifest, so an edited vocabulary invalidates everything built
on top of it.

Exit codes: 0 ok, 2 configuration error, 3 missing or stale prerequisite,
4 selfcheck failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import ConfigError, PipelineConfig, load_config, parse_overrides
from .corpus import CorpusError, Vocabularies, build_vocabularies, generate_toy_corpus, load_corpus
from .decoder import Captioner, GenerationOutput
from .graph import build_graph, load_graphs, save_graphs
from .metrics import build_idf, evaluate
from .mil import MilModel, bag_average_precision, train_mil
from .training import MetricsLog, TrainConfig, make_examples, train_scst, train_xe

log = logging.getLogger("cgvrg")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_CHECK = 0, 2, 3, 4

VOCAB = "vocab.json"
MIL_CKPT = "mil.ckpt"
MIL_DIAG = "mil_diagnostics.json"
GRAPHS = "graphs.jsonl"
GENERATIONS = "generations.jsonl"
TRACES = "traces"
REPORT = "eval_report.json"


class PrerequisiteError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifests


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _key(cfg: PipelineConfig, path: Path) -> str:
    path = Path(path)
    try:
        return path.resolve().relative_to(cfg.out.resolve()).as_posix()
    except ValueError:
        return str(path.resolve())


def _resolve(cfg: PipelineConfig, key: str) -> Path:
    p = Path(key)
    return p if p.is_absolute() else cfg.out / p


def write_manifest(cfg: PipelineConfig, stage: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    data = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "inputs": {_key(cfg, p): sha256(p) for p in inputs},
        "outputs": {_key(cfg, p): sha256(p) for p in outputs},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = cfg.out / "manifests" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _manifests(cfg: PipelineConfig) -> list[dict]:
    folder = cfg.out / "manifests"
    if not folder.is_dir():
        return []
    return [json.loads(p.read_text()) for p in sorted(folder.glob("*.json"))]


def require(cfg: PipelineConfig, path: Path, hint: str) -> Path:
    """Missing artifacts and artifacts whose recorded inputs changed are both errors."""
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"missing prerequisite {path} (run '{hint}' first)")
    key = _key(cfg, path)
    for man in _manifests(cfg):
        if key not in man["outputs"]:
            continue
        if sha256(path) != man["outputs"][key]:
            raise PrerequisiteError(f"stale prerequisite {path}: modified after stage '{man['stage']}' wrote it")
        for in_key, digest in man["inputs"].items():
            src = _resolve(cfg, in_key)
            if not src.exists() or sha256(src) != digest:
                raise PrerequisiteError(
                    f"stale prerequisite {path}: its input {src} changed since stage '{man['stage']}' ran; "
                    f"re-run '{man['stage']}'")
    return path


# ---------------------------------------------------------------------------
# stages


def _captioner_ckpt(cfg: PipelineConfig, phase: str) -> Path:
    return cfg.out / f"captioner_{cfg.block.lower()}_{phase}.ckpt"


def _load_vocab(cfg):
    return Vocabularies.load(require(cfg, cfg.out / VOCAB, "build-vocab"))


def _load_corpus(cfg):
    return load_corpus(require(cfg, cfg.corpus, "gen-toy"))


def cmd_gen_toy(cfg: PipelineConfig, args) -> int:
    cfg.corpus.parent.mkdir(parents=True, exist_ok=True)
    generate_toy_corpus(cfg.corpus, cfg.seed, num_images=cfg.toy_images, num_categories=cfg.toy_categories,
                        num_predicates=cfg.toy_predicates, feature_dim=cfg.feature_dim, noise=cfg.toy_noise)
    write_manifest(cfg, "gen-toy", [], [cfg.corpus])
    print(f"wrote {cfg.corpus}")
    return EXIT_OK


def cmd_build_vocab(cfg: PipelineConfig, args) -> int:
    corpus = _load_corpus(cfg)
    vocab = build_vocabularies(corpus, predicate_cap=cfg.predicate_cap, min_word_freq=cfg.min_word_freq)
    out = cfg.out / VOCAB
    vocab.save(out)
    write_manifest(cfg, "build-vocab", [cfg.corpus], [out])
    print(f"wrote {out}: {len(vocab.words)} words, {len(vocab.object_categories)} categories, "
          f"predicates {vocab.predicate_lexicon}")
    return EXIT_OK


def cmd_train_mil(cfg: PipelineConfig, args) -> int:
    corpus = _load_corpus(cfg)
    vocab = _load_vocab(cfg)
    if not vocab.predicate_lexicon:
        raise ConfigError("predicate_cap: the predicate lexicon is empty, nothing to train")
    metrics = MetricsLog(cfg.out / "mil_metrics.jsonl")
    res = train_mil(corpus, vocab, epochs=cfg.mil_epochs, lr=cfg.mil_lr, batch_size=cfg.mil_batch_size,
                    hidden=cfg.mil_hidden, seed=cfg.seed)
    for epoch, loss in enumerate(res.epoch_losses):
        metrics.write(step=epoch + 1, phase="mil", loss=loss)
    ckpt = cfg.out / MIL_CKPT
    ad.save_checkpoint(ckpt, res.model.params, res.model.meta())
    ap = bag_average_precision(corpus, vocab, res.model)
    diag = {
        "bag_average_precision": ap,
        "dropped_triples": res.dropped_triples,
        "bag_stats": res.bag_stats,
        "final_loss": res.epoch_losses[-1] if res.epoch_losses else None,
    }
    (cfg.out / MIL_DIAG).write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    write_manifest(cfg, "train-mil", [cfg.corpus, cfg.out / VOCAB],
                   [ckpt, cfg.out / MIL_DIAG, cfg.out / "mil_metrics.jsonl"])
    print(f"wrote {ckpt}: bag AP {ap:.4f}, {res.dropped_triples} triples without a matching region pair")
    return EXIT_OK


def cmd_build_graphs(cfg: PipelineConfig, args) -> int:
    corpus = _load_corpus(cfg)
    vocab = _load_vocab(cfg)
    params, meta = ad.load_checkpoint(require(cfg, cfg.out / MIL_CKPT, "train-mil"))
    mil = MilModel.from_checkpoint(params, meta)
    graphs = [build_graph(rec, mil, vocab, cfg.threshold, cfg.edge_cap) for rec in corpus]
    out = cfg.out / GRAPHS
    save_graphs(graphs, out, vocab)
    write_manifest(cfg, "build-graphs", [cfg.corpus, cfg.out / VOCAB, cfg.out / MIL_CKPT], [out])
    edges = sum(len(g.predicate_nodes) for g in graphs)
    print(f"wrote {out}: {len(graphs)} graphs, {edges} predicate nodes")
    return EXIT_OK


def _train_config(cfg: PipelineConfig, phase: str, num_images: int) -> TrainConfig:
    if phase == "xe":
        return TrainConfig(phase="xe", epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, gamma=cfg.gamma,
                           seed=cfg.seed, lr_decay_every=cfg.lr_decay_every, lr_decay_rate=cfg.lr_decay_rate,
                           max_len=cfg.max_len)
    steps = cfg.scst_steps
    if cfg.scst_epochs:
        steps = cfg.scst_epochs * -(-num_images // cfg.scst_batch_size)
    return TrainConfig(phase="scst", lr=cfg.scst_lr, batch_size=cfg.scst_batch_size, seed=cfg.seed,
                       scst_steps=steps, max_len=cfg.max_len)


def cmd_train_captioner(cfg: PipelineConfig, args) -> int:
    corpus = _load_corpus(cfg)
    vocab = _load_vocab(cfg)
    require(cfg, cfg.out / MIL_CKPT, "train-mil")
    graph_path = require(cfg, cfg.out / GRAPHS, "build-graphs")
    graphs = load_graphs(graph_path, corpus)
    tag = f"{cfg.block.lower()}_{args.phase}"
    metrics_path = cfg.out / f"{tag}_metrics.jsonl"
    metrics = MetricsLog(metrics_path)
    tc = _train_config(cfg, args.phase, len(corpus))
    inputs = [cfg.corpus, cfg.out / VOCAB, graph_path]
    if args.phase == "xe":
        model = Captioner(vocab, cfg.dims(), cfg.block, seed=cfg.seed)
        ckpt = _captioner_ckpt(cfg, "xe")

        def save_epoch(epoch, m):
            ad.save_checkpoint(ckpt, m.params, {**m.meta(), "epoch": epoch + 1})

        res = train_xe(model, make_examples(corpus, graphs, vocab), tc, metrics, on_epoch_end=save_epoch)
        summary = f"final loss {res.epoch_losses[-1]:.4f}, token accuracy {res.epoch_accuracy[-1]:.4f}" \
            if res.epoch_losses else "no epochs run"
    else:
        start = require(cfg, _captioner_ckpt(cfg, "xe"), "train-captioner --phase xe")
        params, meta = ad.load_checkpoint(start)
        if meta.get("block") != cfg.block:
            raise ConfigError(f"block: {start} was trained as {meta.get('block')}, config says {cfg.block}")
        # fresh optimizer moments for the new objective
        params.m = {k: np.zeros_like(x) for k, x in params.m.items()}
        params.v = {k: np.zeros_like(x) for k, x in params.v.items()}
        params.step = 0
        model = Captioner.from_checkpoint(vocab, params, meta)
        idf = build_idf([[list(c) for c in rec.captions] for rec in corpus])
        res = train_scst(model, corpus, graphs, tc, idf, metrics, track_greedy=not args.no_track)
        summary = f"{tc.scst_steps} steps"
        if res.greedy_cider:
            summary += f", greedy CIDEr-D {res.greedy_cider[0]:.3f} -> {res.greedy_cider[-1]:.3f}"
        inputs.append(start)
    ckpt = _captioner_ckpt(cfg, args.phase)
    if args.phase == "scst" or tc.epochs == 0:
        ad.save_checkpoint(ckpt, model.params, model.meta())
    write_manifest(cfg, f"train-captioner-{tag}", inputs, [ckpt, metrics_path])
    print(f"wrote {ckpt}: {summary}")
    return EXIT_OK


def emit_traces(outputs: Sequence[GenerationOutput], out_dir: str | Path) -> list[Path]:
    """One JSON trace per image: per step the word, tag, 3 tag probabilities and attention rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for gen in outputs:
        steps = []
        for t, word in enumerate(gen.words):
            steps.append({
                "word": word,
                "tag": gen.tags[t],
                "tag_probs": dict(zip(("none", "predicate", "object"), gen.tag_probs[t])),
                "attention_objects": gen.attention_objects[t],
                "attention_predicates": gen.attention_predicates[t],
            })
        record = {"image_id": gen.image_id, "caption": " ".join(gen.words), "num_steps": len(steps),
                  "score": gen.score, "steps": steps}
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in gen.image_id)
        path = out_dir / f"{safe}.json"
        path.write_text(json.dumps(record, indent=1) + "\n")
        paths.append(path)
    return paths


def cmd_generate(cfg: PipelineConfig, args) -> int:
    beam = args.beam if args.beam is not None else cfg.beam
    if beam < 1:
        raise ConfigError(f"beam: must be >= 1, got {beam}")
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    else:
        scst = _captioner_ckpt(cfg, "scst")
        ckpt = scst if scst.exists() else _captioner_ckpt(cfg, "xe")
    ckpt = require(cfg, ckpt, "train-captioner")
    corpus = _load_corpus(cfg)
    vocab = _load_vocab(cfg)
    graph_path = require(cfg, cfg.out / GRAPHS, "build-graphs")
    graphs = load_graphs(graph_path, corpus)
    params, meta = ad.load_checkpoint(ckpt)
    model = Captioner.from_checkpoint(vocab, params, meta)
    outputs = [model.beam_search(graphs[rec.image_id], beam, cfg.max_len)[0] for rec in corpus]
    out = cfg.out / GENERATIONS
    with open(out, "w", encoding="utf-8") as fh:
        for gen in outputs:
            fh.write(json.dumps(gen.to_json(), separators=(",", ":")) + "\n")
    traces = emit_traces(outputs, cfg.out / TRACES)
    write_manifest(cfg, "generate", [cfg.corpus, cfg.out / VOCAB, graph_path, ckpt], [out, *traces])
    print(f"wrote {out} and {len(traces)} traces (beam {beam}, checkpoint {ckpt.name})")
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    corpus = _load_corpus(cfg)
    gen_path = require(cfg, cfg.out / GENERATIONS, "generate")
    by_id = {}
    with open(gen_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                by_id[obj["image_id"]] = obj["words"]
    missing = [rec.image_id for rec in corpus if rec.image_id not in by_id]
    if missing:
        raise PrerequisiteError(f"{gen_path} lacks generations for {missing[:5]}")
    cands = [by_id[rec.image_id] for rec in corpus]
    refs = [[list(c) for c in rec.captions] for rec in corpus]
    report = evaluate(cands, refs, image_ids=[rec.image_id for rec in corpus])
    out = cfg.out / REPORT
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(cfg, "evaluate", [cfg.corpus, gen_path], [out])
    for k in ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr-D"):
        print(f"{k:8s} {report[k]:.4f}")
    print("METEOR, SPICE: not computed (absent)")
    return EXIT_OK


def cmd_selfcheck(cfg: PipelineConfig, args) -> int:
    from .selfcheck import run_all

    results = run_all(full=not args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} {r.detail} ({r.seconds:.1f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "build-vocab": cmd_build_vocab,
    "train-mil": cmd_train_mil,
    "build-graphs": cmd_build_graphs,
    "train-captioner": cmd_train_captioner,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgvrg", description="Caption-guided relationship graph captioning pipeline")
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--preset", default="desk", help="base values: desk (default) or full-scale")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable, wins over the file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "train-captioner":
            p.add_argument("--phase", choices=("xe", "scst"), required=True)
            p.add_argument("--no-track", action="store_true", help="skip per-step greedy CIDEr-D during scst")
        elif name == "generate":
            p.add_argument("--beam", type=int, default=None)
            p.add_argument("--checkpoint", default=None)
        elif name == "selfcheck":
            p.add_argument("--quick", action="store_true", help="fewer beam-search oracle seeds")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(args.overrides), args.preset)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, CorpusError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ


if __name__ == "__main__":
    sys.exit(main())
