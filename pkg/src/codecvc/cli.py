"""Command-line entry points: ``gen-data``, ``train``, ``synth``, ``segment``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import wave
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, load_config
from .corpus import gen_corpus
from .inference import GuidanceConfig, segment_text, synthesize
from .model import ModelConfig, VoiceCloneLM
from .seeding import derive_seed
from .text_encoder import CharVocab
from .training import Trainer, TrainState, assemble_example, make_optimizer
from .vocab import AcousticGrid, ValidationError, read_records, write_records

log = logging.getLogger("codecvc")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_corpus(path: str | None, cfg: RunConfig):
    if path:
        with open(path, encoding="utf-8") as fh:
            return list(read_records(fh))
    return [u.to_record() for u in gen_corpus(cfg.corpus.size, cfg.seed, cfg.vocab, config=cfg.corpus)]


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = gen_corpus(cfg.corpus.size, cfg.seed, cfg.vocab, config=cfg.corpus)
    with open(out / "corpus.txt", "w", encoding="utf-8") as fh:
        write_records([u.to_record() for u in corpus], fh)
    with open(out / "corpus_config.json", "w", encoding="utf-8") as fh:
        json.dump({**cfg.corpus.to_dict(), "vocab": cfg.vocab.to_dict()}, fh, indent=2)
    cfg.dump(out / "effective_config.yaml")
    print(f"wrote {len(corpus)} utterances to {out / 'corpus.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "effective_config.yaml")
    records = _load_corpus(cfg.data.train_corpus, cfg)
    finetune = _load_corpus(cfg.data.finetune_corpus, cfg) if cfg.data.finetune_corpus else None

    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        model = ck.model
        optimizer = make_optimizer(model, cfg.train)
        if ck.optimizer_state is not None:
            optimizer.load_state_dict(ck.optimizer_state)
        if ck.rng_state is not None:
            torch.set_rng_state(ck.rng_state)
        state = TrainState(ck.step)
        log.info("resumed from %s at step %d", args.checkpoint, ck.step)
    else:
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        texts = [r.text for r in records] + [r.text for r in (finetune or [])]
        mcfg = ModelConfig(cfg.vocab, cfg.backbone, cfg.text, CharVocab.from_texts(texts))
        model = VoiceCloneLM(mcfg)
        optimizer = make_optimizer(model, cfg.train)
        state = TrainState(0)

    mc = model.config

    def examples(recs):
        return [assemble_example(r.text, r.st, r.at, mc.vocab, mc.backbone, mc.chars) for r in recs]

    trainer = Trainer(model, examples(records), cfg.train, examples(finetune) if finetune else None,
                      optimizer=optimizer, state=state)
    extra = {"run_config": cfg.to_dict()}

    def on_step(tr: Trainer, rec: dict):
        if rec["step"] % 50 == 0:
            log.info("step %d loss %.4f lr %.2e", rec["step"], rec["loss"], rec["lr"])
        every = cfg.train.checkpoint_every
        if every and rec["step"] % every == 0:
            save_checkpoint(out / "checkpoints" / f"step_{rec['step']:07d}.ckpt", tr.model, rec["step"],
                            tr.optimizer, extra)

    until = cfg.train.steps if args.until is None else min(args.until, cfg.train.steps)
    trainer.run(until=until, log_path=out / "metrics.jsonl", on_step=on_step)
    save_checkpoint(out / "model.ckpt", model, trainer.state.step, optimizer, extra)
    print(f"trained to step {trainer.state.step}; checkpoint {out / 'model.ckpt'}")
    return 0


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = (np.clip(samples, -1.0, 1.0) * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def _read_requests(args) -> list[dict]:
    if args.request:
        path = Path(args.request)
        if not path.is_file():
            raise FileNotFoundError(f"request file not found: {path}")
        reqs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        reqs.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return reqs
    if args.text is None:
        raise ValueError("give --text or --request")
    req = {"text": args.text}
    if args.prompt_id:
        req["prompt_id"] = args.prompt_id
    return [req]


def cmd_synth(args) -> int:
    ck = load_checkpoint(args.checkpoint, with_optimizer=False)
    model = ck.model
    run = ck.meta.get("extra", {}).get("run_config")
    cfg = load_config(args.config) if args.config else (config_from_dict(run) if run else config_from_dict({}))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    overrides = {k: getattr(args, k) for k in ("gamma", "alpha", "beta", "temperature", "top_k")
                 if getattr(args, k) is not None}
    base_guidance = replace(cfg.guidance, **overrides)
    corpus = {}
    if args.corpus:
        with open(args.corpus, encoding="utf-8") as fh:
            corpus = {r.id: r for r in read_records(fh)}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "effective_config.yaml")
    responses = []
    for i, req in enumerate(_read_requests(args)):
        rid = str(req.get("id", f"req{i:04d}"))
        g = replace(base_guidance, **(req.get("guidance") or {}))
        if "seed" in req:
            g = replace(g, seed=int(req["seed"]))
        prompt = None
        if req.get("prompt_id"):
            if req["prompt_id"] not in corpus:
                raise ValueError(f"prompt utterance {req['prompt_id']!r} not found (pass --corpus)")
            prompt = corpus[req["prompt_id"]]
        elif req.get("prompt_at") is not None:
            prompt = AcousticGrid(np.asarray(req["prompt_at"], dtype=np.int64).reshape(-1, model.vocab.num_codebooks))
        resp, samples = synthesize(model, req["text"], g, prompt, args.min_seg_len, args.gap_ms,
                                   cfg.corpus.sample_rate, cfg.corpus.downsample, args.debug_dump_scores)
        resp["id"] = rid
        resp["guidance"] = g.to_dict()
        wav = out / f"{rid}.wav"
        write_wav(wav, samples, cfg.corpus.sample_rate)
        resp["wav"] = wav.name
        responses.append(resp)
    with open(out / "responses.jsonl", "w", encoding="utf-8") as fh:
        for r in responses:
            fh.write(json.dumps(r) + "\n")
    print(f"wrote {len(responses)} responses to {out / 'responses.jsonl'}")
    return 0


def cmd_segment(args) -> int:
    if args.file:
        text = Path(args.file).read_text(encoding="utf-8")
    elif args.text is not None:
        text = args.text
    else:
        text = sys.stdin.read()
    for seg in segment_text(text, args.min_seg_len):
        print(json.dumps(seg, ensure_ascii=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codecvc", description="Two-stage codec language model for voice cloning.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train (or resume with --checkpoint)")
    t.add_argument("--config", required=True)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="run")
    t.add_argument("--until", type=int, help="stop after this many total steps")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--request", help="JSONL request file")
    s.add_argument("--text")
    s.add_argument("--prompt-id")
    s.add_argument("--corpus", help="record file used to resolve prompt ids")
    s.add_argument("--seed", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--temperature", type=float)
    s.add_argument("--top-k", dest="top_k", type=int)
    s.add_argument("--min-seg-len", type=int, default=30)
    s.add_argument("--gap-ms", type=float, default=100.0)
    s.add_argument("--debug-dump-scores", action="store_true")
    s.add_argument("--out", default="synth")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("segment", help="split long text at punctuation")
    c.add_argument("text", nargs="?")
    c.add_argument("--file")
    c.add_argument("--min-seg-len", type=int, default=30)
    c.set_defaults(func=cmd_segment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, CheckpointError, ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
