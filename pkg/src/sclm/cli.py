"""``sclm`` command line: pretrain, finetune, eval, sample, inspect-masks.

Failures print one JSON object on stderr, e.g.
``{"error": "missing_file", "code": 3, "detail": "..."}``, and exit with the
code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import re
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig
from .config import load as load_config
from .evalharness import (EpisodeError, EvalEpisode, TaskRecord, beam_search, evaluate,
                          greedy_decode, read_tasks, strip_stop)
from .masks import VARIANTS, causal_mask, noncausal_mask, prefix_mask, semicausal_flow
from .spans import LayoutError, SpanLayout
from .textdata import BOS, decode, encode, pack_examples, read_corpus
from .training import (CheckpointFormatError, CheckpointIntegrityError, FreezePolicy,
                       TrainingDiverged, finetune_examples, load_checkpoint, save_checkpoint,
                       train)

EXIT_CODES = {
    "failure": 1,
    "usage": 2,
    "missing_file": 3,
    "parse_error": 4,
    "version_mismatch": 5,
    "corrupt_checkpoint": 6,
    "config_mismatch": 7,
}


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind
        self.detail = detail

    @property
    def code(self) -> int:
        return EXIT_CODES[self.kind]

    def line(self) -> str:
        return json.dumps({"error": self.kind, "code": self.code, "detail": self.detail})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# -- shared helpers ----------------------------------------------------------

def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError("usage", f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{what} not found: {path}")
    return p


def _config(path: str | None, seed: int | None) -> RunConfig | None:
    if path is None:
        return None
    try:
        cfg = load_config(_existing(path, "config"))
    except ConfigError as exc:
        raise CliError("parse_error", f"config: {exc}") from None
    return cfg if seed is None else cfg.replace(seed=seed)


def _checkpoint(path: str | None):
    p = _existing(path, "checkpoint")
    try:
        return load_checkpoint(p)
    except CheckpointFormatError as exc:
        raise CliError("version_mismatch", str(exc)) from None
    except CheckpointIntegrityError as exc:
        raise CliError("corrupt_checkpoint", str(exc)) from None
    except ConfigError as exc:
        raise CliError("parse_error", f"embedded config: {exc}") from None


def _merge(cfg: RunConfig | None, stored: RunConfig, seed: int | None) -> RunConfig:
    """The run config: ``--config`` if given (its model must match the checkpoint)."""
    if cfg is None:
        cfg = stored if seed is None else stored.replace(seed=seed)
    elif cfg.model != stored.model:
        raise CliError("config_mismatch", "model section differs from the checkpoint's")
    return cfg


def _tasks(path: str | None) -> list[TaskRecord]:
    p = _existing(path, "task")
    try:
        return read_tasks(p)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError("parse_error", f"task file: {exc}") from None


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _beside(ckpt: Path, suffix: str) -> Path:
    return ckpt.with_name(ckpt.name + suffix)


def _write_run(ckpt: Path, params, state, cfg: RunConfig, report) -> None:
    save_checkpoint(params, state, ckpt, cfg)
    head = json.dumps({"kind": "config", "canonical": cfg.canonical()})
    _beside(ckpt, ".report.jsonl").write_text(report.to_jsonl() + head + "\n")
    final = report.steps[-1].loss if report.steps else float("nan")
    print(f"checkpoint {ckpt} sha256 {file_digest(ckpt)}")
    print(f"steps {len(report.steps)} final_loss {final:.6f} "
          f"seed {report.seed} config {report.config_checksum}")


# -- commands ----------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _config(args.config, args.seed)
    if cfg is None:
        raise CliError("usage", "--config is required")
    docs = read_corpus(_existing(args.corpus, "corpus"))
    if not any(docs):
        raise CliError("parse_error", "corpus has no documents")
    ckpt = Path(args.checkpoint or "pretrain.ckpt")
    run_dir = _beside(ckpt, ".run") if cfg.train.checkpoint_every else None
    params, state, report = train(cfg, docs, out_dir=run_dir, steps=args.steps)
    _write_run(ckpt, params, state, cfg, report)
    return 0


def cmd_finetune(args) -> int:
    params, _, stored = _checkpoint(args.checkpoint)
    cfg = _merge(_config(args.config, args.seed), stored, args.seed)
    records = _tasks(args.task)
    pairs = [(encode(x), encode(y)) for rec in records for x, y in rec.demos]
    errors: list = []
    seqs = list(pack_examples(pairs, cfg.train.seq_len, errors))
    if not seqs:
        raise CliError("parse_error", "no finetuning examples fit the sequence length")
    policy = FreezePolicy(args.policy or "single_task")
    steps = cfg.train.finetune_epochs * math.ceil(len(seqs) / cfg.train.batch_size)
    cfg = cfg.replace(schedule=type(cfg.schedule)(cfg.schedule.peak_lr,
                                                  min(cfg.schedule.warmup, steps // 10), steps))
    params, state, report = train(cfg, finetune_examples(seqs), policy=policy, params=params)
    out = Path(args.out or Path(args.checkpoint).with_suffix(".ft.ckpt"))
    _write_run(out, params, state, report_config(cfg, policy), report)
    if errors:
        print(f"skipped {len(errors)} over-length examples")
    return 0


def report_config(cfg: RunConfig, policy: FreezePolicy) -> RunConfig:
    return cfg.replace(train=type(cfg.train)(**{**cfg.train.__dict__, "policy": policy.value}))


def cmd_eval(args) -> int:
    params, _, stored = _checkpoint(args.checkpoint)
    cfg = _merge(_config(args.config, args.seed), stored, args.seed)
    records = _tasks(args.task)
    mode = args.mode
    k = args.k if args.k is not None else 0
    if mode == "icl" and args.k is None:
        raise CliError("usage", "--mode icl needs --k")
    if mode != "icl" and k != 0:
        raise CliError("usage", f"--mode {mode} runs zero-shot; drop --k or use --mode icl")
    ev = cfg.eval
    beam_size = args.beam_size or ev.beam_size
    alpha = ev.alpha if args.alpha is None else args.alpha
    try:
        res = evaluate(params, records, k, decode=args.decode, max_new=args.max_new or ev.max_new,
                       beam_size=beam_size, alpha=alpha)
    except EpisodeError as exc:
        raise CliError("parse_error", f"episode: {exc}") from None
    table = (f"{'mode':<10}{'k':>3}  {'decode':<7}{'episodes':>9}{'exact_match':>13}"
             f"{'token_f1':>10}\n"
             f"{mode:<10}{k:>3}  {args.decode:<7}{res.episodes:>9}{res.exact_match:>13.4f}"
             f"{res.token_f1:>10.4f}")
    print(table)
    report = {"kind": "eval", "mode": mode, "k": k, "decode": args.decode,
              "beam_size": beam_size, "alpha": alpha, "episodes": res.episodes,
              "exact_match": res.exact_match, "token_f1": res.token_f1,
              "seed": cfg.seed, "config_checksum": cfg.checksum(),
              "checkpoint_sha256": file_digest(args.checkpoint),
              "task": str(args.task), "config": cfg.canonical(), "predictions": res.predictions}
    out = _beside(Path(args.checkpoint), f".eval-{mode}-k{k}-{args.decode}.json")
    out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"report {out}")
    return 0


def parse_prompt(text: str) -> tuple[list[int], list[tuple[int, int]]]:
    """``[...]`` segments become non-causal spans; returns BOS-led ids and 1-based spans."""
    ids, spans = [BOS], []
    pos = 0
    for m in re.finditer(r"\[([^\[\]]*)\]", text):
        ids.extend(encode(text[pos:m.start()]))
        inner = encode(m.group(1))
        if not inner:
            raise CliError("parse_error", "empty [] span in prompt")
        spans.append((len(ids) + 1, len(ids) + 1 + len(inner)))
        ids.extend(inner)
        pos = m.end()
    rest = text[pos:]
    if "[" in rest or "]" in rest:
        raise CliError("parse_error", "unbalanced brackets in prompt")
    ids.extend(encode(rest))
    return ids, spans


def cmd_sample(args) -> int:
    params, _, stored = _checkpoint(args.checkpoint)
    cfg = _merge(_config(args.config, args.seed), stored, args.seed)
    ids, spans = parse_prompt(args.prompt)
    limit = cfg.model.decoder.max_len
    if len(ids) >= limit:
        raise CliError("parse_error", f"prompt of {len(ids)} tokens leaves no room under {limit}")
    episode = EvalEpisode(tuple(ids), SpanLayout(len(ids), tuple(spans)), (), ())
    room = min(args.max_new or cfg.eval.max_new, limit - len(ids))
    if args.decode == "beam":
        out = beam_search(params, episode, args.beam_size or cfg.eval.beam_size,
                          cfg.eval.alpha if args.alpha is None else args.alpha, room)
    else:
        out = greedy_decode(params, episode, room)
    print(decode(strip_stop(out)))
    return 0


def parse_layout(spec: str, n: int) -> SpanLayout:
    """``"2:4,6:8"`` or ``"[2,4) [6,8)"``: 1-based half-open spans."""
    pairs = re.findall(r"(\d+)\s*[:,]\s*(\d+)", spec)
    leftover = re.sub(r"(\d+)\s*[:,]\s*(\d+)", "", spec)
    if not pairs or re.search(r"[^\s,\[\)]", leftover):
        raise CliError("parse_error", f"bad layout spec {spec!r}")
    try:
        return SpanLayout(n, tuple((int(a), int(b)) for a, b in pairs))
    except LayoutError as exc:
        raise CliError("parse_error", f"layout: {exc}") from None


def cmd_inspect_masks(args) -> int:
    n = args.n
    if n < 1:
        raise CliError("usage", "n must be positive")
    if args.variant == "causal":
        mask = causal_mask(n)
    elif args.variant == "noncausal":
        mask = noncausal_mask(n)
    elif args.variant == "prefix":
        if args.prefix is None or not 0 <= args.prefix <= n:
            raise CliError("usage", f"prefix needs --prefix in [0, {n}]")
        mask = prefix_mask(n, args.prefix)
    else:
        layout = parse_layout(args.layout, n) if args.layout else SpanLayout(n)
        mask = semicausal_flow(layout)
    print(mask.render(on=args.on, off=args.off))
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sclm", description="Semi-causal language modeling toolkit.")
    p.add_argument("--version", action="version", version=f"sclm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--seed", type=int)

    def decoding(sp):
        sp.add_argument("--decode", choices=("greedy", "beam"), default="greedy")
        sp.add_argument("--beam-size", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--max-new", type=int)

    sp = sub.add_parser("pretrain", help="train from scratch on a text corpus")
    common(sp, config_required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", help="output checkpoint path")
    sp.add_argument("--steps", type=int, help="override the schedule length")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="finetune on the demonstrations of a task file")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--policy", choices=[f.value for f in FreezePolicy])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="score a task file zero-shot or in context")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--mode", choices=("zero", "icl", "finetuned"), default="zero")
    sp.add_argument("--k", type=int)
    decoding(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="continue a prompt; [..] marks encoded spans")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    decoding(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("inspect-masks", help="render a visibility mask")
    sp.add_argument("variant", choices=VARIANTS)
    sp.add_argument("n", type=int)
    sp.add_argument("--layout", help='spans like "2:4,6:8" (semicausal)')
    sp.add_argument("--prefix", type=int, help="prefix length (prefix variant)")
    sp.add_argument("--on", default="█")
    sp.add_argument("--off", default="·")
    sp.set_defaults(func=cmd_inspect_masks)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.code
    except TrainingDiverged as exc:
        print(CliError("failure", str(exc)).line(), file=sys.stderr)
        return EXIT_CODES["failure"]
    except OSError as exc:
        kind = "missing_file" if isinstance(exc, FileNotFoundError) else "failure"
        print(CliError(kind, str(exc)).line(), file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
