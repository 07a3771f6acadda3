"""Zero-/few-shot episodes, greedy and beam decoding, metrics and synthetic tasks."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .model import MetaLMParameters, forward
from .spans import SpanLayout
from .textdata import BOS, EOD, EOP, PackedSequence, encode

STOP_IDS = (EOP, EOD)


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class EvalEpisode:
    ids: tuple[int, ...]
    layout: SpanLayout
    gold: tuple[int, ...]
    label_positions: tuple[int, ...] = ()

    @property
    def cutoff(self) -> int:
        """Number of prompt tokens; generation starts at 1-based position cutoff + 1."""
        return len(self.ids)


def _ids(x) -> list[int]:
    return encode(x) if isinstance(x, (str, bytes)) else [int(t) for t in x]


def build_icl_episode(demos: Sequence[tuple], test_input, k: int | None = None,
                      gold=(), max_len: int | None = None, instruction="") -> EvalEpisode:
    """Assemble ``<s> [in_1] label_1 </s> ... [in_k] label_k </s> [test]``.

    Bracketed inputs become non-causal spans; labels and delimiters are plain
    tokens. The prompt ends right after the test span, so the first answer
    token is predicted from the span's last position. An ``instruction`` is
    prepended to the test input inside its span.
    """
    if k is None:
        k = len(demos)
    if k != len(demos):
        raise EpisodeError(f"k={k} but {len(demos)} demonstrations given")
    ids = [BOS]
    spans = []
    labels = []
    for inp, label in demos:
        inp_ids = _ids(inp)
        if not inp_ids:
            raise EpisodeError("empty demonstration input")
        spans.append((len(ids) + 1, len(ids) + 1 + len(inp_ids)))
        ids.extend(inp_ids)
        lab = _ids(label)
        labels.extend(range(len(ids) + 1, len(ids) + 1 + len(lab)))
        ids.extend(lab)
        ids.append(EOP)
    test = _ids(test_input)
    if not test:
        raise EpisodeError("empty test input")
    test = _ids(instruction) + test
    spans.append((len(ids) + 1, len(ids) + 1 + len(test)))
    ids.extend(test)
    if max_len is not None and len(ids) >= max_len:
        raise EpisodeError(f"episode of {len(ids)} tokens leaves no room under {max_len}")
    return EvalEpisode(tuple(ids), SpanLayout(len(ids), tuple(spans)), tuple(_ids(gold)),
                       tuple(labels))


# -- decoding ----------------------------------------------------------------

StepFn = Callable[[Sequence[int]], np.ndarray]


def model_step_fn(params: MetaLMParameters, episode: EvalEpisode) -> StepFn:
    """Log-probabilities of the next token after ``episode.ids + generated``.

    Generated tokens are appended as plain (causal) positions; the whole
    sequence is re-run each call since there is no key/value cache.
    """
    limit = params.config.decoder.max_len

    def step(generated: Sequence[int]) -> np.ndarray:
        ids = np.array(list(episode.ids) + list(generated), dtype=np.int64)
        n = len(ids)
        if n > limit:
            raise EpisodeError(f"decoding would exceed the decoder limit {limit}")
        layout = SpanLayout(n, episode.layout.spans, episode.layout.modalities)
        seq = PackedSequence(ids, [(0, n)])
        with nx.no_grad():
            logits = forward([seq], [layout], params).data[0, -1].astype(np.float64)
        return nx.log_softmax(logits)

    return step


def greedy(step: StepFn, max_new: int, stop_ids=STOP_IDS) -> list[int]:
    out: list[int] = []
    for _ in range(max_new):
        lp = step(out)
        tok = int(np.argmax(lp))  # first maximum = lowest id on ties
        out.append(tok)
        if tok in stop_ids:
            break
    return out


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class BeamState:
    size: int
    alpha: float
    alive: list[tuple[list[int], float]] = field(default_factory=lambda: [([], 0.0)])
    finished: list[tuple[list[int], float]] = field(default_factory=list)

    def score(self, hyp: tuple[list[int], float]) -> float:
        return hyp[1] / length_penalty(len(hyp[0]), self.alpha)

    def done(self) -> bool:
        """``size`` completions exist and no live hypothesis, scored at its
        current length, beats the worst of the best ``size`` completions."""
        if len(self.finished) < self.size:
            return False
        kept = sorted((self.score(h) for h in self.finished), reverse=True)[:self.size]
        return max(self.score(h) for h in self.alive) <= kept[-1]

    def best(self) -> list[int]:
        pool = self.finished or self.alive
        scored = [(lp / length_penalty(len(y), self.alpha), -i, y) for i, (y, lp) in enumerate(pool)]
        return max(scored, key=lambda t: (t[0], t[1]))[2]


def beam(step: StepFn, max_new: int, size: int = 4, alpha: float = 0.6,
         stop_ids=STOP_IDS) -> list[int]:
    """Length-penalised beam search, lp(Y) = ((5 + |Y|) / 6) ** alpha.

    Each round ranks all one-token extensions of the live hypotheses by
    cumulative log-probability (ties: lower token id, then lower hypothesis
    index). A stop-token extension ranked within the top ``size`` completes a
    hypothesis; other extensions refill the live set up to ``size``. Search
    ends when ``max_new`` tokens have been generated (live hypotheses then
    count as complete) or when ``BeamState.done`` says no live hypothesis can
    still beat the completed ones. The winner
    maximises log-probability divided by lp(|Y|), where |Y| includes the stop
    token.
    """
    if size < 1:
        raise ValueError("beam size must be at least 1")
    state = BeamState(size, alpha)
    if max_new <= 0:
        return []
    for t in range(max_new):
        cands = []
        for h, (y, score) in enumerate(state.alive):
            lp = step(y)
            for tok in range(len(lp)):
                step_lp = float(lp[tok])
                # equal totals fall back to the step score so B=1 mirrors argmax
                cands.append((-(score + step_lp), -step_lp, tok, h))
        cands.sort()
        alive = []
        for rank, (neg, _, tok, h) in enumerate(cands):
            y = state.alive[h][0] + [tok]
            if tok in stop_ids:
                if rank < size:
                    state.finished.append((y, -neg))
            elif len(alive) < size:
                alive.append((y, -neg))
            if len(alive) == size and rank >= size - 1:
                break
        state.alive = alive
        if t == max_new - 1:
            state.finished.extend(alive)
            break
        if not alive or state.done():
            break
    return state.best()


def greedy_decode(params: MetaLMParameters, episode: EvalEpisode, max_new: int) -> list[int]:
    if max_new <= 0:
        return []
    return greedy(model_step_fn(params, episode), max_new)


def beam_search(params: MetaLMParameters, episode: EvalEpisode, B: int = 4, alpha: float = 0.6,
                max_new: int = 16) -> list[int]:
    return beam(model_step_fn(params, episode), max_new, B, alpha)


def strip_stop(ids: Sequence[int]) -> list[int]:
    out = []
    for t in ids:
        if t in STOP_IDS:
            break
        out.append(int(t))
    return out


# -- metrics -----------------------------------------------------------------

def exact_match(pred: Sequence[int], gold: Sequence[int]) -> int:
    return int(list(pred) == list(gold))


def token_f1(pred: Sequence[int], gold: Sequence[int]) -> float:
    """Bag-of-tokens F1; two empty sequences score 1."""
    if not pred and not gold:
        return 1.0
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


# -- synthetic tasks ---------------------------------------------------------

@dataclass
class TaskRecord:
    demos: list[tuple[str, str]]
    test_input: str
    gold: str

    def to_json(self) -> str:
        return json.dumps({"demos": [{"input": i, "label": l} for i, l in self.demos],
                           "test_input": self.test_input, "gold": self.gold})

    @classmethod
    def from_json(cls, line: str) -> "TaskRecord":
        d = json.loads(line)
        return cls([(x["input"], x["label"]) for x in d["demos"]], d["test_input"], d["gold"])

    def shots(self, k: int) -> list[tuple[str, str]]:
        """``k`` demonstrations, always including one whose input is the test input if any does."""
        if k >= len(self.demos):
            return list(self.demos)
        if k == 0:
            return []
        hit = [i for i, (x, _) in enumerate(self.demos) if x == self.test_input]
        chosen = hit[:1]
        for i in range(len(self.demos)):
            if len(chosen) == k:
                break
            if i not in chosen:
                chosen.append(i)
        return [self.demos[i] for i in sorted(chosen)]


KEY_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
VALUE_ALPHABET = "0123456789"


def gen_kv_recall(rng: np.random.Generator, vocab: str = KEY_ALPHABET, pairs: int = 2,
                  queries: int = 100, key_len: int = 3, values: str = VALUE_ALPHABET,
                  value_len: int = 1) -> list[TaskRecord]:
    """Key-to-value recall: ``pairs`` fresh key/value demos, query one of the keys."""
    out = []
    for _ in range(queries):
        keys: list[str] = []
        while len(keys) < pairs:
            key = "".join(rng.choice(list(vocab), size=key_len))
            if key not in keys:
                keys.append(key)
        vals = ["".join(rng.choice(list(values), size=value_len)) for _ in keys]
        q = int(rng.integers(pairs))
        out.append(TaskRecord(list(zip(keys, vals)), keys[q], vals[q]))
    return out


def gen_toy_classify(rng: np.random.Generator, queries: int = 100, length: int = 7,
                     pairs: int = 2) -> list[TaskRecord]:
    """Majority vote over a/b strings with textual labels ``yes``/``no``."""

    def sample():
        s = "".join(rng.choice(["a", "b"], size=length))
        return s, "yes" if s.count("a") > s.count("b") else "no"

    out = []
    for _ in range(queries):
        demos = [sample() for _ in range(pairs)]
        x, y = sample()
        out.append(TaskRecord(demos, x, y))
    return out


def solvable_from_demos(rec: TaskRecord) -> bool:
    """Brute-force check that the gold answer is recoverable by key lookup in the demos."""
    answers = {label for x, label in rec.demos if x == rec.test_input}
    return answers == {rec.gold}


def kv_document(rng: np.random.Generator, pairs: int = 2, repeats: int = 2, key_len: int = 3,
                value_len: int = 1) -> list[str]:
    """Pretraining document of kv paragraphs: ``pairs`` bindings, then ``repeats`` recalls."""
    rec = gen_kv_recall(rng, pairs=pairs, queries=1, key_len=key_len, value_len=value_len)[0]
    paras = [k + v for k, v in rec.demos]
    for _ in range(repeats):
        k, v = rec.demos[int(rng.integers(pairs))]
        paras.append(k + v)
    return paras


def read_tasks(path: str | Path) -> list[TaskRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TaskRecord.from_json(line) for line in lines if line.strip()]


def write_tasks(records: Iterable[TaskRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


# -- evaluation loop ---------------------------------------------------------

@dataclass
class EvalResult:
    episodes: int
    exact_match: float
    token_f1: float
    predictions: list[str]


def evaluate(params: MetaLMParameters, records: Sequence[TaskRecord], k: int,
             decode: str = "greedy", max_new: int = 8, beam_size: int = 4,
             alpha: float = 0.6) -> EvalResult:
    em, f1, preds = [], [], []
    limit = params.config.decoder.max_len
    for rec in records:
        ep = build_icl_episode(rec.shots(k), rec.test_input, gold=rec.gold, max_len=limit)
        room = min(max_new, limit - ep.cutoff)
        if decode == "beam":
            out = beam_search(params, ep, beam_size, alpha, room)
        else:
            out = greedy_decode(params, ep, room)
        pred = strip_stop(out)
        em.append(exact_match(pred, ep.gold))
        f1.append(token_f1(pred, list(ep.gold)))
        preds.append(bytes(t for t in pred if t < 256).decode("utf-8", errors="replace"))
    n = len(records)
    return EvalResult(n, float(np.mean(em)) if n else 0.0, float(np.mean(f1)) if n else 0.0, preds)
