"""Adam with decoupled weight decay, warmup plus linear decay, freeze policies,
the training loop, and the ``SCCK`` checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import RunConfig, loads as config_loads
from .model import MetaLMParameters, init_params, semicausal_loss
from .numerics import ContractError
from .spans import SpanLayout, sample_spans
from .textdata import PackedSequence, pack_corpus

log = logging.getLogger(__name__)


class FreezePolicy(str, Enum):
    PRETRAIN = "pretrain"
    SINGLE_TASK = "single_task"
    FULL = "full"


def _encoder_layer(name: str) -> int | None:
    parts = name.split(".")
    if len(parts) > 2 and parts[2].isdigit():
        return int(parts[2])
    return None


def apply_policy(params: MetaLMParameters, policy: FreezePolicy | str) -> None:
    """Set per-leaf trainable flags.

    pretrain: decoder, shared embedding and connectors train; each encoder is
    frozen except its last two blocks and final layer norm.
    single_task: encoders and connectors train; decoder and embedding frozen.
    full: everything trains.
    """
    policy = FreezePolicy(policy)
    layers = {m: mc.encoder.layers for m, mc in params.config.modalities.items()}

    def pretrain(name: str) -> bool:
        if not name.startswith("enc."):
            return True
        mod = name.split(".")[1]
        idx = _encoder_layer(name)
        if idx is not None:
            return idx >= layers[mod] - 2
        return ".ln_f." in name

    rules = {
        FreezePolicy.PRETRAIN: pretrain,
        FreezePolicy.SINGLE_TASK: lambda n: n.startswith(("enc.", "conn.")),
        FreezePolicy.FULL: lambda n: True,
    }
    params.set_trainable(rules[policy])
    if not any(params.trainable.values()):
        raise ContractError(f"policy {policy.value} leaves nothing trainable")


# -- schedule ----------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    peak: float
    warmup: int
    total: int


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    W, S = schedule.warmup, schedule.total
    if W > 0 and step < W:
        return schedule.peak * step / W
    if step >= S:
        return 0.0
    return schedule.peak * (S - step) / (S - W)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01


def decays(name: str, value: np.ndarray) -> bool:
    return value.ndim >= 2


def adam_step(params: MetaLMParameters, grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay on matrices.

    Frozen leaves are skipped even if a gradient is supplied for them.
    """
    trainable = params.trainable_items()
    for name, _ in trainable:
        if name not in grads:
            raise ContractError(f"no gradient for trainable leaf {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in trainable:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name, p.data):
            update = update + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return norm


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SCCK"
CKPT_VERSION = 1
_M, _V = "__adam_m__.", "__adam_v__."


class CheckpointFormatError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


def save_checkpoint(params: MetaLMParameters, state: OptimizerState, path: str | Path,
                    config: RunConfig) -> None:
    """Write the versioned ``SCCK`` file.

    Layout: magic, version u32, config length u32 + canonical config text,
    tensor count u32, tensors (name length u32, name, rank u32, extents u32[],
    little-endian f32 data) with Adam moments under reserved prefixes, step
    counter u64, then a CRC32 of everything before it.
    """
    blob = bytearray(CKPT_MAGIC)
    blob += struct.pack("<I", CKPT_VERSION)
    text = config.canonical().encode("utf-8")
    blob += struct.pack("<I", len(text)) + text
    named = list(params.items())
    named += [(_M + k, nx.Tensor(a)) for k, a in sorted(state.m.items())]
    named += [(_V + k, nx.Tensor(a)) for k, a in sorted(state.v.items())]
    blob += struct.pack("<I", len(named))
    for name, t in named:
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw)) + raw
        blob += struct.pack("<I", t.ndim)
        blob += struct.pack(f"<{t.ndim}I", *t.shape)
        blob += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    blob += struct.pack("<Q", state.step)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.data):
            raise CheckpointIntegrityError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + k]
        self.pos += k
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> tuple[MetaLMParameters, OptimizerState, RunConfig]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("not an SCCK checkpoint")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(data) < 8 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CheckpointIntegrityError("checkpoint checksum mismatch (truncated or corrupt)")
    config = config_loads(r.take(r.u32()).decode("utf-8"))
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = arr
    step = struct.unpack("<Q", r.take(8))[0]
    params = init_params(config.model, seed=0)
    for name in params:
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != params[name].shape:
            raise CheckpointFormatError(f"shape mismatch for {name}")
        params[name].data = tensors[name]
        params[name].grad = np.zeros_like(tensors[name])
    apply_policy(params, config.train.policy)
    o = config.optim
    state = OptimizerState(
        m={k[len(_M):]: v for k, v in tensors.items() if k.startswith(_M)},
        v={k[len(_V):]: v for k, v in tensors.items() if k.startswith(_V)},
        step=step, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
    return params, state, config


# -- training loop -----------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at step {step}"
                         + (f"; diagnostic checkpoint at {checkpoint}" if checkpoint else ""))
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    grad_norm: float
    coverage: float


@dataclass
class RunReport:
    config_checksum: str
    seed: int
    policy: str
    steps: list[StepRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]

    def to_jsonl(self) -> str:
        head = {"kind": "run", "config_checksum": self.config_checksum, "seed": self.seed,
                "policy": self.policy, "checkpoints": self.checkpoints}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps({"kind": "step", **s.__dict__}, sort_keys=True) for s in self.steps]
        return "\n".join(lines) + "\n"


@dataclass
class Example:
    """One training row: a sequence, its span layout and an optional score mask."""

    seq: PackedSequence
    layout: SpanLayout | None = None
    score_mask: np.ndarray | None = None


def finetune_examples(seqs: Sequence[PackedSequence]) -> list[Example]:
    """Examples packed by ``pack_examples``: inputs become spans, only targets are scored."""
    out = []
    for s in seqs:
        layout = SpanLayout(s.n, tuple((a + 1, b + 1) for a, b in s.inputs))
        out.append(Example(s, layout, s.target_flags))
    return out


def train(config: RunConfig, corpus, policy: FreezePolicy | str | None = None,
          seed: int | None = None, out_dir: str | Path | None = None,
          params: MetaLMParameters | None = None, state: OptimizerState | None = None,
          steps: int | None = None) -> tuple[MetaLMParameters, OptimizerState, RunReport]:
    """Run the optimisation loop; fully determined by (seed, config, corpus).

    ``corpus`` is either a list of documents (lists of paragraphs), a list of
    ``PackedSequence`` (spans are sampled every step), or a list of
    ``Example`` with fixed layouts. With ``train.fixed_batch`` the first batch
    and its layouts are drawn once and reused at every step.
    """
    seed = config.seed if seed is None else seed
    policy = FreezePolicy(policy or config.train.policy)
    tc, sc, oc = config.train, config.spans, config.optim
    if policy.value != tc.policy:
        config = config.replace(train=type(tc)(**{**tc.__dict__, "policy": policy.value}))
    rng = np.random.default_rng(seed)
    data_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2])
    examples = _as_examples(corpus, tc.seq_len)
    if not examples:
        raise ValueError("empty corpus")
    if params is None:
        params = init_params(config.model, seed=int(rng.integers(2**31)))
    apply_policy(params, policy)
    if state is None:
        state = OptimizerState(beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps,
                               weight_decay=oc.weight_decay)
    schedule = Schedule(config.schedule.peak_lr, config.schedule.warmup, config.schedule.total)
    total = schedule.total if steps is None else steps
    report = RunReport(config.checksum(), seed, policy.value)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    order = np.empty(0, dtype=np.int64)
    fixed = None
    for _ in range(total):
        step = state.step
        if fixed is not None:
            batch = fixed
        else:
            if len(order) < tc.batch_size:
                order = np.concatenate([order, data_rng.permutation(len(examples))])
            idx, order = order[:tc.batch_size], order[tc.batch_size:]
            batch = [_realise(examples[i], sc, data_rng) for i in idx]
            if tc.fixed_batch:
                fixed = batch
        seqs = [b.seq for b in batch]
        layouts = [b.layout for b in batch]
        masks = None
        if any(b.score_mask is not None for b in batch):
            masks = [b.score_mask if b.score_mask is not None else np.ones(b.seq.n, bool)
                     for b in batch]
        params.zero_grad()
        loss = semicausal_loss(seqs, layouts, params, rng=drop_rng, score_masks=masks)
        value = float(loss.data)
        if not math.isfinite(value):
            diag = None
            if out is not None:
                diag = out / f"diverged_step{step}.ckpt"
                save_checkpoint(params, state, diag, config)
            raise TrainingDiverged(step, diag)
        loss.backward()
        grads = {k: t.grad for k, t in params.trainable_items()}
        norm = clip_by_global_norm(grads, oc.clip_norm)
        lr = lr_at(schedule, step)
        adam_step(params, grads, state, lr)
        cover = float(np.mean([lay.covered() / max(1, s.non_pad_length())
                               for s, lay in zip(seqs, layouts)]))
        report.steps.append(StepRecord(step, value, lr, norm, cover))
        if out is not None and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
            path = out / f"step{state.step}.ckpt"
            save_checkpoint(params, state, path, config)
            report.checkpoints.append(str(path))
    if out is not None:
        path = out / "final.ckpt"
        save_checkpoint(params, state, path, config)
        report.checkpoints.append(str(path))
        (out / "report.jsonl").write_text(report.to_jsonl())
    return params, state, report


def _as_examples(corpus, n: int) -> list[Example]:
    corpus = list(corpus)
    if not corpus:
        return []
    first = corpus[0]
    if isinstance(first, Example):
        return corpus
    if isinstance(first, PackedSequence):
        return [Example(s) for s in corpus]
    return [Example(s) for s in pack_corpus(corpus, n)]


def _realise(ex: Example, sc, rng: np.random.Generator) -> Example:
    if ex.layout is not None:
        return ex
    layout = sample_spans(ex.seq, sc.ratio, sc.min_len, sc.max_len, rng) if sc.ratio > 0 \
        else SpanLayout(ex.seq.n)
    return Example(ex.seq, layout, ex.score_mask)
