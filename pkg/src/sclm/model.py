"""Bidirectional span encoders docked into a causal decoder through connectors.

The decoder consumes one row per sequence position: token embeddings for
causal positions and connector outputs for positions inside non-causal
spans, both plus a sinusoidal position vector. Its output projection is the
transpose of the input embedding table (a single tensor). Each registered
modality owns an encoder and a connector; spans are encoded independently
of everything outside them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .masks import causal_mask, semicausal_flow
from .numerics import ContractError, ShapeError, Tensor
from .spans import SpanLayout, supervision
from .textdata import VOCAB_SIZE, PackedSequence


class RegistryError(KeyError):
    pass


@dataclass
class EncoderConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    max_len: int = 64
    dropout: float = 0.1
    # None for token-id input; an int for real-valued rows of that width
    d_feat: int | None = None

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("encoder width must be divisible by the head count")


@dataclass
class DecoderConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    max_len: int = 256
    dropout: float = 0.0
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("decoder width must be divisible by the head count")


@dataclass
class ModalityConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    connector: str = "linear"  # or "mlp"

    def __post_init__(self):
        if self.connector not in ("linear", "mlp"):
            raise ValueError(f"unknown connector kind {self.connector!r}")


@dataclass
class ModelConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    modalities: dict[str, ModalityConfig] = field(
        default_factory=lambda: {"text": ModalityConfig()})
    deepnorm: bool = False
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        mods = {k: ModalityConfig(EncoderConfig(**v["encoder"]), v["connector"])
                for k, v in d["modalities"].items()}
        return cls(DecoderConfig(**d["decoder"]), mods, d.get("deepnorm", False),
                   d.get("init_std", 0.02), d.get("ln_eps", 1e-5))


@dataclass
class EncoderInput:
    modality: str
    payload: np.ndarray  # [len] token ids or [len, d_feat] features


class MetaLMParameters:
    """Named parameter tree with a trainable flag per leaf.

    ``embed`` is both the decoder input table and its output projection.
    Encoder leaves live under ``enc.<modality>.``, connector leaves under
    ``conn.<modality>.``, decoder leaves under ``dec.``.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.trainable = {name: True for name in tensors}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def modalities(self) -> list[str]:
        return list(self.config.modalities)

    def trainable_items(self):
        return [(k, t) for k, t in self.tensors.items() if self.trainable[k]]

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name in self.tensors:
            self.trainable[name] = bool(predicate(name))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def astype(self, dtype) -> "MetaLMParameters":
        out = MetaLMParameters(self.config, {
            k: nx.parameter(t.data.astype(dtype), dtype=dtype) for k, t in self.tensors.items()})
        out.trainable = dict(self.trainable)
        return out


# -- construction ------------------------------------------------------------

def _block_params(prefix: str, d: int, std: float, rng: np.random.Generator,
                  out_scale: float = 1.0) -> dict[str, Tensor]:
    p = {}
    for ln in ("ln1", "ln2"):
        p[f"{prefix}.{ln}.g"] = nx.ones((d,))
        p[f"{prefix}.{ln}.b"] = nx.zeros((d,))
    for proj in ("q", "k", "v", "o"):
        s = std * (out_scale if proj in ("v", "o") else 1.0)
        p[f"{prefix}.attn.{proj}.w"] = nx.gaussian((d, d), s, rng)
        p[f"{prefix}.attn.{proj}.b"] = nx.zeros((d,))
    p[f"{prefix}.mlp.fc.w"] = nx.gaussian((d, 4 * d), std * out_scale, rng)
    p[f"{prefix}.mlp.fc.b"] = nx.zeros((4 * d,))
    p[f"{prefix}.mlp.proj.w"] = nx.gaussian((4 * d, d), std * out_scale, rng)
    p[f"{prefix}.mlp.proj.b"] = nx.zeros((d,))
    return p


def deepnorm_constants(layers: int) -> tuple[float, float]:
    """Residual multiplier and init gain for a single-stack DeepNorm model."""
    return (2.0 * layers) ** 0.25, (8.0 * layers) ** -0.25


def init_params(config: ModelConfig, seed: int = 0) -> MetaLMParameters:
    rng = np.random.default_rng(seed)
    std = config.init_std
    dec = config.decoder
    t: dict[str, Tensor] = {"embed": nx.gaussian((dec.vocab_size, dec.d_model), std, rng)}
    dec_gain = deepnorm_constants(dec.layers)[1] if config.deepnorm else 1.0
    for i in range(dec.layers):
        t.update(_block_params(f"dec.{i}", dec.d_model, std, rng, dec_gain))
    t["dec.ln_f.g"] = nx.ones((dec.d_model,))
    t["dec.ln_f.b"] = nx.zeros((dec.d_model,))
    for mod, mc in config.modalities.items():
        enc = mc.encoder
        pre = f"enc.{mod}"
        if enc.d_feat is None:
            t[f"{pre}.embed"] = nx.gaussian((dec.vocab_size, enc.d_model), std, rng)
        else:
            t[f"{pre}.lift.w"] = nx.gaussian((enc.d_feat, enc.d_model), std, rng)
            t[f"{pre}.lift.b"] = nx.zeros((enc.d_model,))
        t[f"{pre}.pos"] = nx.gaussian((enc.max_len, enc.d_model), std, rng)
        enc_gain = deepnorm_constants(enc.layers)[1] if config.deepnorm else 1.0
        for i in range(enc.layers):
            t.update(_block_params(f"{pre}.{i}", enc.d_model, std, rng, enc_gain))
        t[f"{pre}.ln_f.g"] = nx.ones((enc.d_model,))
        t[f"{pre}.ln_f.b"] = nx.zeros((enc.d_model,))
        widths = [enc.d_model, dec.d_model] if mc.connector == "linear" else \
            [enc.d_model, dec.d_model, dec.d_model, dec.d_model]
        for j in range(len(widths) - 1):
            t[f"conn.{mod}.{j}.w"] = nx.gaussian((widths[j], widths[j + 1]), std, rng)
            t[f"conn.{mod}.{j}.b"] = nx.zeros((widths[j + 1],))
    return MetaLMParameters(config, t)


def sinusoid_table(n: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table.astype(dtype)


# -- transformer blocks ------------------------------------------------------

def _affine(x: Tensor, p: MetaLMParameters, name: str) -> Tensor:
    return nx.add(nx.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _attention(x: Tensor, p: MetaLMParameters, pre: str, heads: int, allow: np.ndarray,
               drop: float, rng) -> Tensor:
    B, n, d = x.shape
    hd = d // heads

    def split(name):
        y = nx.reshape(_affine(x, p, f"{pre}.attn.{name}"), (B, n, heads, hd))
        return nx.transpose(y, (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    probs = nx.dropout(nx.masked_softmax(scores, allow), drop, rng)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (B, n, d))
    return _affine(ctx, p, f"{pre}.attn.o")


def _mlp(x: Tensor, p: MetaLMParameters, pre: str) -> Tensor:
    return _affine(nx.gelu(_affine(x, p, f"{pre}.mlp.fc")), p, f"{pre}.mlp.proj")


def _block(x: Tensor, p: MetaLMParameters, pre: str, heads: int, allow: np.ndarray,
           drop: float, rng, deepnorm_alpha: float | None, eps: float) -> Tensor:
    if deepnorm_alpha is None:
        h = nx.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], eps)
        x = nx.add(x, nx.dropout(_attention(h, p, pre, heads, allow, drop, rng), drop, rng))
        h = nx.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], eps)
        return nx.add(x, nx.dropout(_mlp(h, p, pre), drop, rng))
    a = deepnorm_alpha
    y = nx.dropout(_attention(x, p, pre, heads, allow, drop, rng), drop, rng)
    x = nx.layer_norm(nx.add(nx.scale(x, a), y), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], eps)
    y = nx.dropout(_mlp(x, p, pre), drop, rng)
    return nx.layer_norm(nx.add(nx.scale(x, a), y), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], eps)


# -- encoder and connector ---------------------------------------------------

def _modality(params: MetaLMParameters, modality: str) -> ModalityConfig:
    try:
        return params.config.modalities[modality]
    except KeyError:
        raise RegistryError(f"modality {modality!r} is not registered") from None


def encode_spans(payloads: Sequence[np.ndarray], modality: str, params: MetaLMParameters,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """Encode several spans of one modality in a padded batch.

    Returns ``[S, Lmax, d_enc]`` outputs and the per-span lengths. Padded
    keys are blocked, so each span's rows equal its unbatched encoding.
    """
    mc = _modality(params, modality)
    enc = mc.encoder
    pre = f"enc.{modality}"
    lengths = np.array([len(x) for x in payloads], dtype=np.int64)
    if len(lengths) == 0:
        raise ValueError("no spans to encode")
    if lengths.min() < 1:
        raise ShapeError("empty span")
    L = int(lengths.max())
    if L > enc.max_len:
        raise ShapeError(f"span length {L} exceeds encoder limit {enc.max_len}")
    S = len(payloads)
    drop = enc.dropout if rng is not None else 0.0
    if enc.d_feat is None:
        ids = np.zeros((S, L), dtype=np.int64)
        for i, x in enumerate(payloads):
            ids[i, :len(x)] = x
        x = nx.reshape(nx.take_rows(params[f"{pre}.embed"], ids.reshape(-1)), (S, L, enc.d_model))
    else:
        feats = np.zeros((S, L, enc.d_feat), dtype=params[f"{pre}.lift.w"].dtype)
        for i, f in enumerate(payloads):
            f = np.asarray(f)
            if f.ndim != 2 or f.shape[1] != enc.d_feat:
                raise ShapeError(f"feature rows must have width {enc.d_feat}")
            feats[i, :len(f)] = f
        x = _affine(nx.tensor(feats), params, f"{pre}.lift")
    x = nx.add(x, nx.take_rows(params[f"{pre}.pos"], np.arange(L)))
    x = nx.dropout(x, drop, rng)
    valid = np.arange(L)[None, :] < lengths[:, None]
    allow = np.broadcast_to(valid[:, None, None, :], (S, 1, L, L))
    alpha = deepnorm_constants(enc.layers)[0] if params.config.deepnorm else None
    for i in range(enc.layers):
        x = _block(x, params, f"{pre}.{i}", enc.heads, allow, drop, rng, alpha,
                   params.config.ln_eps)
    x = nx.layer_norm(x, params[f"{pre}.ln_f.g"], params[f"{pre}.ln_f.b"], params.config.ln_eps)
    return x, lengths


def encode_span(inp: EncoderInput, params: MetaLMParameters,
                rng: np.random.Generator | None = None) -> Tensor:
    """Bidirectional encoding of one span: ``[len, d_enc]``."""
    out, lengths = encode_spans([np.asarray(inp.payload)], inp.modality, params, rng)
    L = int(lengths[0])
    return nx.reshape(out, (L, out.shape[-1]))


def connect(span_reps: Tensor, params: MetaLMParameters, modality: str) -> Tensor:
    mc = _modality(params, modality)
    if span_reps.shape[-1] != mc.encoder.d_model:
        raise ShapeError(f"connector expects width {mc.encoder.d_model}, got {span_reps.shape[-1]}")
    depth = 1 if mc.connector == "linear" else 3
    x = span_reps
    for j in range(depth):
        x = _affine(x, params, f"conn.{modality}.{j}")
        if j < depth - 1:
            x = nx.gelu(x)
    return x


# -- decoder -----------------------------------------------------------------

def embed_tokens(ids: np.ndarray, params: MetaLMParameters) -> Tensor:
    """Scaled token embeddings plus sinusoidal positions, ``[B, n, d_dec]``."""
    ids = np.atleast_2d(ids)
    B, n = ids.shape
    d = params.config.decoder.d_model
    rows = nx.reshape(nx.take_rows(params["embed"], ids.reshape(-1)), (B, n, d))
    return _with_positions(rows, params)


def _with_positions(rows: Tensor, params: MetaLMParameters) -> Tensor:
    # rows are scaled by sqrt(d) so unit-amplitude sinusoids don't drown them
    n, d = rows.shape[-2:]
    return nx.add(nx.scale(rows, math.sqrt(d)),
                  nx.tensor(sinusoid_table(n, d, params["embed"].dtype)))


def assemble_inputs(seqs: Sequence[PackedSequence] | PackedSequence,
                    layouts: Sequence[SpanLayout] | SpanLayout,
                    params: MetaLMParameters,
                    features: Sequence[Mapping[int, np.ndarray]] | None = None,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Decoder input rows for a batch, ``[B, n, d_dec]``.

    ``features[b][i]`` supplies the payload of span ``i`` of sequence ``b``
    when that span's modality takes real-valued rows; text spans read their
    token ids from the sequence.
    """
    if isinstance(seqs, PackedSequence):
        seqs, layouts = [seqs], [layouts]
        features = [features] if features is not None else None
    B = len(seqs)
    n = seqs[0].n
    d = params.config.decoder.d_model
    for seq, lay in zip(seqs, layouts):
        if seq.n != n or lay.n != n:
            raise ShapeError("layout and sequence lengths must agree across the batch")
    ids = np.stack([s.ids for s in seqs])
    if not any(lay.spans for lay in layouts):
        return embed_tokens(ids, params)
    base = nx.take_rows(params["embed"], ids.reshape(-1))
    groups: dict[str, list] = {}
    for b, (seq, lay) in enumerate(zip(seqs, layouts)):
        for i, ((s, e), mod) in enumerate(zip(lay.spans, lay.modalities)):
            mc = _modality(params, mod)
            if mc.encoder.d_feat is None:
                payload = seq.ids[s - 1:e - 1]
            else:
                if features is None or i not in features[b]:
                    raise ShapeError(f"span {i} of sequence {b} needs a feature payload")
                payload = np.asarray(features[b][i])
                if len(payload) != e - s:
                    raise ShapeError("feature payload length differs from its span")
            groups.setdefault(mod, []).append((b, s, e, payload))
    for mod in params.config.modalities:
        if mod not in groups:
            continue
        items = groups[mod]
        reps, lengths = encode_spans([it[3] for it in items], mod, params, rng)
        S, L, _ = reps.shape
        rows = nx.reshape(connect(reps, params, mod), (S * L, d))
        dst, src = [], []
        for j, (b, s, e, _) in enumerate(items):
            dst.extend(b * n + np.arange(s - 1, e - 1))
            src.extend(j * L + np.arange(e - s))
        base = nx.place_rows(base, rows, dst, src)
    return _with_positions(nx.reshape(base, (B, n, d)), params)


def decoder_forward(inputs: Tensor, params: MetaLMParameters,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Causal stack over ``[B, n, d]`` inputs; returns ``[B, n, V]`` logits."""
    dec = params.config.decoder
    x = inputs
    if x.ndim == 2:
        x = nx.reshape(x, (1,) + x.shape)
    n = x.shape[1]
    if n > dec.max_len:
        raise ShapeError(f"sequence length {n} exceeds decoder limit {dec.max_len}")
    allow = causal_mask(n).allow
    drop = dec.dropout if rng is not None else 0.0
    alpha = deepnorm_constants(dec.layers)[0] if params.config.deepnorm else None
    for i in range(dec.layers):
        x = _block(x, params, f"dec.{i}", dec.heads, allow, drop, rng, alpha,
                   params.config.ln_eps)
    x = nx.layer_norm(x, params["dec.ln_f.g"], params["dec.ln_f.b"], params.config.ln_eps)
    return nx.matmul(x, nx.transpose(params["embed"], (1, 0)))


def forward(seqs, layouts, params, features=None, rng=None) -> Tensor:
    return decoder_forward(assemble_inputs(seqs, layouts, params, features, rng), params, rng)


# -- objective ---------------------------------------------------------------

def semicausal_loss(seqs, layouts, params: MetaLMParameters, features=None,
                    rng: np.random.Generator | None = None,
                    score_masks: Sequence[np.ndarray] | None = None) -> Tensor:
    """Mean negative log-likelihood over the target positions of every sequence.

    ``score_masks[b]`` (0-based, length n) optionally restricts which target
    positions count, e.g. to example labels during finetuning.
    """
    if isinstance(seqs, PackedSequence):
        seqs, layouts = [seqs], [layouts]
        features = [features] if features is not None else None
        score_masks = [score_masks] if score_masks is not None else None
    logits = forward(seqs, layouts, params, features, rng)
    B, n, V = logits.shape
    rows, targets = [], []
    for b, (seq, lay) in enumerate(zip(seqs, layouts)):
        src, tgt = supervision(lay, seq.ids)
        if score_masks is not None:
            keep = np.asarray(score_masks[b], dtype=bool)[src + 1]
            src, tgt = src[keep], tgt[keep]
        rows.append(b * n + src)
        targets.append(tgt)
    rows = np.concatenate(rows)
    targets = np.concatenate(targets)
    if len(rows) == 0:
        raise ContractError("semicausal_loss: no target positions")
    picked = nx.take_rows(nx.reshape(logits, (B * n, V)), rows)
    return nx.cross_entropy(picked, targets)


@dataclass
class FlowReport:
    moved: np.ndarray  # moved[p, q]: logits at p changed when input q was perturbed
    allowed: np.ndarray
    violations: list[tuple[int, int]]

    @property
    def ok(self) -> bool:
        return not self.violations


def information_flow_check(seq: PackedSequence, layout: SpanLayout, params: MetaLMParameters,
                           features: Mapping[int, np.ndarray] | None = None) -> FlowReport:
    """Perturb each input position and record which output rows move.

    Text positions get a different token id; feature rows get an additive
    offset. Any movement at ``p`` not allowed by ``semicausal_flow`` for
    input ``q`` is a violation, reported as a 0-based ``(p, q)`` pair.
    """
    n = seq.n
    if n > 64:
        raise ValueError("information_flow_check is meant for n <= 64")
    owner = layout.span_of()

    def run(s, f):
        with nx.no_grad():
            return forward([s], [layout], params, [f] if f is not None else None).data[0]

    base = run(seq, features)
    moved = np.zeros((n, n), dtype=bool)
    for q in range(n):
        span = owner[q + 1]
        feats = dict(features) if features is not None else None
        ids = seq.ids.copy()
        if span >= 0 and params.config.modalities[layout.modalities[span]].encoder.d_feat is not None:
            s0 = layout.spans[span][0]
            rows = np.array(feats[span], copy=True)
            rows[q + 1 - s0] += 1.0
            feats[span] = rows
        else:
            ids[q] = (ids[q] + 1) % 256 if ids[q] < 256 else ids[q] - 1
        pert = PackedSequence(ids, seq.doc_spans)
        out = run(pert, feats)
        moved[:, q] = (out != base).any(axis=1)
    allowed = semicausal_flow(layout).allow
    bad = np.argwhere(moved & ~allowed)
    return FlowReport(moved, allowed, [tuple(map(int, x)) for x in bad])
