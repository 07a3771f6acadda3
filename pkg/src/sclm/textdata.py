"""Byte-level vocabulary and full-sentence sequence packing.

Ids 0-255 are raw bytes; four specials follow. Packed sequences always open
with ``BOS``; paragraphs end with ``EOP`` and documents with ``EOD``. Each
sequence records half-open ``doc_spans`` (0-based) partitioning ``[0, n)``
by source document, with trailing padding as its own span.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

BOS = 256
EOP = 257
EOD = 258
PAD = 259
VOCAB_SIZE = 260
SPECIALS = frozenset({BOS, EOP, EOD, PAD})
SPECIAL_NAMES = {BOS: "<s>", EOP: "</s>", EOD: "</d>", PAD: "<pad>"}

PACK_MAGIC = b"SCLM"
PACK_VERSION = 1


class PackFormatError(ValueError):
    pass


@dataclass
class PackedSequence:
    ids: np.ndarray
    doc_spans: list[tuple[int, int]]
    # 0-based half-open intervals of example inputs; only set by pack_examples
    inputs: list[tuple[int, int]] = field(default_factory=list)
    # per-position flag for tokens belonging to an example target (pack_examples)
    target_flags: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def pad_mask(self) -> np.ndarray:
        return self.ids == PAD

    def non_pad_length(self) -> int:
        return int((self.ids != PAD).sum())


@dataclass
class PackWarning:
    kind: str
    detail: str
    index: int


def encode(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def decode(ids: Iterable[int], specials: bool = False) -> str:
    """Bytes back to text; specials are dropped unless ``specials`` is set."""
    out = bytearray()
    parts: list[str] = []
    for i in ids:
        i = int(i)
        if i < 256:
            out.append(i)
        elif specials:
            parts.append(out.decode("utf-8", errors="replace"))
            parts.append(SPECIAL_NAMES.get(i, f"<{i}>"))
            out = bytearray()
    parts.append(out.decode("utf-8", errors="replace"))
    return "".join(parts)


def read_corpus(path: str | Path) -> list[list[str]]:
    """Documents separated by blank lines; paragraphs are single lines."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_corpus(text)


def parse_corpus(text: str) -> list[list[str]]:
    docs: list[list[str]] = []
    current: list[str] = []
    for line in text.splitlines():
        if line.strip() == "":
            if current:
                docs.append(current)
                current = []
        else:
            current.append(line)
    if current:
        docs.append(current)
    return docs


class _SequenceBuilder:
    def __init__(self, n: int):
        self.n = n
        self.reset()

    def reset(self):
        self.ids = [BOS]
        self.spans: list[tuple[int, int]] = []
        self.open_start = 0
        self.inputs: list[tuple[int, int]] = []
        self.targets: list[int] = []

    @property
    def free(self) -> int:
        return self.n - len(self.ids)

    def empty(self) -> bool:
        return len(self.ids) == 1

    def close_doc(self):
        if len(self.ids) > self.open_start:
            self.spans.append((self.open_start, len(self.ids)))
        self.open_start = len(self.ids)

    def emit(self) -> PackedSequence:
        self.close_doc()
        used = len(self.ids)
        ids = np.full(self.n, PAD, dtype=np.int64)
        ids[:used] = self.ids
        spans = list(self.spans)
        if used < self.n:
            spans.append((used, self.n))
        flags = None
        if self.targets:
            flags = np.zeros(self.n, dtype=bool)
            flags[self.targets] = True
        seq = PackedSequence(ids, spans, list(self.inputs), flags)
        self.reset()
        return seq


def pack_corpus(documents: Sequence[Sequence[str | bytes]], n: int, rng_seed: int | None = None,
                warnings: list[PackWarning] | None = None) -> Iterator[PackedSequence]:
    """Pack documents into ``n``-token sequences without splitting paragraphs.

    A paragraph together with its ``EOP`` (and the ``EOD`` closing its
    document) is placed whole; if it does not fit in the current sequence the
    sequence is padded and a new one started. Paragraph units longer than
    ``n - 1`` are cut into ``n - 1``-token pieces and a ``PackWarning`` is
    appended to ``warnings``. Document order is preserved, so ``rng_seed`` has
    no effect; it is accepted for call-site symmetry with shuffled packers.
    """
    if n < 8:
        raise ValueError("sequence length must be at least 8")
    del rng_seed
    builder = _SequenceBuilder(n)
    cap = n - 1
    for d, doc in enumerate(documents):
        for p, para in enumerate(doc):
            unit = encode(para) + [EOP]
            last = p == len(doc) - 1
            if last:
                unit.append(EOD)
            if len(unit) > cap:
                msg = f"document {d} paragraph {p}: {len(unit)} tokens split into {cap}-token pieces"
                log.warning(msg)
                if warnings is not None:
                    warnings.append(PackWarning("split", msg, d))
                pieces = [unit[i:i + cap] for i in range(0, len(unit), cap)]
            else:
                pieces = [unit]
            for piece in pieces:
                if len(piece) > builder.free:
                    yield builder.emit()
                builder.ids.extend(piece)
                if piece[-1] == EOD:
                    builder.close_doc()
    if not builder.empty():
        yield builder.emit()


def pack_examples(examples: Sequence[tuple[Sequence[int], Sequence[int]]], n: int,
                  errors: list[PackWarning] | None = None) -> Iterator[PackedSequence]:
    """First-fit packing of (input, target) pairs, each followed by ``EOP``.

    An example occupies ``len(input) + len(target) + 1`` slots and never
    straddles two sequences. Examples longer than ``n - 2`` tokens are
    skipped with an error record. Each example is its own doc span; the input
    interval is recorded in ``PackedSequence.inputs`` and the target tokens
    are flagged in ``target_flags``.
    """
    if n < 8:
        raise ValueError("sequence length must be at least 8")
    builder = _SequenceBuilder(n)
    for i, (inp, tgt) in enumerate(examples):
        size = len(inp) + len(tgt)
        if size > n - 2:
            msg = f"example {i}: {size} tokens exceed the {n - 2}-token limit"
            log.warning(msg)
            if errors is not None:
                errors.append(PackWarning("oversize", msg, i))
            continue
        if size + 1 > builder.free:
            yield builder.emit()
        start = len(builder.ids)
        builder.ids.extend(int(t) for t in inp)
        builder.inputs.append((start, start + len(inp)))
        tstart = len(builder.ids)
        builder.ids.extend(int(t) for t in tgt)
        builder.targets.extend(range(tstart, tstart + len(tgt)))
        builder.ids.append(EOP)
        builder.close_doc()
    if not builder.empty():
        yield builder.emit()


def strip_specials(ids: Iterable[int]) -> list[int]:
    return [int(i) for i in ids if int(i) not in SPECIALS]


# -- binary persistence ------------------------------------------------------

def write_packed(sequences: Iterable[PackedSequence], n: int, fh: BinaryIO) -> int:
    """Write sequences in the ``SCLM`` container; returns the count written."""
    fh.write(PACK_MAGIC)
    fh.write(struct.pack("<II", PACK_VERSION, n))
    count = 0
    for seq in sequences:
        if seq.n != n:
            raise PackFormatError(f"sequence length {seq.n} != {n}")
        fh.write(seq.ids.astype("<u2").tobytes())
        fh.write(struct.pack("<I", len(seq.doc_spans)))
        for a, b in seq.doc_spans:
            fh.write(struct.pack("<II", a, b))
        count += 1
    return count


def read_packed(fh: BinaryIO) -> list[PackedSequence]:
    head = fh.read(12)
    if len(head) < 12 or head[:4] != PACK_MAGIC:
        raise PackFormatError("not an SCLM packed file")
    version, n = struct.unpack("<II", head[4:])
    if version != PACK_VERSION:
        raise PackFormatError(f"unsupported packed-file version {version}")
    out = []
    while True:
        raw = fh.read(2 * n)
        if not raw:
            break
        if len(raw) != 2 * n:
            raise PackFormatError("truncated sequence record")
        ids = np.frombuffer(raw, dtype="<u2").astype(np.int64)
        cnt_raw = fh.read(4)
        if len(cnt_raw) != 4:
            raise PackFormatError("truncated doc-span count")
        (count,) = struct.unpack("<I", cnt_raw)
        body = fh.read(8 * count)
        if len(body) != 8 * count:
            raise PackFormatError("truncated doc-span table")
        pairs = struct.unpack(f"<{2 * count}I", body)
        spans = [(pairs[2 * i], pairs[2 * i + 1]) for i in range(count)]
        out.append(PackedSequence(ids, spans))
    return out
