"""Interleaved image-text streams: layout, visibility, NTP targets and packing.

A stream is ``BoS  e_1 ... e_n  EoS`` where a text element contributes its
token ids and an image element contributes ``BoI`` followed by ``N``
image slots. Text ids live in ``[0, text_vocab)``; the prediction vocabulary
appends ``BoI`` and ``EoS`` after them, and the input vocabulary also
holds ``BoS``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union


class EmptyInputError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class Text:
    tokens: tuple[int, ...]

    def __init__(self, tokens):
        object.__setattr__(self, "tokens", tuple(int(t) for t in tokens))


@dataclass(frozen=True)
class Image:
    image_id: int


Element = Union[Text, Image]

# slot kinds
BOS, EOS, BOI, TXT, IMG = "bos", "eos", "boi", "txt", "img"


@dataclass(frozen=True)
class Slot:
    kind: str
    value: int = -1  # token id (TXT) or image id (BOI, IMG)
    index: int = -1  # position inside the image block (IMG)

    def __repr__(self) -> str:
        if self.kind == TXT:
            return str(self.value)
        if self.kind == IMG:
            return f"Img({self.value},{self.index})"
        if self.kind == BOI:
            return "BoI"
        return "BoS" if self.kind == BOS else "EoS"


@dataclass
class PackedSequence:
    slots: list[Slot]
    images: list[int]  # image ids in stream order
    n_tokens: int
    segments: list[int] = field(default_factory=list)  # sample index per position
    positions: list[int] = field(default_factory=list)  # position within its sample
    origin: list[tuple[int, int]] = field(default_factory=list)  # per image: (sample, original id)

    def __post_init__(self):
        if not self.segments:
            self.segments = [0] * len(self.slots)
        if not self.positions:
            self.positions = list(range(len(self.slots)))
        if not self.origin:
            self.origin = [(0, i) for i in self.images]

    def __len__(self) -> int:
        return len(self.slots)

    def boi_positions(self) -> dict[int, int]:
        return {s.value: p for p, s in enumerate(self.slots) if s.kind == BOI}

    def n_samples(self) -> int:
        return max(self.segments) + 1 if self.segments else 0


class Vocab:
    """Id layout: text ids, then BoI, EoS (predictable), then BoS (input only)."""

    def __init__(self, text_vocab: int):
        self.text = text_vocab
        self.boi = text_vocab
        self.eos = text_vocab + 1
        self.bos = text_vocab + 2
        self.n_predict = text_vocab + 2
        self.n_input = text_vocab + 3

    def input_id(self, slot: Slot) -> int:
        if slot.kind == TXT:
            return slot.value
        return {BOI: self.boi, EOS: self.eos, BOS: self.bos}[slot.kind]


def build(elements: Sequence[Element], n_tokens: int, complete: bool = True) -> PackedSequence:
    if n_tokens < 1:
        raise ValueError("N must be >= 1")
    if not elements:
        raise EmptyInputError("no elements to build a sequence from")
    slots = [Slot(BOS)]
    images = []
    for el in elements:
        if isinstance(el, Text):
            slots.extend(Slot(TXT, t) for t in el.tokens)
        elif isinstance(el, Image):
            images.append(el.image_id)
            slots.append(Slot(BOI, el.image_id))
            slots.extend(Slot(IMG, el.image_id, j) for j in range(n_tokens))
        else:
            raise TypeError(f"unknown element {el!r}")
    if complete:
        slots.append(Slot(EOS))
    return PackedSequence(slots, images, n_tokens)


def parse(seq: PackedSequence) -> list[Element]:
    """Inverse of build: consecutive text tokens merge into one Text element."""
    out: list[Element] = []
    buf: list[int] = []
    for s in seq.slots:
        if s.kind == TXT:
            buf.append(s.value)
            continue
        if buf:
            out.append(Text(buf))
            buf = []
        if s.kind == BOI:
            out.append(Image(s.value))
    if buf:
        out.append(Text(buf))
    return out


def validate(seq: PackedSequence) -> None:
    s = seq.slots
    p = 0
    while p < len(s):
        if s[p].kind == BOI:
            block = s[p + 1 : p + 1 + seq.n_tokens]
            expect = [Slot(IMG, s[p].value, j) for j in range(seq.n_tokens)]
            if block != expect:
                raise ValueError(f"malformed image block at position {p}")
            p += 1 + seq.n_tokens
        elif s[p].kind == IMG:
            raise ValueError(f"image slot without BoI at position {p}")
        else:
            p += 1


def visibility(seq: PackedSequence, own_image_visible: bool = True) -> list[list[int]]:
    """Per position, the image ids visible to it (stream order).

    Image j is visible at p iff its BoI sits at a position < p in the same
    sample. With ``own_image_visible=False`` an image's own slots do not see
    it (only strictly preceding images).
    """
    out: list[list[int]] = []
    seen: list[int] = []
    seg = None
    for p, s in enumerate(seq.slots):
        if seq.segments[p] != seg:
            seg, seen = seq.segments[p], []
        if s.kind == IMG and not own_image_visible:
            out.append([i for i in seen if i != s.value])
        else:
            out.append(list(seen))
        if s.kind == BOI:
            seen = seen + [s.value]
    return out


def ntp_targets(seq: PackedSequence, vocab: Vocab) -> tuple[list[int], list[bool]]:
    """Next-slot targets in the prediction vocab and their loss mask."""
    T = len(seq)
    targets = [0] * T
    mask = [False] * T
    for p in range(T - 1):
        if seq.segments[p + 1] != seq.segments[p]:
            continue
        nxt = seq.slots[p + 1]
        if nxt.kind in (IMG, BOS):
            continue
        targets[p] = vocab.input_id(nxt)
        mask[p] = True
    return targets, mask


def image_is_initial(seq: PackedSequence) -> dict[int, bool]:
    """Whether each image is the first element of its sample (BoI right after BoS)."""
    out = {}
    for p, s in enumerate(seq.slots):
        if s.kind == BOI:
            prev = seq.slots[p - 1] if p > 0 else None
            out[s.value] = prev is not None and prev.kind == BOS and seq.segments[p - 1] == seq.segments[p]
    return out


def pack(samples: Sequence[PackedSequence], max_len: int) -> list[PackedSequence]:
    """Greedy first-fit concatenation of whole samples into contexts of <= max_len."""
    bins: list[list[int]] = []
    fill: list[int] = []
    for i, s in enumerate(samples):
        if len(s) > max_len:
            raise SizeError(f"sample {i} has length {len(s)} > max_len {max_len}")
        for b in range(len(bins)):
            if fill[b] + len(s) <= max_len:
                bins[b].append(i)
                fill[b] += len(s)
                break
        else:
            bins.append([i])
            fill.append(len(s))
    return [concat([samples[i] for i in members], members) for members in bins]


def concat(samples: Sequence[PackedSequence], members: Sequence[int] | None = None) -> PackedSequence:
    """Join samples into one context, renumbering image ids in stream order."""
    members = list(range(len(samples))) if members is None else list(members)
    n = samples[0].n_tokens
    slots, images, segments, positions, origin = [], [], [], [], []
    for seg, (m, s) in enumerate(zip(members, samples)):
        if s.n_tokens != n:
            raise ValueError("cannot pack samples with different N")
        remap = {}
        for img in s.images:
            remap[img] = len(images)
            images.append(len(images))
            origin.append((m, img))
        for p, sl in enumerate(s.slots):
            slots.append(Slot(sl.kind, remap[sl.value], sl.index) if sl.kind in (BOI, IMG) else sl)
            segments.append(seg)
            positions.append(p)
    return PackedSequence(slots, images, n, segments, positions, origin)


# ---------------------------------------------------------------- corpus I/O


def read_corpus(path) -> list[list[Union[Text, str]]]:
    """JSON-lines corpus -> per sample, a list of Text elements and image paths."""
    samples = []
    base = Path(path).parent
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "elements" not in rec:
                raise ValueError(f"{path}:{lineno}: missing 'elements'")
            els = []
            for e in rec["elements"]:
                if "text" in e:
                    els.append(Text(e["text"]))
                elif "image" in e:
                    els.append(str(base / e["image"]))
                else:
                    raise ValueError(f"{path}:{lineno}: element needs 'text' or 'image'")
            samples.append(els)
    return samples


def write_corpus(path, samples) -> None:
    """Inverse of read_corpus; image entries are written as given (relative paths)."""
    with open(path, "w") as fh:
        for els in samples:
            rec = [{"text": list(e.tokens)} if isinstance(e, Text) else {"image": str(e)} for e in els]
            fh.write(json.dumps({"elements": rec}) + "\n")
