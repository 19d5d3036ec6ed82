"""Byte-level BPE: trainer, encoder/decoder, and efficiency evaluator.

The base alphabet is the 256 byte values (ids 0..255). Four reserved
control tokens (mode open/close tags, pad, eos) occupy the fixed ids just
above the byte range and are never produced by merges; they exist so the
hybrid-mode tags are atomic tokens rather than spellable byte sequences.
Merged tokens start after the reserved block.

Training is plain greedy BPE: at each step the most frequent adjacent
pair is merged, with ties broken by earliest first occurrence in the
corpus and then by the pair's byte sequences. There is no pre-tokenization
and no normalization, so encoding is lossless for arbitrary byte strings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, CorruptionError, FormatError

OPEN_TAG = "<think>"
CLOSE_TAG = "</think>"
PAD = "<pad>"
EOS = "<eos>"

RESERVED_TOKENS = (OPEN_TAG, CLOSE_TAG, PAD, EOS)
N_BYTES = 256

_FILE_HEADER = "bbpe v1"


@dataclass
class BbpeModel:
    """An ordered merge list over the byte alphabet plus reserved tokens."""

    merges: list[tuple[int, int]] = field(default_factory=list)
    vocab: dict[int, bytes] = field(default_factory=dict)
    reserved: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.vocab:
            self.vocab = {i: bytes([i]) for i in range(N_BYTES)}
        if not self.reserved:
            self.reserved = {name: N_BYTES + i for i, name in enumerate(RESERVED_TOKENS)}

    @property
    def merge_base(self) -> int:
        return N_BYTES + len(self.reserved)

    @property
    def vocab_size(self) -> int:
        return self.merge_base + len(self.merges)

    def token_id(self, name: str) -> int:
        return self.reserved[name]

    # -- encoding / decoding -------------------------------------------------

    def encode(self, text: str | bytes) -> list[int]:
        """Apply merges in training order to the byte sequence of `text`."""
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(raw)
        for offset, pair in enumerate(self.merges):
            ids = _replace_pair(ids, pair, self.merge_base + offset)
        return ids

    def decode_bytes(self, ids: list[int]) -> bytes:
        """Exact inverse of encode; reserved ids render as their markers."""
        out = bytearray()
        names = {i: name for name, i in self.reserved.items()}
        for i in ids:
            if i in names:
                name = names[i]
                if name in (PAD, EOS):
                    continue
                out += name.encode("utf-8")
            elif i in self.vocab:
                out += self.vocab[i]
            else:
                raise IndexError(f"unknown token id {i}")
        return bytes(out)

    def decode(self, ids: list[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # -- serialization -------------------------------------------------------

    def dump(self) -> str:
        lines = [_FILE_HEADER]
        for name, tid in self.reserved.items():
            lines.append(f"reserved {tid} {name}")
        for left, right in self.merges:
            lines.append(f"merge {_escape(self.vocab[left])} {_escape(self.vocab[right])}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dump())

    @classmethod
    def loads(cls, text: str) -> "BbpeModel":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != _FILE_HEADER:
            raise FormatError(f"bad tokenizer header: {lines[:1]!r}")
        reserved: dict[str, int] = {}
        pair_bytes: list[tuple[bytes, bytes]] = []
        for ln in lines[1:]:
            kind, _, rest = ln.partition(" ")
            if kind == "reserved":
                tid, _, name = rest.partition(" ")
                reserved[name] = int(tid)
            elif kind == "merge":
                left, right = rest.split(" ")
                pair_bytes.append((_unescape(left), _unescape(right)))
            else:
                raise CorruptionError(f"unknown tokenizer line kind {kind!r}")
        model = cls(reserved=reserved)
        by_bytes = {bytes([i]): i for i in range(N_BYTES)}
        for left_b, right_b in pair_bytes:
            try:
                pair = (by_bytes[left_b], by_bytes[right_b])
            except KeyError as exc:
                raise CorruptionError(f"merge references unknown token {exc}") from exc
            new_id = model.merge_base + len(model.merges)
            model.merges.append(pair)
            model.vocab[new_id] = left_b + right_b
            by_bytes[left_b + right_b] = new_id
        return model

    @classmethod
    def load(cls, path) -> "BbpeModel":
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())


def _escape(b: bytes) -> str:
    out = []
    for byte in b:
        ch = chr(byte)
        if 0x21 <= byte <= 0x7E and ch != "\\":
            out.append(ch)
        else:
            out.append(f"\\x{byte:02x}")
    return "".join(out)


def _unescape(s: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(s):
        if s[i] == "\\" and i + 4 <= len(s) and s[i + 1] == "x":
            out.append(int(s[i + 2:i + 4], 16))
            i += 4
        else:
            out.append(ord(s[i]))
            i += 1
    return bytes(out)


def _replace_pair(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    """Left-to-right greedy replacement of `pair` with `new_id`."""
    out = []
    i = 0
    n = len(ids)
    while i < n:
        if i + 1 < n and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def bbpe_train(corpus, target_vocab: int) -> BbpeModel:
    """Greedy pair merging until `target_vocab` total entries.

    `corpus` is a string/bytes or an iterable of them; merges never cross
    document boundaries. Training stops early (with a smaller vocabulary)
    only if no adjacent pair remains.
    """
    docs = _corpus_bytes(corpus)
    model = BbpeModel()
    if target_vocab <= model.merge_base:
        raise ConfigError(
            f"target_vocab must exceed {model.merge_base} "
            f"(256 bytes + {len(model.reserved)} reserved tokens)")
    if not any(docs):
        raise ConfigError("empty corpus")
    seqs = [list(doc) for doc in docs if doc]

    while model.vocab_size < target_vocab:
        counts: dict[tuple[int, int], int] = {}
        first_seen: dict[tuple[int, int], int] = {}
        order = 0
        for seq in seqs:
            for a, b in zip(seq, seq[1:]):
                pair = (a, b)
                counts[pair] = counts.get(pair, 0) + 1
                if pair not in first_seen:
                    first_seen[pair] = order
                order += 1
        if not counts:
            break
        best = min(
            counts,
            key=lambda p: (-counts[p], first_seen[p], model.vocab[p[0]], model.vocab[p[1]]),
        )
        new_id = model.merge_base + len(model.merges)
        model.merges.append(best)
        model.vocab[new_id] = model.vocab[best[0]] + model.vocab[best[1]]
        seqs = [_replace_pair(seq, best, new_id) for seq in seqs]
    return model


def _corpus_bytes(corpus) -> list[bytes]:
    if isinstance(corpus, (str, bytes)):
        corpus = [corpus]
    return [doc.encode("utf-8") if isinstance(doc, str) else bytes(doc) for doc in corpus]


@dataclass(frozen=True)
class EfficiencyReport:
    """Average token count per sample, per dataset label."""

    averages: dict[str, float]
    counts: dict[str, int]
    empty_labels: tuple[str, ...]


def efficiency_eval(model: BbpeModel, datasets: dict[str, list]) -> EfficiencyReport:
    """Mean encoded length per sample for each labelled dataset."""
    if not datasets:
        raise ConfigError("efficiency_eval needs at least one dataset label")
    averages: dict[str, float] = {}
    counts: dict[str, int] = {}
    empty = []
    for label, samples in datasets.items():
        counts[label] = len(samples)
        if not samples:
            averages[label] = 0.0
            empty.append(label)
            continue
        total = sum(len(model.encode(s)) for s in samples)
        averages[label] = total / len(samples)
    return EfficiencyReport(averages=averages, counts=counts, empty_labels=tuple(empty))
