"""Byte-level BPE tokenizer with special tokens and an optional domain lexicon.

The base alphabet is all 256 bytes, so any UTF-8 string round-trips through
encode/decode. Merges are learned greedily by pair frequency (ties broken by
the lexicographically smaller pair) inside whitespace-delimited chunks, so a
merge never crosses a word boundary. Domain-lexicon terms are matched whole
word ahead of the merge machinery; they change segmentation but never the
decoded text.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field

_CHUNK_RE = re.compile(r"\s+|\S+")

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
N_SPECIAL = 3
SPECIAL_STRINGS = {"<|bos|>": BOS_ID, "<|eos|>": EOS_ID, "<|pad|>": PAD_ID}


@dataclass
class TokenSequence:
    ids: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __eq__(self, other):
        return isinstance(other, TokenSequence) and self.ids == other.ids


class TokenizerModel:
    """Vocabulary + ordered merges + special token ids.

    Token ids: 0..255 are raw bytes, then BOS/EOS/PAD, then merged tokens in
    training-rank order, then lexicon terms. Immutable after construction.
    """

    def __init__(self, merges: list[tuple[bytes, bytes]], lexicon: list[str] | None = None):
        self.merges = list(merges)
        self.lexicon = list(lexicon or [])
        self.bos, self.eos, self.pad = BOS_ID, EOS_ID, PAD_ID
        self.id_to_bytes: list[bytes] = [bytes([i]) for i in range(256)]
        self.id_to_bytes += [b"", b"", b""]  # specials decode to nothing
        self.bytes_to_id: dict[bytes, int] = {bytes([i]): i for i in range(256)}
        self.merge_rank: dict[tuple[bytes, bytes], int] = {}
        for rank, (a, b) in enumerate(self.merges):
            tok = a + b
            self.merge_rank[(a, b)] = rank
            if tok not in self.bytes_to_id:
                self.bytes_to_id[tok] = len(self.id_to_bytes)
                self.id_to_bytes.append(tok)
        self.lexicon_ids: dict[str, int] = {}
        for term in self.lexicon:
            if term in SPECIAL_STRINGS:
                raise ValueError(f"lexicon term {term!r} collides with a special token")
            tb = term.encode("utf-8")
            if tb not in self.bytes_to_id:
                self.bytes_to_id[tb] = len(self.id_to_bytes)
                self.id_to_bytes.append(tb)
            self.lexicon_ids[term] = self.bytes_to_id[tb]

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_bytes)

    def vocab(self) -> dict[str, int]:
        """Token string -> id (byte tokens rendered via latin-1)."""
        v = {tok.decode("latin-1"): i for i, tok in enumerate(self.id_to_bytes) if i not in (BOS_ID, EOS_ID, PAD_ID)}
        v.update(SPECIAL_STRINGS)
        return v

    def content_hash(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()


def _bpe_chunk(model: TokenizerModel, chunk: bytes) -> list[int]:
    parts = [bytes([b]) for b in chunk]
    while len(parts) > 1:
        best_rank, best_i = None, -1
        for i in range(len(parts) - 1):
            r = model.merge_rank.get((parts[i], parts[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_i = r, i
        if best_rank is None:
            break
        parts[best_i:best_i + 2] = [parts[best_i] + parts[best_i + 1]]
    return [model.bytes_to_id[p] for p in parts]


def encode(model: TokenizerModel, text: str, wrap: bool = False) -> TokenSequence:
    ids: list[int] = []
    for chunk in _CHUNK_RE.findall(text):
        if chunk in model.lexicon_ids:
            ids.append(model.lexicon_ids[chunk])
        else:
            ids.extend(_bpe_chunk(model, chunk.encode("utf-8")))
    if wrap:
        ids = [model.bos] + ids + [model.eos]
    return TokenSequence(ids)


def decode(model: TokenizerModel, seq: TokenSequence, errors: str = "strict") -> str:
    """`errors="replace"` renders model output that may not be valid UTF-8."""
    buf = bytearray()
    for i in seq:
        if i in (model.bos, model.eos, model.pad):
            continue
        if i < 0 or i >= model.vocab_size:
            raise ValueError(f"unknown token id {i}")
        buf += model.id_to_bytes[i]
    return buf.decode("utf-8", errors=errors)


def train_bpe(corpus: list[str], vocab_size: int) -> TokenizerModel:
    """Learn byte-level merges from a text corpus.

    Deterministic: the most frequent adjacent pair wins each round, ties
    broken by the lexicographically smaller (left, right) byte pair.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if vocab_size <= 256 + N_SPECIAL:
        raise ValueError(f"vocab_size must exceed {256 + N_SPECIAL}")
    chunk_counts: Counter[bytes] = Counter()
    for text in corpus:
        for chunk in _CHUNK_RE.findall(text):
            chunk_counts[chunk.encode("utf-8")] += 1
    words: list[tuple[list[bytes], int]] = [
        ([bytes([b]) for b in chunk], n) for chunk, n in sorted(chunk_counts.items())
    ]
    merges: list[tuple[bytes, bytes]] = []
    n_merges = vocab_size - 256 - N_SPECIAL
    for _ in range(n_merges):
        pair_counts: Counter[tuple[bytes, bytes]] = Counter()
        for parts, n in words:
            for i in range(len(parts) - 1):
                pair_counts[(parts[i], parts[i + 1])] += n
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        a, b = best
        merged = a + b
        for parts, _ in words:
            i = 0
            while i < len(parts) - 1:
                if parts[i] == a and parts[i + 1] == b:
                    parts[i:i + 2] = [merged]
                else:
                    i += 1
    return TokenizerModel(merges)


def apply_domain_lexicon(model: TokenizerModel, terms: list[str]) -> TokenizerModel:
    """Return a new model where each term is a single whole-word token."""
    if not terms or any(not t for t in terms):
        raise ValueError("lexicon terms must be non-empty strings")
    for t in terms:
        if t in SPECIAL_STRINGS:
            raise ValueError(f"lexicon term {t!r} collides with a special token")
    seen = dict.fromkeys(model.lexicon)
    seen.update(dict.fromkeys(terms))
    return TokenizerModel(model.merges, list(seen))


# ---------------------------------------------------------------------------
# on-disk format: header line, merges in rank order, lexicon terms
# ---------------------------------------------------------------------------


def _hex(b: bytes) -> str:
    return b.hex()


def serialize(model: TokenizerModel) -> str:
    lines = [f"bpe-tokenizer v1 vocab={model.vocab_size} bos={model.bos} eos={model.eos} "
             f"pad={model.pad} merges={len(model.merges)} lexicon={len(model.lexicon)}"]
    lines += [f"{_hex(a)} {_hex(b)}" for a, b in model.merges]
    lines += [_hex(t.encode('utf-8')) for t in model.lexicon]
    return "\n".join(lines) + "\n"


def save(model: TokenizerModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize(model))


def load(path) -> TokenizerModel:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("bpe-tokenizer v1 "):
        raise ValueError("not a tokenizer file")
    fields = dict(kv.split("=") for kv in lines[0].split()[2:])
    n_merges, n_lex = int(fields["merges"]), int(fields["lexicon"])
    merges = []
    for ln in lines[1:1 + n_merges]:
        a, b = ln.split()
        merges.append((bytes.fromhex(a), bytes.fromhex(b)))
    lexicon = [bytes.fromhex(ln).decode("utf-8") for ln in lines[1 + n_merges:1 + n_merges + n_lex]]
    return TokenizerModel(merges, lexicon)
