"""Letter sequences: Bernoulli draws, Thue-Morse / period-doubling substitutions, dimers.

Letters are 0/1; in substitution contexts 0 is printed as 'a' and 1 as 'b'.
A Word keeps its letters packed eight to a byte and remembers which letter
covers the cell [0, 1).
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "Word", "BernoulliSource", "substitute", "substitution_power",
    "sample_word", "sample_letters", "dimer_word", "RULES",
]

# image of letter 0 and letter 1 under each rule
RULES = {
    "TM": ((0, 1), (1, 0)),
    "PD": ((0, 1), (0, 0)),
}

_ALPHABETS = {"ab": "ab", "01": "01"}
_PHILOX_OFFSET = 1 << 63  # signed cell index -> unsigned counter


@dataclass(frozen=True, eq=False)
class Word:
    packed: np.ndarray
    length: int
    origin_index: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("word must be non-empty")
        if not 0 <= self.origin_index < self.length:
            raise ValueError(
                f"origin_index {self.origin_index} outside [0, {self.length})")

    @classmethod
    def from_letters(cls, letters, origin_index=0):
        arr = np.asarray(letters, dtype=np.uint8)
        if arr.ndim != 1:
            raise ValueError("letters must be one-dimensional")
        if arr.size and arr.max(initial=0) > 1:
            raise ValueError("letters must be 0 or 1")
        return cls(np.packbits(arr), int(arr.size), int(origin_index))

    @classmethod
    def from_string(cls, text, origin_index=0):
        text = text.strip()
        if set(text) <= set("ab"):
            letters = [0 if ch == "a" else 1 for ch in text]
        elif set(text) <= set("01"):
            letters = [int(ch) for ch in text]
        else:
            raise ValueError(f"word string must use 'ab' or '01', got {text[:20]!r}")
        return cls.from_letters(letters, origin_index)

    @cached_property
    def letters(self):
        out = np.unpackbits(self.packed, count=self.length)
        out.setflags(write=False)
        return out

    @property
    def first_cell(self):
        return -self.origin_index

    @property
    def end_cell(self):
        return self.length - self.origin_index

    def cells(self, start, stop):
        """letters for absolute cells start..stop-1"""
        if start < self.first_cell or stop > self.end_cell or start > stop:
            raise IndexError(
                f"cells [{start}, {stop}) outside word window "
                f"[{self.first_cell}, {self.end_cell})")
        return self.letters[start + self.origin_index: stop + self.origin_index]

    def to_string(self, alphabet="ab"):
        chars = _ALPHABETS[alphabet]
        return "".join(chars[x] for x in self.letters)

    def __len__(self):
        return self.length

    def __eq__(self, other):
        if not isinstance(other, Word):
            return NotImplemented
        return (self.length == other.length and self.origin_index == other.origin_index
                and np.array_equal(self.packed, other.packed))

    def __hash__(self):
        return hash((self.length, self.origin_index, self.packed.tobytes()))

    def __repr__(self):
        head = self.to_string("01")[:32]
        more = "..." if self.length > 32 else ""
        return f"Word({head}{more}, length={self.length}, origin={self.origin_index})"


@dataclass(frozen=True)
class BernoulliSource:
    """i.i.d. letters with P(letter 0) = p, P(letter 1) = 1 - p."""
    p: float
    seed: int
    stream_id: int = 0
    _key: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie strictly inside (0, 1), got {self.p}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "_key", (int(self.seed), int(self.stream_id) % 2 ** 64))

    def uniforms(self, start, stop):
        """U(0,1) draws for absolute indices start..stop-1 (Philox counters)."""
        n = stop - start
        if n <= 0:
            return np.empty(0)
        off = start + _PHILOX_OFFSET
        block, skip = divmod(off, 4)
        counter = np.array([block & 0xFFFFFFFFFFFFFFFF, block >> 64, 0, 0], dtype=np.uint64)
        gen = np.random.Philox(key=np.array(self._key, dtype=np.uint64), counter=counter)
        raw = gen.random_raw(n + skip)[skip:]
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def to_triple(self):
        return (self.p, self.seed, self.stream_id)

    @classmethod
    def from_triple(cls, triple):
        p, seed, stream = triple
        return cls(float(p), int(seed), int(stream))


def sample_letters(src, start, stop):
    """Letters at absolute indices start..stop-1 as a uint8 array."""
    return (src.uniforms(start, stop) >= src.p).astype(np.uint8)


def sample_word(src, start, stop):
    """Word over cells [start, stop); the window must cover cell 0."""
    if stop <= start:
        raise ValueError(f"empty window [{start}, {stop})")
    if not start <= 0 < stop:
        raise ValueError("window must contain cell 0 so the origin is inside the word")
    return Word.from_letters(sample_letters(src, start, stop), origin_index=-start)


def dimer_word(src, half_length):
    """Pairwise doubled Bernoulli word; pair n draws counter index n."""
    if half_length < 1:
        raise ValueError("half_length must be >= 1")
    pairs = sample_letters(src, 0, half_length)
    return Word.from_letters(np.repeat(pairs, 2))


def substitute(word, rule):
    try:
        img0, img1 = RULES[rule]
    except KeyError:
        raise ValueError(f"unknown substitution rule {rule!r}") from None
    x = word.letters
    out = np.empty(2 * x.size, dtype=np.uint8)
    out[0::2] = np.where(x == 0, img0[0], img1[0])
    out[1::2] = np.where(x == 0, img0[1], img1[1])
    return Word.from_letters(out, 2 * word.origin_index)


def substitution_power(rule, k, letter=0):
    """S^k(letter) as a Word."""
    w = Word.from_letters([letter])
    for _ in range(k):
        w = substitute(w, rule)
    return w
