"""Words over the (D+1)-letter alphabet and truncated tensor coefficients.

Letters are the integers 1..n with n = D+1; letter 1 is time. A word is a
tuple of letters, the empty tuple being the empty word. Every word has a
packed integer key: the number of shorter words plus its base-n rank, so
key order is the canonical (length, lexicographic) order.
"""

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_ALPHABET = 9          # D <= 8, one digit per letter in text dumps
DENSE_LIMIT = 1 << 22     # accumulate densely below this many words
CHUNK_ENTRIES = 1 << 22   # max broadcast entries per product block


# --- Word encoding ---

@lru_cache(maxsize=None)
def _offsets(n, level):
    """offsets[m] = number of words shorter than m, for m = 0..level+1."""
    out = np.zeros(level + 2, dtype=np.int64)
    for m in range(level + 1):
        out[m + 1] = out[m] + n ** m
    out.setflags(write=False)
    return out


def word_count(n, level):
    """Number of words of length <= level."""
    return int(_offsets(n, level)[-1])


def as_word(w):
    """Coerce "12", "e", "", [1, 2] or (1, 2) to a letter tuple."""
    if isinstance(w, str):
        if w in ("", "e"):
            return ()
        return tuple(int(c) for c in w)
    return tuple(int(c) for c in w)


def word_to_key(word, n):
    word = as_word(word)
    rank = 0
    for letter in word:
        if not 1 <= letter <= n:
            raise ValueError(f"letter {letter} outside alphabet 1..{n}")
        rank = rank * n + (letter - 1)
    return int(_offsets(n, len(word))[len(word)]) + rank


def key_to_word(key, n):
    m = 0
    while word_count(n, m) <= key:
        m += 1
    rank = int(key) - int(_offsets(n, m)[m])
    letters = []
    for _ in range(m):
        rank, d = divmod(rank, n)
        letters.append(d + 1)
    return tuple(reversed(letters))


def _split_keys(keys, n, level):
    """Vectorized key -> (length, rank)."""
    offs = _offsets(n, level)
    lengths = np.searchsorted(offs, keys, side="right") - 1
    return lengths, keys - offs[lengths]


def _digits(ranks, n, m):
    """Rows of base-n digits (0-based letters) for words of length m."""
    if m == 0:
        return np.zeros((len(ranks), 0), dtype=np.int64)
    powers = n ** np.arange(m - 1, -1, -1, dtype=np.int64)
    return (ranks[:, None] // powers[None, :]) % n


def enumerate_words(alphabet_size, level):
    """All words of length <= level in canonical (length, lex) order."""
    if alphabet_size < 1 or level < 0:
        raise ValueError("alphabet_size >= 1 and level >= 0 required")
    letters = range(1, alphabet_size + 1)
    out = []
    for m in range(level + 1):
        out.extend(itertools.product(letters, repeat=m))
    return out


def format_word(word):
    return "".join(str(c) for c in word) if word else "e"


# --- Accumulation ---

class _Accumulator:
    """Sums (key, weight) batches; dense bincount when the key space is small."""

    def __init__(self, n, level):
        self.n = n
        self.level = level
        self.size = word_count(n, level)
        if self.size <= DENSE_LIMIT:
            self._dense = np.zeros(self.size)
            self._keys = None
        else:
            self._dense = None
            self._keys, self._vals = [], []

    def add(self, keys, weights):
        keys = np.asarray(keys, dtype=np.int64).ravel()
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if keys.size == 0:
            return
        if self._dense is not None:
            self._dense += np.bincount(keys, weights=weights, minlength=self.size)
        else:
            self._keys.append(keys)
            self._vals.append(weights)

    def result(self):
        if self._dense is not None:
            keys = np.flatnonzero(self._dense)
            return TruncatedTensor(self.n, self.level, keys, self._dense[keys], _trusted=True)
        if not self._keys:
            return TruncatedTensor.zero(self.n, self.level)
        return TruncatedTensor(self.n, self.level,
                               np.concatenate(self._keys), np.concatenate(self._vals))


# --- Tensors ---

class TruncatedTensor:
    """Sparse map word -> coefficient for words of length <= level.

    Stored as sorted packed keys and their nonzero coefficients. Instances
    are immutable; every operation returns a new tensor.
    """

    __slots__ = ("alphabet_size", "level", "keys", "values")

    def __init__(self, alphabet_size, level, keys=(), values=(), _trusted=False):
        if not 1 <= alphabet_size <= MAX_ALPHABET:
            raise ValueError(f"alphabet_size must be in 1..{MAX_ALPHABET}")
        if level < 0:
            raise ValueError("level must be >= 0")
        keys = np.asarray(keys, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if keys.shape != values.shape:
            raise ValueError("keys and values differ in length")
        if not _trusted and keys.size:
            inside = (keys >= 0) & (keys < word_count(alphabet_size, level))
            keys, values = keys[inside], values[inside]
            uniq, inv = np.unique(keys, return_inverse=True)
            values = np.bincount(inv, weights=values, minlength=len(uniq))
            nz = values != 0.0
            keys, values = uniq[nz], values[nz]
        keys.setflags(write=False)
        values.setflags(write=False)
        self.alphabet_size = alphabet_size
        self.level = level
        self.keys = keys
        self.values = values

    # constructors

    @classmethod
    def zero(cls, alphabet_size, level):
        return cls(alphabet_size, level, _trusted=True)

    @classmethod
    def unit(cls, alphabet_size, level, coeff=1.0):
        """coeff times the empty word."""
        return cls(alphabet_size, level, [0], [coeff])

    @classmethod
    def letter(cls, alphabet_size, level, letter, coeff=1.0):
        return cls.from_words(alphabet_size, level, {(letter,): coeff})

    @classmethod
    def from_words(cls, alphabet_size, level, coeffs):
        """Build from a mapping word -> coefficient (words as tuples or digit strings)."""
        keys, vals = [], []
        for w, c in coeffs.items():
            w = as_word(w)
            if len(w) > level:
                raise ValueError(f"word {format_word(w)} longer than level {level}")
            keys.append(word_to_key(w, alphabet_size))
            vals.append(float(c))
        return cls(alphabet_size, level, keys, vals)

    @classmethod
    def from_dense(cls, alphabet_size, level, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (word_count(alphabet_size, level),):
            raise ValueError("dense vector has the wrong length")
        keys = np.flatnonzero(vec)
        return cls(alphabet_size, level, keys, vec[keys], _trusted=True)

    @classmethod
    def from_levels(cls, alphabet_size, levels):
        """Build from per-level dense arrays, levels[m] of length n**m."""
        return cls.from_dense(alphabet_size, len(levels) - 1,
                              np.concatenate([np.ravel(v) for v in levels]))

    # views

    def to_dense(self, level=None):
        level = self.level if level is None else level
        out = np.zeros(word_count(self.alphabet_size, level))
        inside = self.keys < out.size
        out[self.keys[inside]] = self.values[inside]
        return out

    def levels(self, level=None):
        """Per-level dense arrays; entry m has length n**m in lex order."""
        level = self.level if level is None else level
        dense = self.to_dense(level)
        offs = _offsets(self.alphabet_size, level)
        return [dense[offs[m]:offs[m + 1]] for m in range(level + 1)]

    def coeff(self, word):
        key = word_to_key(word, self.alphabet_size)
        i = np.searchsorted(self.keys, key)
        if i < self.keys.size and self.keys[i] == key:
            return float(self.values[i])
        return 0.0

    def items(self):
        """(word, coefficient) pairs in canonical order."""
        for k, v in zip(self.keys, self.values):
            yield key_to_word(int(k), self.alphabet_size), float(v)

    def to_dict(self):
        return dict(self.items())

    def word_lengths(self):
        return _split_keys(self.keys, self.alphabet_size, self.level)[0]

    def max_length(self):
        """Length of the longest stored word (-1 for the zero tensor)."""
        if self.keys.size == 0:
            return -1
        return int(self.word_lengths().max())

    def norm_max(self):
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def is_zero(self):
        return self.keys.size == 0

    def __len__(self):
        return int(self.keys.size)

    def __repr__(self):
        return (f"TruncatedTensor(alphabet={self.alphabet_size}, level={self.level}, "
                f"nnz={len(self)})")

    # linear structure

    def _check(self, other):
        if not isinstance(other, TruncatedTensor):
            raise TypeError("expected a TruncatedTensor")
        if other.alphabet_size != self.alphabet_size:
            raise ValueError(f"alphabet mismatch: {self.alphabet_size} vs {other.alphabet_size}")

    def __add__(self, other):
        self._check(other)
        return TruncatedTensor(self.alphabet_size, max(self.level, other.level),
                               np.concatenate([self.keys, other.keys]),
                               np.concatenate([self.values, other.values]))

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return TruncatedTensor(self.alphabet_size, self.level, self.keys, -self.values,
                               _trusted=True)

    def __mul__(self, scalar):
        scalar = float(scalar)
        if scalar == 0.0:
            return TruncatedTensor.zero(self.alphabet_size, self.level)
        return TruncatedTensor(self.alphabet_size, self.level, self.keys,
                               self.values * scalar, _trusted=True)

    __rmul__ = __mul__

    def truncate(self, level):
        """Drop words longer than level; the result has level `level`."""
        inside = self.keys < word_count(self.alphabet_size, level)
        return TruncatedTensor(self.alphabet_size, level, self.keys[inside],
                               self.values[inside], _trusted=True)


def _by_length(t):
    """Group a tensor's words: {length: (ranks, coefficients)}."""
    lengths, ranks = _split_keys(t.keys, t.alphabet_size, t.level)
    out = {}
    for m in np.unique(lengths):
        sel = lengths == m
        out[int(m)] = (ranks[sel], t.values[sel])
    return out


def _check_pair(a, b):
    if a.alphabet_size != b.alphabet_size:
        raise ValueError(f"alphabet mismatch: {a.alphabet_size} vs {b.alphabet_size}")


# --- Products ---

def concat(a, b, level=None):
    """Tensor (concatenation) product, truncated at level (default a.level + b.level)."""
    _check_pair(a, b)
    n = a.alphabet_size
    level = a.level + b.level if level is None else level
    acc = _Accumulator(n, level)
    offs = _offsets(n, level)
    ga, gb = _by_length(a), _by_length(b)
    for p, (ra, ca) in ga.items():
        for q, (rb, cb) in gb.items():
            if p + q > level:
                continue
            shift = np.int64(n ** q)
            rows = max(1, CHUNK_ENTRIES // max(1, rb.size))
            for s in range(0, ra.size, rows):
                keys = offs[p + q] + ra[s:s + rows, None] * shift + rb[None, :]
                acc.add(keys, ca[s:s + rows, None] * cb[None, :])
    return acc.result()


@lru_cache(maxsize=None)
def _interleavings(n, p, q):
    """Place values of every shuffle of a length-p word with a length-q word.

    Returns (wu, wv): wu[c, i] is the base-n place value that letter i of the
    first word takes in interleaving c, likewise wv for the second word.
    """
    total = p + q
    place = n ** np.arange(total - 1, -1, -1, dtype=np.int64)
    combos = list(itertools.combinations(range(total), p))
    wu = np.zeros((len(combos), p), dtype=np.int64)
    wv = np.zeros((len(combos), q), dtype=np.int64)
    for c, pos_u in enumerate(combos):
        chosen = set(pos_u)
        wu[c] = place[list(pos_u)]
        wv[c] = place[[i for i in range(total) if i not in chosen]]
    wu.setflags(write=False)
    wv.setflags(write=False)
    return wu, wv


def shuffle(a, b, level=None):
    """Shuffle product, truncated at level (default a.level + b.level).

    Every shuffle of u and v has length |u|+|v|, so word pairs past the
    level are skipped before any interleaving is formed.
    """
    _check_pair(a, b)
    n = a.alphabet_size
    level = a.level + b.level if level is None else level
    acc = _Accumulator(n, level)
    offs = _offsets(n, level)
    ga, gb = _by_length(a), _by_length(b)
    for p, (ra, ca) in ga.items():
        da = _digits(ra, n, p)
        for q, (rb, cb) in gb.items():
            if p + q > level:
                continue
            wu, wv = _interleavings(n, p, q)
            part_b = _digits(rb, n, q) @ wv.T                  # (B, C)
            rows = max(1, CHUNK_ENTRIES // max(1, part_b.size))
            for s in range(0, ra.size, rows):
                part_a = da[s:s + rows] @ wu.T                 # (A, C)
                keys = offs[p + q] + part_a[:, None, :] + part_b[None, :, :]
                weights = (ca[s:s + rows, None] * cb[None, :])[:, :, None]
                acc.add(keys, np.broadcast_to(weights, keys.shape))
    return acc.result()


def shuffle_power(a, k, level):
    """a shuffled with itself k times (unit for k = 0)."""
    out = TruncatedTensor.unit(a.alphabet_size, level)
    for _ in range(k):
        out = shuffle(out, a, level)
    return out


def pair(ell, g):
    """Hilbert-Schmidt pairing: sum over common words of coefficient products."""
    _check_pair(ell, g)
    _, ia, ib = np.intersect1d(ell.keys, g.keys, assume_unique=True, return_indices=True)
    if ia.size == 0:
        return 0.0
    return float(np.dot(ell.values[ia], g.values[ib]))


def right_concat_letter(ell, letter, level=None):
    """Append letter to every word of ell; words past level are dropped."""
    n = ell.alphabet_size
    if not 1 <= letter <= n:
        raise ValueError(f"letter {letter} outside alphabet 1..{n}")
    level = ell.level + 1 if level is None else level
    lengths, ranks = _split_keys(ell.keys, n, ell.level)
    keep = lengths + 1 <= level
    offs = _offsets(n, level)
    keys = offs[lengths[keep] + 1] + ranks[keep] * n + (letter - 1)
    return TruncatedTensor(n, level, keys, ell.values[keep])


def time_power(alphabet_size, m, level=None):
    """The word 1^m (time letter repeated m times); pairs with S_t to t^m/m!."""
    level = m if level is None else level
    return TruncatedTensor.from_words(alphabet_size, level, {(1,) * m: 1.0})


def tensor_exp(delta, level):
    """Truncated tensor exponential sum_{k<=level} delta^k / k!."""
    if delta.coeff(()) != 0.0:
        raise ValueError("tensor_exp needs a zero coefficient on the empty word")
    n = delta.alphabet_size
    if delta.is_zero() or delta.max_length() == 1:
        return TruncatedTensor.from_levels(n, exp_level_one(delta.levels(1)[1], level))
    out = TruncatedTensor.unit(n, level)
    power = TruncatedTensor.unit(n, level)
    for k in range(1, level + 1):
        power = concat(power, delta, level) * (1.0 / k)
        out = out + power
    return out


def exp_level_one(increment, level):
    """Per-level dense exp of a pure level-1 tensor with coefficients `increment`."""
    increment = np.asarray(increment, dtype=np.float64)
    out = [np.ones(1)]
    for m in range(1, level + 1):
        out.append(np.multiply.outer(out[-1], increment).ravel() / m)
    return out


# --- Diagnostics ---

@dataclass(frozen=True)
class GrowthEstimate:
    per_level_max: tuple
    rate: float


def growth_estimate(ell):
    """Largest |coefficient| per word length and the rate max_m (max_m)^(1/m)."""
    lengths = ell.word_lengths()
    per_level = [0.0] * (ell.level + 1)
    for m, v in zip(lengths, np.abs(ell.values)):
        per_level[m] = max(per_level[m], float(v))
    rate = 0.0
    for m in range(1, ell.level + 1):
        if per_level[m] > 0.0:
            rate = max(rate, per_level[m] ** (1.0 / m))
    return GrowthEstimate(tuple(per_level), rate)


# --- Text format ---

def format_tensor(t):
    """Debug dump: one "word<TAB>coefficient" line per stored word."""
    lines = [f"{format_word(w)}\t{c!r}" for w, c in t.items()]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_tensor(text, alphabet_size, level=None):
    coeffs = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, _, value = line.partition("\t")
        coeffs[as_word(word)] = coeffs.get(as_word(word), 0.0) + float(value)
    if level is None:
        level = max((len(w) for w in coeffs), default=0)
    return TruncatedTensor.from_words(alphabet_size, level, coeffs)


def write_tensor(path, t):
    with open(path, "w") as f:
        f.write(format_tensor(t))

