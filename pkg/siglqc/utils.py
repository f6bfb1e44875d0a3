"""Shared error types, timing, hashing, and fixed-order reductions."""

import hashlib
import time


class SigLQCError(Exception):
    """Base class for errors surfaced by the sig-lqc command line."""

    exit_code = 1


class ConfigError(SigLQCError):
    """Malformed or inconsistent experiment/problem configuration."""

    exit_code = 1


class NumericalError(SigLQCError):
    """Non-PD Hessian, flagged-path abort, or failed path generation."""

    exit_code = 2


def content_hash(paths, extra=""):
    """sha256 hex digest over the bytes of each file in order, then `extra`."""
    h = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(65536), b""):
                h.update(block)
        h.update(b"\0")
    h.update(extra.encode())
    return h.hexdigest()


def tree_reduce(items, combine):
    """Pairwise reduction in index order: ((0,1),(2,3)),... .

    The pairing depends only on len(items), so the result is the same
    whichever worker produced each item.
    """
    items = list(items)
    if not items:
        raise ValueError("tree_reduce needs at least one item")
    while len(items) > 1:
        paired = []
        for i in range(0, len(items) - 1, 2):
            paired.append(combine(items[i], items[i + 1]))
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


def chunk_ranges(n, chunk):
    """Split range(n) into consecutive (start, stop) blocks of size chunk."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


class Stopwatch:
    """Monotonic wall-clock timer for per-run timings."""

    def __init__(self):
        self._start = time.monotonic()

    def restart(self):
        self._start = time.monotonic()

    def elapsed(self):
        return time.monotonic() - self._start


class ProgressPrinter:
    """Tagged progress lines, rate-limited so long loops do not spam."""

    def __init__(self, tag, hz=1.0, quiet=False):
        self.tag = tag
        self.quiet = quiet
        self._interval = 1.0 / hz if hz > 0 else 0
        self._last = 0.0

    def say(self, msg):
        if not self.quiet:
            print(f"[{self.tag}] {msg}")

    def tick(self, msg):
        """Print msg only if the rate interval has elapsed."""
        now = time.monotonic()
        if now - self._last >= self._interval:
            self._last = now
            self.say(msg)
