"""Byte-level token files, domain mixtures and deterministic batch sampling.

Token file layout (little-endian, no padding)::

    magic        7 bytes  b"ESLMTOK"
    version      u32
    vocab_size   u32
    token_width  u16      bytes per token id
    token_count  u64
    payload      token_count * token_width bytes
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from eslm.model import TokenBatch

TOKEN_MAGIC = b"ESLMTOK"
TOKEN_VERSION = 1
_HEADER = struct.Struct("<7sIIHQ")
_WIDTH_DTYPES = {1: "<u1", 2: "<u2", 4: "<u4"}

TRAIN_STREAM = 0
VAL_STREAM = 1

# Seven-domain SlimPajama-6B mixture weights: DoReMi-tuned and (rounded) uniform.
DOREMI_WEIGHTS = {
    "arxiv": 0.04235,
    "book": 0.08201,
    "cc": 0.381,
    "c4": 0.1141,
    "github": 0.0654,
    "stackexchange": 0.0847,
    "wikipedia": 0.2305,
}
UNIFORM_WEIGHTS = {name: 0.1428 for name in DOREMI_WEIGHTS}


class TokenFileError(ValueError):
    pass


def width_for_vocab(vocab_size: int) -> int:
    for w in (1, 2, 4):
        if vocab_size <= 256**w:
            return w
    raise TokenFileError(f"vocab_size {vocab_size} does not fit in 4 bytes")


@dataclass
class TokenFile:
    tokens: np.ndarray
    vocab_size: int = 256
    version: int = TOKEN_VERSION

    @property
    def token_width(self) -> int:
        return width_for_vocab(self.vocab_size)

    @property
    def token_count(self) -> int:
        return int(self.tokens.size)

    def header_bytes(self) -> bytes:
        return _HEADER.pack(TOKEN_MAGIC, self.version, self.vocab_size, self.token_width, self.token_count)


def write_token_file(path, tokens, vocab_size: int = 256) -> TokenFile:
    tokens = np.asarray(tokens).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise TokenFileError(f"token ids must lie in [0, {vocab_size})")
    tf = TokenFile(tokens.astype(np.int64), vocab_size)
    with open(path, "wb") as fh:
        fh.write(tf.header_bytes())
        fh.write(tokens.astype(_WIDTH_DTYPES[tf.token_width]).tobytes())
    return tf


def read_token_file(path) -> TokenFile:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TokenFileError(f"{path}: truncated header")
        magic, version, vocab, width, count = _HEADER.unpack(head)
        if magic != TOKEN_MAGIC:
            raise TokenFileError(f"{path}: bad magic {magic!r}")
        if version != TOKEN_VERSION:
            raise TokenFileError(f"{path}: unsupported version {version}")
        if width not in _WIDTH_DTYPES:
            raise TokenFileError(f"{path}: unsupported token width {width}")
        payload = fh.read()
    if len(payload) != count * width:
        raise TokenFileError(f"{path}: payload is {len(payload)} bytes, header says {count * width}")
    tokens = np.frombuffer(payload, dtype=_WIDTH_DTYPES[width]).astype(np.int64)
    if tokens.size and tokens.max() >= vocab:
        raise TokenFileError(f"{path}: token id {tokens.max()} >= vocab_size {vocab}")
    return TokenFile(tokens, vocab, version)


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


def encode_corpus(text_input, out) -> TokenFile:
    """Byte-level encode raw ``bytes`` or the file at a path into a token file at ``out``."""
    if isinstance(text_input, (bytes, bytearray)):
        raw = bytes(text_input)
    else:
        raw = Path(text_input).read_bytes()
    return write_token_file(out, encode_bytes(raw), 256)


@dataclass(frozen=True)
class TokenView:
    """Contiguous slice ``[start, stop)`` of a domain's token array."""

    tokens: np.ndarray
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    def window(self, offset: int, length: int) -> np.ndarray:
        lo = self.start + offset
        if offset < 0 or lo + length > self.stop:
            raise IndexError(f"window [{lo}, {lo + length}) outside view [{self.start}, {self.stop})")
        return self.tokens[lo : lo + length]


def split(token_file, val_fraction: float) -> tuple[TokenView, TokenView]:
    """Reserve the contiguous tail of the tokens for validation."""
    if not 0.0 < val_fraction < 0.5:
        raise ValueError(f"val_fraction must lie in (0, 0.5), got {val_fraction}")
    tokens = token_file.tokens if isinstance(token_file, TokenFile) else np.asarray(token_file)
    n = int(tokens.size)
    n_val = math.floor(round(n * val_fraction, 9))
    if n_val < 1 or n - n_val < 1:
        raise ValueError(f"{n} tokens is too small to split at {val_fraction}")
    boundary = n - n_val
    return TokenView(tokens, 0, boundary), TokenView(tokens, boundary, n)


@dataclass
class Domain:
    name: str
    weight: float
    path: str | None = None
    tokens: np.ndarray | None = None

    def load(self) -> np.ndarray:
        if self.tokens is None:
            if self.path is None:
                raise ValueError(f"domain {self.name!r} has neither tokens nor a path")
            self.tokens = read_token_file(self.path).tokens
        return self.tokens


class MixtureSpec:
    """Weighted list of domains; weights are normalized on construction."""

    def __init__(self, domains: list[Domain]):
        if not domains:
            raise ValueError("a mixture needs at least one domain")
        total = sum(d.weight for d in domains)
        if any(d.weight < 0 for d in domains) or total <= 0:
            raise ValueError("domain weights must be >= 0 with a positive sum")
        self.domains = domains
        self.weights = np.array([d.weight / total for d in domains], dtype=np.float64)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]

    @classmethod
    def parse(cls, text: str, base_dir=None) -> "MixtureSpec":
        """One ``name weight path`` triple per line; ``#`` starts a comment."""
        domains, errors = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 2)
            if len(parts) != 3:
                errors.append(f"line {lineno}: expected 'name weight path', got {line!r}")
                continue
            name, w, path = parts
            try:
                weight = float(w)
            except ValueError:
                errors.append(f"line {lineno}: weight {w!r} is not a number")
                continue
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            domains.append(Domain(name, weight, path))
        if errors:
            raise ValueError("invalid mixture manifest:\n  " + "\n  ".join(errors))
        return cls(domains)

    @classmethod
    def load(cls, path) -> "MixtureSpec":
        path = Path(path)
        return cls.parse(path.read_text(), base_dir=str(path.parent))

    def to_text(self) -> str:
        return "".join(f"{d.name} {w!r} {d.path}\n" for d, w in zip(self.domains, self.weights))

    def split(self, val_fraction: float) -> tuple["Mixture", "Mixture"]:
        train, val = [], []
        for d in self.domains:
            tr, va = split(d.load(), val_fraction)
            train.append(tr)
            val.append(va)
        return Mixture(self.names, self.weights, train), Mixture(self.names, self.weights, val)

    def full(self) -> "Mixture":
        views = [TokenView(d.load(), 0, int(d.load().size)) for d in self.domains]
        return Mixture(self.names, self.weights, views)


@dataclass
class Mixture:
    """Sampling view over one split of every domain."""

    names: list[str]
    weights: np.ndarray
    views: list[TokenView]


def _sequence_rng(seed: int, stream: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, step, index]))


def sample_batch(mixture: Mixture, batch_size: int, seq_len: int, seed: int, step: int,
                 stream: int = TRAIN_STREAM) -> TokenBatch:
    """Draw a domain per sequence by weight, then a uniform window of ``seq_len + 1`` tokens.

    The result is a pure function of ``(seed, stream, step)``; sequence i only
    depends on ``(seed, stream, step, i)``.
    """
    for name, view in zip(mixture.names, mixture.views):
        if len(view) < seq_len + 1:
            raise ValueError(f"domain {name!r} has {len(view)} tokens, need >= {seq_len + 1}")
    windows = np.empty((batch_size, seq_len + 1), dtype=np.int64)
    labels = np.empty(batch_size, dtype=np.int64)
    n_dom = len(mixture.views)
    for i in range(batch_size):
        rng = _sequence_rng(seed, stream, step, i)
        d = int(rng.choice(n_dom, p=mixture.weights)) if n_dom > 1 else 0
        view = mixture.views[d]
        offset = int(rng.integers(0, len(view) - seq_len))
        windows[i] = view.window(offset, seq_len + 1)
        labels[i] = d
    return TokenBatch.from_windows(windows, labels)


def local_corpus(min_bytes: int = 0) -> dict[str, bytes]:
    """English prose available offline from the Python installation.

    Two domains: ``reference`` (the interpreter's bundled help topics) and
    ``docstrings`` (module, class and function docstrings of the pure-Python
    standard library).  Deterministic for a given Python build.
    """
    import ast
    import sysconfig

    from pydoc_data.topics import topics

    reference = "\n\n".join(topics[k] for k in sorted(topics))
    chunks = []
    for p in sorted(Path(sysconfig.get_paths()["stdlib"]).glob("*.py")):
        try:
            tree = ast.parse(p.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc:
                    chunks.append(doc)
    out = {"reference": reference.encode("utf-8"), "docstrings": "\n\n".join(chunks).encode("utf-8")}
    total = sum(len(v) for v in out.values())
    if total < min_bytes:
        raise RuntimeError(f"local corpus has {total} bytes, fewer than the requested {min_bytes}")
    return out


def write_local_corpus(out_dir, min_bytes: int = 1 << 20) -> Path:
    """Encode :func:`local_corpus` into token files plus a mixture manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = local_corpus(min_bytes)
    total = sum(len(v) for v in corpus.values())
    lines = []
    for name, raw in corpus.items():
        encode_corpus(raw, out_dir / f"{name}.tok")
        lines.append(f"{name} {len(raw) / total!r} {name}.tok")
    manifest = out_dir / "mixture.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
