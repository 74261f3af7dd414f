"""Binary corpus format: streaming-friendly fixed-record layout.

Layout (all little-endian):

    header  "XFICEMB1" | version u32 | count u32 | d_img u32 | d_txt u32 | n_labels u32
    record  id u64 | d_img float32 | d_txt float32 | ceil(n_labels/8) label bytes

Label bits are packed LSB-first within each byte.  Vectors are stored in
32-bit precision and widened to float64 on decode; encode casts through
float32, so decode(encode(x)) is bitwise-stable for any x.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, FormatError, UsageError

MAGIC = b"XFICEMB1"
VERSION = 1
HEADER_SIZE = 28
_HEADER_STRUCT = struct.Struct("<8s5I")


@dataclass
class Corpus:
    """In-memory paired-embedding corpus.

    ids are uint64 and unique; img/txt are float64 row matrices; labels is a
    boolean (n, n_labels) matrix or None when the corpus carries no labels.
    """

    ids: np.ndarray
    img: np.ndarray
    txt: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.img = np.ascontiguousarray(self.img, dtype=np.float64)
        self.txt = np.ascontiguousarray(self.txt, dtype=np.float64)
        if self.img.ndim != 2 or self.txt.ndim != 2:
            raise UsageError("corpus vectors must be 2-D (n, d) arrays")
        if not (len(self.ids) == len(self.img) == len(self.txt)):
            raise UsageError("ids, img, and txt must have matching lengths")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=bool)
            if self.labels.ndim != 2 or len(self.labels) != len(self.ids):
                raise UsageError("labels must be a (n, n_labels) boolean matrix")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d_img(self) -> int:
        return self.img.shape[1]

    @property
    def d_txt(self) -> int:
        return self.txt.shape[1]

    @property
    def n_labels(self) -> int:
        return 0 if self.labels is None else self.labels.shape[1]

    def take(self, index: np.ndarray) -> "Corpus":
        """Row-subset view (copying) in the given order."""
        return Corpus(
            ids=self.ids[index],
            img=self.img[index],
            txt=self.txt[index],
            labels=None if self.labels is None else self.labels[index],
        )


def record_size(d_img: int, d_txt: int, n_labels: int) -> int:
    return 8 + 4 * (d_img + d_txt) + (n_labels + 7) // 8


def encode_corpus(corpus: Corpus) -> bytes:
    """Serialize a corpus to the binary format."""
    n, d_img, d_txt, n_labels = corpus.n, corpus.d_img, corpus.d_txt, corpus.n_labels
    header = _HEADER_STRUCT.pack(MAGIC, VERSION, n, d_img, d_txt, n_labels)
    if n == 0:
        return header

    rec = record_size(d_img, d_txt, n_labels)
    buf = np.zeros((n, rec), dtype=np.uint8)
    buf[:, :8] = corpus.ids.astype("<u8").view(np.uint8).reshape(n, 8)
    off = 8
    buf[:, off : off + 4 * d_img] = (
        corpus.img.astype("<f4").view(np.uint8).reshape(n, 4 * d_img)
    )
    off += 4 * d_img
    buf[:, off : off + 4 * d_txt] = (
        corpus.txt.astype("<f4").view(np.uint8).reshape(n, 4 * d_txt)
    )
    off += 4 * d_txt
    if n_labels:
        buf[:, off:] = np.packbits(corpus.labels, axis=1, bitorder="little")
    return header + buf.tobytes()


def decode_corpus(data: bytes) -> Corpus:
    """Parse the binary format back into a Corpus, widening vectors to float64."""
    if len(data) < HEADER_SIZE:
        raise FormatError(
            f"file too short for header: {len(data)} bytes < {HEADER_SIZE}", offset=0
        )
    magic, version, n, d_img, d_txt, n_labels = _HEADER_STRUCT.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=8)
    rec = record_size(d_img, d_txt, n_labels)
    expected = HEADER_SIZE + n * rec
    if len(data) != expected:
        raise FormatError(
            f"record count {n} implies {expected} bytes, file has {len(data)}",
            offset=min(len(data), expected),
        )

    if n == 0:
        return Corpus(
            ids=np.zeros(0, dtype=np.uint64),
            img=np.zeros((0, d_img)),
            txt=np.zeros((0, d_txt)),
            labels=np.zeros((0, n_labels), dtype=bool) if n_labels else None,
        )

    buf = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE).reshape(n, rec)
    ids = buf[:, :8].copy().view("<u8").reshape(n).astype(np.uint64)
    off = 8
    img = buf[:, off : off + 4 * d_img].copy().view("<f4").reshape(n, d_img)
    off += 4 * d_img
    txt = buf[:, off : off + 4 * d_txt].copy().view("<f4").reshape(n, d_txt)
    off += 4 * d_txt
    labels = None
    if n_labels:
        bits = np.unpackbits(buf[:, off:], axis=1, bitorder="little")[:, :n_labels]
        labels = bits.astype(bool)
    return Corpus(ids=ids, img=img, txt=txt, labels=labels)


def write_corpus(path, corpus: Corpus) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_corpus(corpus))


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        return decode_corpus(fh.read())


def validate_corpus(corpus: Corpus) -> None:
    """Ingest-time checks beyond format validity.

    Rejects duplicate ids and degenerate (all-zero / non-finite) embedding
    halves; the codec itself round-trips such records faithfully, but no
    pipeline stage accepts them.
    """
    if len(np.unique(corpus.ids)) != corpus.n:
        ids, counts = np.unique(corpus.ids, return_counts=True)
        dup = int(ids[counts > 1][0])
        raise UsageError(f"duplicate sample id {dup} in corpus")
    for name, mat in (("img", corpus.img), ("txt", corpus.txt)):
        finite = np.all(np.isfinite(mat), axis=1)
        if not np.all(finite):
            bad = int(corpus.ids[np.flatnonzero(~finite)[0]])
            raise DegenerateVectorError(f"sample id {bad} has non-finite {name} vector")
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms == 0.0):
            bad = int(corpus.ids[np.flatnonzero(norms == 0.0)[0]])
            raise DegenerateVectorError(f"sample id {bad} has all-zero {name} vector")
