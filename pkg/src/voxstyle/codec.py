"""Residual vector-quantized codec between feature frames and token grids.

A token grid is an integer array of shape ``[levels, frames]`` (level-major):
row ``t`` holds the index chosen at quantizer level ``t`` for every frame.
Codebooks are fitted level by level with k-means on the running residual and
frozen afterwards. Index 0 of every fitted level is the zero vector, so adding
a level can never increase a frame's reconstruction error.
"""

import struct

import numpy as np

CODEBOOK_MAGIC = b"VXCB"
CODEBOOK_VERSION = 1
_CHUNK = 512


class CodecError(ValueError):
    pass


class CodebookSet:
    """Frozen per-level codebooks, stored as one array ``[levels, vocab, dim]``."""

    def __init__(self, books):
        books = np.asarray(books, dtype=np.float64)
        if books.ndim != 3 or books.shape[0] < 1 or books.shape[1] < 1:
            raise CodecError(f"codebooks must be [levels, vocab, dim], got {books.shape}")
        if not np.all(np.isfinite(books)):
            raise CodecError("codebook rows must be finite")
        self.books = books
        self.books.setflags(write=False)

    @property
    def levels(self):
        return self.books.shape[0]

    @property
    def vocab_size(self):
        return self.books.shape[1]

    @property
    def dim(self):
        return self.books.shape[2]

    def truncated(self, levels):
        return CodebookSet(self.books[:levels])

    def __eq__(self, other):
        return isinstance(other, CodebookSet) and np.array_equal(self.books, other.books)


def _nearest(residual, book):
    # Squared distances by explicit differences so exact ties resolve to the
    # lowest index (np.argmin returns the first minimum).
    out = np.empty(residual.shape[0], dtype=np.int64)
    for start in range(0, residual.shape[0], _CHUNK):
        block = residual[start:start + _CHUNK]
        d = ((block[:, None, :] - book[None, :, :]) ** 2).sum(-1)
        out[start:start + _CHUNK] = np.argmin(d, axis=1)
    return out


def rvq_quantize(v, books):
    """Quantize a single feature vector; returns ``(indices, reconstruction)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != books.dim:
        raise CodecError(f"vector of dim {v.shape} does not match codebook dim {books.dim}")
    if not np.all(np.isfinite(v)):
        raise CodecError("input vector must be finite")
    residual = v.copy()
    recon = np.zeros_like(v)
    indices = []
    for book in books.books:
        idx = int(_nearest(residual[None, :], book)[0])
        indices.append(idx)
        recon = recon + book[idx]
        residual = v - recon
    return indices, recon


def encode(frames, books):
    """Tokenize ``[N, F]`` frames into a ``[levels, N]`` grid."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise CodecError("encode needs a non-empty [N, F] frame matrix")
    if frames.shape[1] != books.dim:
        raise CodecError(f"feature dim {frames.shape[1]} != codebook dim {books.dim}")
    if not np.all(np.isfinite(frames)):
        raise CodecError("frames must be finite")
    grid = np.empty((books.levels, frames.shape[0]), dtype=np.int64)
    recon = np.zeros_like(frames)
    for t, book in enumerate(books.books):
        idx = _nearest(frames - recon, book)
        grid[t] = idx
        recon = recon + book[idx]
    return grid


def lookup_sum(books, grid):
    """Sum of per-level codeword lookups; works on numpy arrays and torch tensors.

    ``books`` is ``[levels, vocab, dim]`` and ``grid`` is ``[..., levels, N]``;
    the result is ``[..., N, dim]``.
    """
    out = books[0][grid[..., 0, :]]
    for t in range(1, grid.shape[-2]):
        out = out + books[t][grid[..., t, :]]
    return out


def check_grid(grid, books):
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[1] == 0:
        raise CodecError("token grid must be a non-empty [levels, N] matrix")
    if grid.shape[0] > books.levels:
        raise CodecError(f"grid has {grid.shape[0]} levels, codebooks only {books.levels}")
    if not np.issubdtype(grid.dtype, np.integer):
        raise CodecError("token grid must hold integers")
    if grid.min() < 0 or grid.max() >= books.vocab_size:
        raise CodecError(f"token index out of range [0, {books.vocab_size})")
    return grid


def decode(grid, books):
    """Reconstruct ``[N, F]`` frames from a token grid."""
    grid = check_grid(grid, books)
    return lookup_sum(books.books, grid)


def fit_codebooks(frames, levels=4, vocab_size=256, seed=0, iters=30):
    """Fit residual codebooks with k-means, one level at a time."""
    from sklearn.cluster import KMeans

    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise CodecError("fit_codebooks needs a non-empty [N, F] matrix")
    if vocab_size < 2:
        raise CodecError("vocab_size must be at least 2 (index 0 is reserved for zero)")
    residual = frames.copy()
    books = []
    for t in range(levels):
        uniq = np.unique(residual, axis=0)
        k = min(vocab_size - 1, uniq.shape[0])
        km = KMeans(n_clusters=k, n_init=1, max_iter=iters, random_state=seed + t,
                    algorithm="lloyd")
        km.fit(residual)
        centers = km.cluster_centers_
        if k < vocab_size - 1:
            # Duplicate rows never win a tie against their lower-index original.
            reps = np.resize(np.arange(k), vocab_size - 1 - k)
            centers = np.concatenate([centers, centers[reps]], axis=0)
        book = np.concatenate([np.zeros((1, frames.shape[1])), centers], axis=0)
        book = np.ascontiguousarray(book, dtype=np.float64)
        books.append(book)
        residual = residual - book[_nearest(residual, book)]
    return CodebookSet(np.stack(books))


def reconstruction_error(frames, books, levels=None):
    """Per-frame Euclidean reconstruction error using the first ``levels`` levels."""
    cb = books if levels is None else books.truncated(levels)
    return np.linalg.norm(decode(encode(frames, cb), cb) - frames, axis=1)


def save_codebooks(path, books, frame_rate=50.0):
    """Binary container: magic, version, levels, vocab, dim, frame rate, then
    little-endian float64 codebooks in row-major ``[levels, vocab, dim]`` order."""
    header = CODEBOOK_MAGIC + struct.pack("<IIIId", CODEBOOK_VERSION, books.levels,
                                          books.vocab_size, books.dim, float(frame_rate))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(books.books, dtype="<f8").tobytes())


def load_codebooks(path):
    """Returns ``(CodebookSet, frame_rate)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CODEBOOK_MAGIC:
        raise CodecError(f"{path}: not a codebook file")
    version, levels, vocab, dim, frame_rate = struct.unpack_from("<IIIId", data, 4)
    if version != CODEBOOK_VERSION:
        raise CodecError(f"{path}: unsupported codebook version {version}")
    offset = 4 + struct.calcsize("<IIIId")
    body = np.frombuffer(data, dtype="<f8", offset=offset)
    if body.size != levels * vocab * dim:
        raise CodecError(f"{path}: truncated codebook payload")
    return CodebookSet(body.reshape(levels, vocab, dim).astype(np.float64)), frame_rate


def save_tokens(path, grid):
    """Token file: ``.npy`` int32 matrix ``[levels, N]``, level-major rows."""
    np.save(path, np.ascontiguousarray(grid, dtype=np.int32))


def load_tokens(path):
    return np.load(path).astype(np.int64)
