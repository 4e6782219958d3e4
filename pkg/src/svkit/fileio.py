"""Versioned binary file formats.

Every format opens with a 4-byte magic string and a one-byte version.
Integer header fields are unsigned 32-bit little-endian; floating-point
payloads are IEEE-754 64-bit little-endian, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

FEATURE_MAGIC = b"SVFE"
POSTERIOR_MAGIC = b"SVPO"
STATS_MAGIC = b"SVST"
GMM_MAGIC = b"SVGM"
TV_MAGIC = b"SVTV"
PLDA_MAGIC = b"SVPL"
TDNN_MAGIC = b"SVNN"
IVECTOR_MAGIC = b"SVIV"
LABELS_MAGIC = b"SVLB"

FORMAT_VERSION = 1

_KIND_CODES = {"speaker": 0, "asr": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

_ACTIVATION_CODES = {"none": 0, "pnorm": 1, "softmax": 2}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _check_header(fh, magic: bytes, path) -> None:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, got {got!r}")
    version = _read_exact(fh, 1, "version byte")[0]
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")


def _write_header(fh, magic: bytes) -> None:
    fh.write(magic)
    fh.write(bytes([FORMAT_VERSION]))


def _read_u32(fh, what: str) -> int:
    return struct.unpack("<I", _read_exact(fh, 4, what))[0]


def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", int(value)))


def _read_f64(fh, count: int, what: str) -> np.ndarray:
    data = _read_exact(fh, count * 8, what)
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def _write_f64(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


# --- feature matrices -------------------------------------------------------

def write_features(path, frames: np.ndarray, kind: str) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    if kind not in _KIND_CODES:
        raise FormatError(f"unknown feature kind {kind!r}")
    with open(path, "wb") as fh:
        _write_header(fh, FEATURE_MAGIC)
        fh.write(bytes([_KIND_CODES[kind]]))
        _write_u32(fh, frames.shape[0])
        _write_u32(fh, frames.shape[1])
        _write_f64(fh, frames)


def read_features(path) -> tuple[np.ndarray, str]:
    """Return (frames, kind) from a feature file."""
    with open(path, "rb") as fh:
        _check_header(fh, FEATURE_MAGIC, path)
        kind_code = _read_exact(fh, 1, "kind tag")[0]
        if kind_code not in _KIND_NAMES:
            raise FormatError(f"{path}: unknown feature kind code {kind_code}")
        n_frames = _read_u32(fh, "frame count")
        dim = _read_u32(fh, "feature dimension")
        frames = _read_f64(fh, n_frames * dim, "feature payload").reshape(n_frames, dim)
    return frames, _KIND_NAMES[kind_code]


# --- posteriors -------------------------------------------------------------

def write_posteriors(path, gamma: np.ndarray, sparse_top_k: int | None = None) -> None:
    """Write a row-stochastic matrix, densely or as per-frame top-k entries.

    Sparse rows keep the k largest entries renormalized to unit mass so a
    round trip through the file stays row-stochastic.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    n_frames, n_classes = gamma.shape
    with open(path, "wb") as fh:
        _write_header(fh, POSTERIOR_MAGIC)
        _write_u32(fh, n_frames)
        _write_u32(fh, n_classes)
        if sparse_top_k is None:
            fh.write(bytes([0]))
            _write_f64(fh, gamma)
        else:
            k = min(int(sparse_top_k), n_classes)
            fh.write(bytes([1]))
            order = np.argsort(gamma, axis=1)[:, ::-1][:, :k]
            for t in range(n_frames):
                idx = np.sort(order[t])
                vals = gamma[t, idx]
                total = vals.sum()
                if total <= 0:
                    raise FormatError(f"frame {t} has no posterior mass to keep")
                vals = vals / total
                _write_u32(fh, len(idx))
                for i, v in zip(idx, vals):
                    fh.write(struct.pack("<Id", int(i), float(v)))


def read_posteriors(path, tol: float = 1e-6) -> np.ndarray:
    """Load posteriors as a dense matrix, renormalizing near-stochastic rows.

    Rows whose mass is farther than ``tol`` from one are rejected.
    """
    with open(path, "rb") as fh:
        _check_header(fh, POSTERIOR_MAGIC, path)
        n_frames = _read_u32(fh, "frame count")
        n_classes = _read_u32(fh, "class count")
        flag = _read_exact(fh, 1, "density flag")[0]
        if flag == 0:
            gamma = _read_f64(fh, n_frames * n_classes, "posterior payload")
            gamma = gamma.reshape(n_frames, n_classes)
        elif flag == 1:
            gamma = np.zeros((n_frames, n_classes))
            for t in range(n_frames):
                count = _read_u32(fh, f"frame {t} entry count")
                raw = _read_exact(fh, count * 12, f"frame {t} entries")
                for e in range(count):
                    idx, val = struct.unpack_from("<Id", raw, e * 12)
                    if idx >= n_classes:
                        raise FormatError(f"{path}: class index {idx} out of range")
                    gamma[t, idx] = val
        else:
            raise FormatError(f"{path}: unknown density flag {flag}")
    sums = gamma.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        worst = int(np.argmax(np.abs(sums - 1.0)))
        raise FormatError(
            f"{path}: row {worst} sums to {sums[worst]:.8f}, not within {tol} of 1"
        )
    # Rows already stochastic to machine precision pass through untouched so
    # a write/read round trip is bit-identical.
    off = np.abs(sums - 1.0) > 1e-13
    if np.any(off):
        gamma[off] /= sums[off, None]
    return gamma


# --- sufficient statistics --------------------------------------------------

def write_stats(path, n: np.ndarray, f: np.ndarray, s: np.ndarray, centered: bool) -> None:
    n_classes, dim = f.shape
    with open(path, "wb") as fh:
        _write_header(fh, STATS_MAGIC)
        _write_u32(fh, n_classes)
        _write_u32(fh, dim)
        fh.write(bytes([1 if centered else 0]))
        _write_f64(fh, n)
        _write_f64(fh, f)
        _write_f64(fh, s)


def read_stats(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    with open(path, "rb") as fh:
        _check_header(fh, STATS_MAGIC, path)
        n_classes = _read_u32(fh, "class count")
        dim = _read_u32(fh, "feature dimension")
        centered = bool(_read_exact(fh, 1, "centered flag")[0])
        n = _read_f64(fh, n_classes, "zeroth-order stats")
        f = _read_f64(fh, n_classes * dim, "first-order stats").reshape(n_classes, dim)
        s = _read_f64(fh, n_classes * dim, "second-order stats").reshape(n_classes, dim)
    return n, f, s, centered


# --- GMM --------------------------------------------------------------------

def write_gmm(path, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> None:
    n_components, dim = means.shape
    with open(path, "wb") as fh:
        _write_header(fh, GMM_MAGIC)
        _write_u32(fh, n_components)
        _write_u32(fh, dim)
        _write_f64(fh, weights)
        _write_f64(fh, means)
        _write_f64(fh, variances)


def read_gmm(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        _check_header(fh, GMM_MAGIC, path)
        n_components = _read_u32(fh, "component count")
        dim = _read_u32(fh, "feature dimension")
        weights = _read_f64(fh, n_components, "weights")
        means = _read_f64(fh, n_components * dim, "means").reshape(n_components, dim)
        variances = _read_f64(fh, n_components * dim, "variances").reshape(n_components, dim)
    return weights, means, variances


# --- total-variability model ------------------------------------------------

def write_tv(path, t_matrix: np.ndarray, sigma: np.ndarray, means: np.ndarray) -> None:
    n_classes, dim = means.shape
    rank = t_matrix.shape[1]
    with open(path, "wb") as fh:
        _write_header(fh, TV_MAGIC)
        _write_u32(fh, n_classes)
        _write_u32(fh, dim)
        _write_u32(fh, rank)
        _write_f64(fh, t_matrix)
        _write_f64(fh, sigma)
        _write_f64(fh, means)


def read_tv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        _check_header(fh, TV_MAGIC, path)
        n_classes = _read_u32(fh, "class count")
        dim = _read_u32(fh, "feature dimension")
        rank = _read_u32(fh, "rank")
        size = n_classes * dim
        t_matrix = _read_f64(fh, size * rank, "subspace matrix").reshape(size, rank)
        sigma = _read_f64(fh, size, "residual variances")
        means = _read_f64(fh, size, "centering means").reshape(n_classes, dim)
    return t_matrix, sigma, means


# --- PLDA -------------------------------------------------------------------

def write_plda(path, mu: np.ndarray, ac: np.ndarray, wc: np.ndarray) -> None:
    rank = mu.shape[0]
    with open(path, "wb") as fh:
        _write_header(fh, PLDA_MAGIC)
        _write_u32(fh, rank)
        _write_f64(fh, mu)
        _write_f64(fh, ac)
        _write_f64(fh, wc)


def read_plda(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        _check_header(fh, PLDA_MAGIC, path)
        rank = _read_u32(fh, "rank")
        mu = _read_f64(fh, rank, "mean")
        ac = _read_f64(fh, rank * rank, "across-class covariance").reshape(rank, rank)
        wc = _read_f64(fh, rank * rank, "within-class covariance").reshape(rank, rank)
    return mu, ac, wc


# --- TDNN -------------------------------------------------------------------

def write_tdnn(path, layers, n_senones: int) -> None:
    """Serialize layers given as (offsets, weight, bias, activation, p, group_size)."""
    with open(path, "wb") as fh:
        _write_header(fh, TDNN_MAGIC)
        _write_u32(fh, len(layers))
        _write_u32(fh, n_senones)
        for offsets, weight, bias, activation, p, group_size in layers:
            _write_u32(fh, len(offsets))
            for off in offsets:
                fh.write(struct.pack("<i", int(off)))
            _write_u32(fh, weight.shape[0])
            _write_u32(fh, weight.shape[1])
            fh.write(bytes([_ACTIVATION_CODES[activation]]))
            fh.write(struct.pack("<d", float(p)))
            _write_u32(fh, group_size)
            _write_f64(fh, weight)
            _write_f64(fh, bias)


def read_tdnn(path):
    with open(path, "rb") as fh:
        _check_header(fh, TDNN_MAGIC, path)
        n_layers = _read_u32(fh, "layer count")
        n_senones = _read_u32(fh, "senone count")
        layers = []
        for i in range(n_layers):
            n_off = _read_u32(fh, f"layer {i} offset count")
            offsets = tuple(
                struct.unpack("<i", _read_exact(fh, 4, "offset"))[0] for _ in range(n_off)
            )
            out_dim = _read_u32(fh, f"layer {i} output width")
            in_dim = _read_u32(fh, f"layer {i} input width")
            act_code = _read_exact(fh, 1, "activation code")[0]
            if act_code not in _ACTIVATION_NAMES:
                raise FormatError(f"{path}: unknown activation code {act_code}")
            p = struct.unpack("<d", _read_exact(fh, 8, "norm order"))[0]
            group_size = _read_u32(fh, f"layer {i} group size")
            weight = _read_f64(fh, out_dim * in_dim, "weight").reshape(out_dim, in_dim)
            bias = _read_f64(fh, out_dim, "bias")
            layers.append((offsets, weight, bias, _ACTIVATION_NAMES[act_code], p, group_size))
    return layers, n_senones


# --- i-vectors ---------------------------------------------------------------

def write_ivectors(path, records) -> None:
    """Write (utterance_id, duration_active, vector) records."""
    records = list(records)
    if records:
        rank = len(records[0][2])
    else:
        rank = 0
    with open(path, "wb") as fh:
        _write_header(fh, IVECTOR_MAGIC)
        _write_u32(fh, rank)
        _write_u32(fh, len(records))
        for utt_id, duration, vec in records:
            raw = utt_id.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"utterance id too long: {utt_id!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<d", float(duration)))
            _write_f64(fh, np.asarray(vec, dtype=np.float64))


def read_ivectors(path) -> list[tuple[str, float, np.ndarray]]:
    with open(path, "rb") as fh:
        _check_header(fh, IVECTOR_MAGIC, path)
        rank = _read_u32(fh, "rank")
        count = _read_u32(fh, "record count")
        records = []
        for _ in range(count):
            id_len = struct.unpack("<H", _read_exact(fh, 2, "id length"))[0]
            utt_id = _read_exact(fh, id_len, "utterance id").decode("utf-8")
            duration = struct.unpack("<d", _read_exact(fh, 8, "duration"))[0]
            vec = _read_f64(fh, rank, "vector")
            records.append((utt_id, duration, vec))
    return records


# --- frame labels -------------------------------------------------------------

def write_labels(path, labels: np.ndarray, n_classes: int) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise FormatError("label index out of range")
    if n_classes > 0xFFFF:
        raise FormatError("more classes than the label format supports")
    with open(path, "wb") as fh:
        _write_header(fh, LABELS_MAGIC)
        _write_u32(fh, len(labels))
        _write_u32(fh, n_classes)
        fh.write(labels.astype("<u2").tobytes())


def read_labels(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        _check_header(fh, LABELS_MAGIC, path)
        n_frames = _read_u32(fh, "frame count")
        n_classes = _read_u32(fh, "class count")
        data = _read_exact(fh, n_frames * 2, "label payload")
        labels = np.frombuffer(data, dtype="<u2").astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise FormatError(f"{path}: label index exceeds class count")
    return labels, n_classes


def sha256_file(path) -> str:
    """Content hash used for artifact provenance."""
    import hashlib

    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    tmp.replace(path)
