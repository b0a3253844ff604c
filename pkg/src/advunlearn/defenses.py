"""Request verification: image hashes, embeddings, pixel distances, the
similarity-index protocol, a JPEG-style benign re-encoder and ROC evaluation."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.fft import dctn, idctn

from .data import DatasetSplit
from .models import Model
from .rng import Rng
from .unlearning import UnlearnSpec, unlearn

HASH_METHODS = ("average", "difference", "perceptual_dct", "wavelet_haar")


# ---------------------------------------------------------------- image helpers

def as_image(x) -> np.ndarray:
    """Grayscale 2-D view of an image: flat square vectors are reshaped and
    channel-last arrays are averaged over channels."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty image")
    if x.ndim == 1:
        side = int(round(np.sqrt(x.size)))
        if side * side != x.size:
            raise ValueError(f"cannot view {x.size} values as a square image")
        return x.reshape(side, side)
    if x.ndim == 3:
        return x.mean(axis=2)
    if x.ndim != 2:
        raise ValueError(f"unsupported image shape {x.shape}")
    return x


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix mapping n_in samples to n_out by box-area averaging."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    W = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges_out[i], edges_out[i + 1]
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            W[i, j] = min(hi, j + 1) - max(lo, j)
    return W / W.sum(axis=1, keepdims=True)


def resize_area(img: np.ndarray, height: int, width: int) -> np.ndarray:
    img = as_image(img)
    return _area_weights(img.shape[0], height) @ img @ _area_weights(img.shape[1], width).T


def haar2d(img: np.ndarray):
    """One level of the orthonormal 2-D Haar transform: (LL, LH, HL, HH)."""
    a, b = img[0::2, 0::2], img[0::2, 1::2]
    c, d = img[1::2, 0::2], img[1::2, 1::2]
    return (a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2


# ---------------------------------------------------------------- hashing

@dataclass(frozen=True)
class HashDigest:
    method: str
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool).ravel())

    def __len__(self):
        return self.bits.size

    def distance(self, other: "HashDigest") -> int:
        if self.method != other.method or self.bits.size != other.bits.size:
            raise ValueError("digests are not comparable")
        return int(np.count_nonzero(self.bits != other.bits))

    def __sub__(self, other: "HashDigest") -> int:
        return self.distance(other)

    def __eq__(self, other):
        return (isinstance(other, HashDigest) and self.method == other.method
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.method, self.bits.tobytes()))

    def hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex()


def _above(values: np.ndarray, threshold) -> np.ndarray:
    # resampling leaves ~1e-16 noise on flat regions; treat that as a tie
    tol = 1e-12 * max(1.0, float(np.max(np.abs(values))))
    return values - threshold > tol


def hash_image(image, method: str = "average", hash_size: int = 8) -> HashDigest:
    """``hash_size**2``-bit digest. Ties at the threshold map to bit 0."""
    img = as_image(image)
    n = hash_size
    if method == "average":
        small = resize_area(img, n, n)
        bits = _above(small, small.mean())
    elif method == "difference":
        small = resize_area(img, n, n + 1)
        bits = _above(small[:, 1:], small[:, :-1])
    elif method == "perceptual_dct":
        small = resize_area(img, 4 * n, 4 * n)
        low = dctn(small, type=2, norm="ortho")[:n, :n]
        # DC dominates the block and would drag the median; leave it out
        bits = _above(low, np.median(low.ravel()[1:]))
    elif method == "wavelet_haar":
        ll = resize_area(img, 4 * n, 4 * n)
        for _ in range(2):
            ll = haar2d(ll)[0]
        bits = _above(ll, np.median(ll))
    else:
        raise ValueError(f"unknown hash method {method!r}; expected one of {HASH_METHODS}")
    return HashDigest(method, bits)


# ---------------------------------------------------------------- digest store

_STORE_MAGIC = b"UDGS"
_METHOD_TAGS = {m: i for i, m in enumerate(HASH_METHODS)}


@dataclass
class DigestStore:
    """Digests of stored training images, queried by nearest Hamming distance."""

    method: str
    digests: list[HashDigest] = field(default_factory=list)

    @classmethod
    def build(cls, images, method: str) -> "DigestStore":
        return cls(method, [hash_image(x, method) for x in images])

    def __len__(self):
        return len(self.digests)

    def _matrix(self) -> np.ndarray:
        return np.stack([d.bits for d in self.digests])

    def nearest_distance(self, image) -> int:
        if not self.digests:
            raise ValueError("digest store is empty")
        q = hash_image(image, self.method).bits
        return int(np.count_nonzero(self._matrix() != q, axis=1).min())

    def save(self, path) -> None:
        """Header: ``UDGS`` | u32 version | u32 method tag | u32 bit length |
        u64 count, little-endian; then ``count`` packed digests."""
        nbits = self.digests[0].bits.size if self.digests else 64
        out = _STORE_MAGIC + struct.pack("<IIIQ", 1, _METHOD_TAGS[self.method], nbits,
                                         len(self.digests))
        out += b"".join(np.packbits(d.bits).tobytes() for d in self.digests)
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(out)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DigestStore":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != _STORE_MAGIC:
            raise ValueError(f"bad digest-store magic {raw[:4]!r}")
        version, tag, nbits, count = struct.unpack_from("<IIIQ", raw, 4)
        if version != 1:
            raise ValueError(f"unsupported digest-store version {version}")
        width = (nbits + 7) // 8
        body = raw[24:]
        if len(body) != width * count:
            raise ValueError(f"digest store truncated: {len(body)} of {width * count} bytes")
        method = HASH_METHODS[tag]
        digests = []
        for i in range(count):
            packed = np.frombuffer(body, dtype=np.uint8, count=width, offset=i * width)
            digests.append(HashDigest(method, np.unpackbits(packed)[:nbits]))
        return cls(method, digests)


# ---------------------------------------------------------------- embeddings / pixels

def embed_image(images, model: Model) -> np.ndarray:
    """Penultimate-layer features of ``model`` (stand-in for a perceptual embedding)."""
    X = np.asarray(images, dtype=np.float64)
    single = X.ndim == 1
    X = X.reshape(1, -1) if single else X.reshape(X.shape[0], -1)
    if X.shape[1] != model.arch.in_dim:
        raise ValueError(f"image has {X.shape[1]} values, model expects {model.arch.in_dim}")
    feats = model.features(X)
    return feats[0] if single else feats


def embedding_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def _nearest(request, stored: np.ndarray) -> tuple[int, float]:
    stored = np.asarray(stored, dtype=np.float64).reshape(len(stored), -1)
    if stored.shape[0] == 0:
        raise ValueError("stored image set is empty")
    r = np.asarray(request, dtype=np.float64).ravel()
    d = np.linalg.norm(stored - r, axis=1)
    i = int(np.argmin(d))  # first minimum, so ties go to the lowest index
    return i, float(d[i])


def pixel_l2_check(request, stored_images, tau: float) -> bool:
    """Valid iff some stored image lies within pixel-l2 distance ``tau``."""
    return _nearest(request, stored_images)[1] <= tau


def similarity_index_resolve(request, stored_images) -> int:
    """Index of the nearest stored image (pixel l2; ties to the lowest index)."""
    return _nearest(request, stored_images)[0]


def indexed_unlearn(model: Model, split: DatasetSplit, requests, spec: UnlearnSpec,
                    rng: Rng) -> tuple[Model, np.ndarray]:
    """Similarity-index protocol: map each request to its nearest training image
    and unlearn those stored examples, never the raw request."""
    idx = np.unique([similarity_index_resolve(r, split.X_train) for r in requests])
    return unlearn(model, split.with_forget(idx), spec, rng), idx


# ---------------------------------------------------------------- benign re-encoding

_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)


def quant_table(quality: int) -> np.ndarray:
    """libjpeg quality scaling of the standard luminance table."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in 1..100")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((_JPEG_LUMA * scale + 50) / 100), 1, 255)


def benign_perturb(image, quality: int = 90, rng: Rng | None = None) -> np.ndarray:
    """Simulated JPEG re-encode of an image with values in [0, 1].

    8x8 block DCT-II, AC coefficients quantized with the quality-scaled
    luminance table, inverse DCT, clamp to [0, 1]. The DC term is kept exact,
    so constant images pass through unchanged. Deterministic; ``rng`` is
    accepted for interface symmetry and unused.
    """
    x = np.asarray(image, dtype=np.float64)
    img = as_image(x)
    Q = quant_table(quality)
    h, w = img.shape
    ph, pw = -h % 8, -w % 8
    px = np.pad(img * 255.0 - 128.0, ((0, ph), (0, pw)), mode="edge")
    H, W = px.shape
    blocks = px.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, type=2, norm="ortho", axes=(2, 3))
    q = np.round(coef / Q) * Q
    q[..., 0, 0] = coef[..., 0, 0]
    rec = idctn(q, type=2, norm="ortho", axes=(2, 3))
    out = rec.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]
    out = np.clip((out + 128.0) / 255.0, 0.0, 1.0)
    return out.reshape(x.shape) if x.ndim == 1 else out


# ---------------------------------------------------------------- ROC evaluation

@dataclass
class DetectionReport:
    scores: np.ndarray
    labels: np.ndarray  # 1 = adversarial (positive), 0 = benign
    roc: list[tuple[float, float, float]]
    auroc: float
    degenerate: bool = False
    name: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name, "auroc": self.auroc, "degenerate": self.degenerate,
            "roc": [{"fpr": f, "tpr": t, "tau": tau} for f, t, tau in self.roc],
            "scores": self.scores.tolist(),
            "labels": ["adversarial" if v else "benign" for v in self.labels]}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "fpr", "tpr"])
        for f, t, tau in self.roc:
            w.writerow([repr(tau), repr(f), repr(t)])
        return buf.getvalue()

    def acceptance_rate(self, tau: float) -> float:
        """Fraction of benign requests accepted (score <= tau)."""
        ben = self.scores[self.labels == 0]
        return float(np.mean(ben <= tau))


def roc_from_scores(benign_scores, adversarial_scores, name: str = "") -> DetectionReport:
    """ROC for the rule "flag when score > tau", swept over every distinct score.

    Points run from (0, 0) at tau=+inf to (1, 1); AUROC is the trapezoid area,
    accumulated in integers so it is exact up to one final division.
    """
    ben = np.asarray(benign_scores, dtype=np.float64).ravel()
    adv = np.asarray(adversarial_scores, dtype=np.float64).ravel()
    if ben.size == 0 or adv.size == 0:
        raise ValueError("both benign and adversarial requests are required")
    scores = np.concatenate([adv, ben])
    labels = np.concatenate([np.ones(adv.size, dtype=int), np.zeros(ben.size, dtype=int)])
    P, N = adv.size, ben.size
    taus = np.unique(scores)[::-1]
    roc = [(0.0, 0.0, float("inf"))]
    area2 = 0  # twice the area, times P*N
    prev_tp = prev_fp = 0
    for tau in list(taus[1:]) + [-np.inf]:
        # flag everything strictly above tau
        tp = int(np.count_nonzero(adv > tau))
        fp = int(np.count_nonzero(ben > tau))
        area2 += (fp - prev_fp) * (tp + prev_tp)
        roc.append((fp / N, tp / P, float(tau)))
        prev_tp, prev_fp = tp, fp
    degenerate = taus.size == 1
    auroc = 0.5 if degenerate else area2 / (2 * P * N)
    return DetectionReport(scores, labels, roc, auroc, degenerate, name)


def evaluate_detector(detector: Callable, benign_requests: Sequence, adversarial_requests: Sequence,
                      name: str = "") -> DetectionReport:
    """Score every request with ``detector`` (higher = more suspicious) and build the ROC."""
    ben = [float(detector(r)) for r in benign_requests]
    adv = [float(detector(r)) for r in adversarial_requests]
    return roc_from_scores(ben, adv, name)


def hash_detector(stored_images, method: str) -> Callable:
    store = DigestStore.build(stored_images, method)
    return store.nearest_distance


def embedding_detector(stored_images, model: Model) -> Callable:
    feats = embed_image(np.asarray(stored_images).reshape(len(stored_images), -1), model)

    def score(request):
        e = embed_image(np.asarray(request).ravel(), model)
        return float(np.linalg.norm(feats - e, axis=1).min())

    return score


def pixel_detector(stored_images) -> Callable:
    return lambda request: _nearest(request, stored_images)[1]


def detectors(stored_images, model: Model | None = None) -> dict[str, Callable]:
    out = {m: hash_detector(stored_images, m) for m in HASH_METHODS}
    out["pixel_l2"] = pixel_detector(stored_images)
    if model is not None:
        out["embedding"] = embedding_detector(stored_images, model)
    return out
