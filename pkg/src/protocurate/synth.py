"""Seeded long-tailed synthetic paired-embedding corpora.

Samples are drawn from a Gaussian mixture on the image side; the text side
is a noisy linear image of the same vector, with alignment strength rho
interpolating between perfectly paired (rho=1) and independent noise
(rho=0).  Class labels are the one-hot mixture component, with weights
skewed so one head class dominates, mimicking the frequency profile of a
long-tailed clinical corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import EngineConfig
from .errors import UsageError
from .io import Corpus, write_corpus


@dataclass(frozen=True)
class MixtureSpec:
    n_samples: int
    clusters: int
    weights: tuple[float, ...]
    d_img: int
    d_txt: int
    rho: float
    noise_scale: float
    mean_scale: float
    seed: int

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise UsageError("n_samples must be >= 1")
        if self.clusters < 1:
            raise UsageError("clusters must be >= 1")
        if len(self.weights) != self.clusters:
            raise UsageError(
                f"expected {self.clusters} weights, got {len(self.weights)}"
            )
        if any(w <= 0.0 for w in self.weights):
            raise UsageError("cluster weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-6:
            raise UsageError(f"cluster weights must sum to 1 (got {sum(self.weights):g})")
        if not (0.0 <= self.rho <= 1.0):
            raise UsageError("rho must be in [0, 1]")
        if self.d_img < 2 or self.d_txt < 2:
            raise UsageError("dimensions must be >= 2")
        if self.noise_scale < 0.0:
            raise UsageError("noise_scale must be >= 0")
        if self.mean_scale <= 0.0:
            raise UsageError("mean_scale must be > 0")

    @classmethod
    def from_config(cls, cfg: EngineConfig) -> "MixtureSpec":
        return cls(
            n_samples=cfg.n_samples,
            clusters=cfg.clusters,
            weights=cfg.resolved_weights(),
            d_img=cfg.d_img,
            d_txt=cfg.d_txt,
            rho=cfg.rho,
            noise_scale=cfg.noise_scale,
            mean_scale=cfg.mean_scale,
            seed=cfg.seed,
        )

    def to_manifest(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "clusters": self.clusters,
            "weights": list(self.weights),
            "d_img": self.d_img,
            "d_txt": self.d_txt,
            "rho": self.rho,
            "noise_scale": self.noise_scale,
            "mean_scale": self.mean_scale,
            "seed": self.seed,
        }


def _cluster_means(spec: MixtureSpec, rng: np.random.Generator) -> np.ndarray:
    means = rng.standard_normal((spec.clusters, spec.d_img))
    return means * spec.mean_scale


def _alignment_map(spec: MixtureSpec, rng: np.random.Generator) -> np.ndarray:
    """Text-side linear map A (d_txt x d_img).

    Identity when the dimensions match, so an untrained identity head sees
    the text side as a noisy copy of the image side; otherwise a random
    orthonormal-row map (partial isometry), preserving distances as far as
    the smaller dimension allows.
    """
    if spec.d_img == spec.d_txt:
        return np.eye(spec.d_img)
    gauss = rng.standard_normal((max(spec.d_img, spec.d_txt), max(spec.d_img, spec.d_txt)))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))[None, :]
    return q[: spec.d_txt, : spec.d_img]


def generate_corpus(spec: MixtureSpec) -> tuple[Corpus, np.ndarray]:
    """Draw the corpus; returns (corpus, assignment vector of cluster indices).

    The returned arrays are bit-identical to a round trip through the binary
    format (vectors pass through float32), so in-memory use and file use
    agree exactly.
    """
    rng = np.random.default_rng(spec.seed)
    means = _cluster_means(spec, rng)
    amap = _alignment_map(spec, rng)

    assign = rng.choice(spec.clusters, size=spec.n_samples, p=np.asarray(spec.weights))
    img = means[assign] + spec.noise_scale * rng.standard_normal(
        (spec.n_samples, spec.d_img)
    )
    txt_noise = rng.standard_normal((spec.n_samples, spec.d_txt))
    txt = spec.rho * (img @ amap.T) + (1.0 - spec.rho) * txt_noise

    labels = np.zeros((spec.n_samples, spec.clusters), dtype=bool)
    labels[np.arange(spec.n_samples), assign] = True

    corpus = Corpus(
        ids=np.arange(spec.n_samples, dtype=np.uint64),
        img=img.astype(np.float32).astype(np.float64),
        txt=txt.astype(np.float32).astype(np.float64),
        labels=labels,
    )
    return corpus, assign


def generate_prompts(spec: MixtureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class prompt embeddings on the text side.

    positive[c] = normalized text image of cluster c's mean; negative[c] =
    normalized mean of the other classes' positives.  Both (C, d_txt), unit
    rows.  Uses the same seed stream as generate_corpus so prompts match the
    corpus geometry.
    """
    rng = np.random.default_rng(spec.seed)
    means = _cluster_means(spec, rng)
    amap = _alignment_map(spec, rng)

    mapped = means @ amap.T
    norms = np.linalg.norm(mapped, axis=1)
    if np.any(norms == 0.0):
        raise UsageError("degenerate cluster mean: zero vector under alignment map")
    positive = mapped / norms[:, None]

    if spec.clusters == 1:
        negative = -positive
    else:
        total = positive.sum(axis=0)
        others = (total[None, :] - positive) / (spec.clusters - 1)
        other_norms = np.linalg.norm(others, axis=1)
        if np.any(other_norms == 0.0):
            raise UsageError("degenerate negative prompt: other-class mean is zero")
        negative = others / other_norms[:, None]
    return positive, negative


def write_prompts(path, positive: np.ndarray, negative: np.ndarray, class_names=None) -> None:
    """Store prompts as JSON: {"classes": [{name, positive, negative}, ...]}."""
    c = positive.shape[0]
    if class_names is None:
        class_names = [f"class_{i}" for i in range(c)]
    doc = {
        "classes": [
            {
                "name": class_names[i],
                "positive": [float(x) for x in positive[i]],
                "negative": [float(x) for x in negative[i]],
            }
            for i in range(c)
        ]
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_prompts(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    classes = doc["classes"]
    names = [entry["name"] for entry in classes]
    positive = np.asarray([entry["positive"] for entry in classes], dtype=np.float64)
    negative = np.asarray([entry["negative"] for entry in classes], dtype=np.float64)
    return names, positive, negative


def write_synthetic_corpus(path, spec: MixtureSpec) -> Corpus:
    """Generate and write the corpus plus its sidecar manifest."""
    corpus, _ = generate_corpus(spec)
    write_corpus(path, corpus)
    manifest_path = str(path) + ".manifest.json"
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(spec.to_manifest(), fh, indent=2)
        fh.write("\n")
    return corpus
