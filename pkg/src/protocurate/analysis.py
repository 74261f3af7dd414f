"""Density and distribution analysis of a corpus and a curated subset.

Implements the descriptive toolkit used to characterize what curation
selects: exact kNN mean-distance density profiles, low-density-quartile
membership, ECDFs, a 2-D PCA projection, long-tail label histograms, and
the small statistical layer (Welch's t, paired t, 5-run summaries) used to
report significance.  p-values come from a hand-rolled regularized
incomplete beta so the runtime has no statistics dependency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .config import EngineConfig
from .embedding import unify_batch
from .errors import DegenerateVectorError, UsageError
from .io import Corpus

_KNN_CHUNK = 1024


@dataclass
class DensityProfile:
    ids: np.ndarray
    values: np.ndarray
    k: int

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def sd(self) -> float:
        return float(self.values.std(ddof=1)) if len(self.values) > 1 else 0.0

    def restrict(self, ids: np.ndarray) -> "DensityProfile":
        """Sub-profile for the given ids (must all be present), keeping their order."""
        order = np.argsort(self.ids, kind="stable")
        sorted_ids = self.ids[order]
        ids = np.asarray(ids, dtype=self.ids.dtype)
        pos = np.searchsorted(sorted_ids, ids)
        pos_clamped = np.minimum(pos, len(sorted_ids) - 1)
        bad = sorted_ids[pos_clamped] != ids
        if np.any(bad):
            missing = int(ids[np.flatnonzero(bad)[0]])
            raise UsageError(f"id {missing} not present in the density profile")
        rows = order[pos_clamped]
        return DensityProfile(ids=self.ids[rows], values=self.values[rows], k=self.k)


@dataclass
class TestResult:
    statistic: float
    df: float
    p_value: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int

    def to_dict(self) -> dict:
        stat = self.statistic if math.isfinite(self.statistic) else repr(self.statistic)
        return {
            "statistic": stat,
            "df": self.df,
            "p_value": self.p_value,
            "mean_a": self.mean_a,
            "mean_b": self.mean_b,
            "n_a": self.n_a,
            "n_b": self.n_b,
        }


def knn_mean_distance(points: np.ndarray, k: int, ids: np.ndarray | None = None) -> DensityProfile:
    """Mean Euclidean distance of each point to its k nearest other points.

    Exact chunked scan; k is clamped to n-1.  Large values mark low-density
    (long-tail) regions.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise UsageError("kNN profile needs at least 2 points")
    if k < 1:
        raise UsageError("k must be >= 1")
    k_eff = min(k, n - 1)
    if ids is None:
        ids = np.arange(n, dtype=np.uint64)

    sq_norms = np.einsum("ij,ij->i", points, points)
    values = np.empty(n, dtype=np.float64)
    for start in range(0, n, _KNN_CHUNK):
        stop = min(start + _KNN_CHUNK, n)
        block = (
            sq_norms[start:stop, None]
            + sq_norms[None, :]
            - 2.0 * (points[start:stop] @ points.T)
        )
        np.maximum(block, 0.0, out=block)
        rows = np.arange(start, stop)
        block[rows - start, rows] = np.inf  # exclude self
        nearest = np.partition(block, k_eff - 1, axis=1)[:, :k_eff]
        values[start:stop] = np.sqrt(nearest).mean(axis=1)
    return DensityProfile(ids=np.asarray(ids, dtype=np.uint64), values=values, k=k_eff)


def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th smallest value (q in (0, 1])."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise UsageError("quantile of an empty list")
    if not (0.0 < q <= 1.0):
        raise UsageError("quantile level must be in (0, 1]")
    rank = int(math.ceil(q * len(values)))
    return float(np.sort(values)[rank - 1])


def low_density_proportion(
    subset_profile: DensityProfile, full_profile: DensityProfile, quantile: float = 0.25
) -> float:
    """Fraction of the subset inside the full set's lowest-density band.

    The band holds the ``quantile`` fraction of the full set with the
    LARGEST kNN distances; its threshold is the nearest-rank
    (1-quantile)-quantile of the full profile.
    """
    if len(subset_profile.values) == 0:
        raise UsageError("low_density_proportion needs a nonempty subset")
    threshold = nearest_rank_quantile(full_profile.values, 1.0 - quantile)
    return float(np.mean(subset_profile.values >= threshold))


def _betainc_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) to relative tolerance ~1e-10 via the continued fraction."""
    if not (a > 0.0 and b > 0.0):
        raise UsageError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # The continued fraction converges fast for x below the distribution bulk;
    # use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) otherwise.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betainc_cf(a, b, x) / a
    return 1.0 - front * _betainc_cf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided p-value for a Student-t statistic."""
    if df <= 0.0:
        raise UsageError("degrees of freedom must be positive")
    if not math.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return betainc_regularized(df / 2.0, 0.5, x)


def welch_t(a: np.ndarray, b: np.ndarray) -> TestResult:
    """Two-sided Welch's t-test (unequal variances and sizes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n_a, n_b = len(a), len(b)
    if n_a < 2 or n_b < 2:
        raise UsageError("Welch's t-test needs at least 2 samples per group")
    m_a, m_b = float(a.mean()), float(b.mean())
    va = float(a.var(ddof=1))
    vb = float(b.var(ddof=1))
    sa, sb = va / n_a, vb / n_b

    if sa + sb == 0.0:
        # Both groups constant: no sampling noise at all.
        df = float(n_a + n_b - 2)
        if m_a == m_b:
            return TestResult(0.0, df, 1.0, m_a, m_b, n_a, n_b)
        stat = math.copysign(math.inf, m_a - m_b)
        return TestResult(stat, df, 0.0, m_a, m_b, n_a, n_b)

    stat = (m_a - m_b) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (n_a - 1) + sb**2 / (n_b - 1))
    return TestResult(stat, df, t_sf_two_sided(stat, df), m_a, m_b, n_a, n_b)


def paired_t(a: np.ndarray, b: np.ndarray) -> TestResult:
    """Two-sided paired t-test: one-sample t on index-matched differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError("paired test needs matching 1-D arrays")
    n = len(a)
    if n < 2:
        raise UsageError("paired t-test needs at least 2 pairs")
    d = a - b
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    df = float(n - 1)
    if sd == 0.0:
        if md == 0.0:
            return TestResult(0.0, df, 1.0, float(a.mean()), float(b.mean()), n, n)
        stat = math.copysign(math.inf, md)
        return TestResult(stat, df, 0.0, float(a.mean()), float(b.mean()), n, n)
    stat = md / (sd / math.sqrt(n))
    return TestResult(stat, df, t_sf_two_sided(stat, df), float(a.mean()), float(b.mean()), n, n)


def run_summary(values: np.ndarray) -> tuple[float, float]:
    """Mean and 95% CI halfwidth (1.96 * sd/sqrt(n)) over repeated runs."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise UsageError("run summary needs at least 2 runs")
    se = math.sqrt(float(values.var(ddof=1)) / n)
    return float(values.mean()), 1.96 * se


def pca2(points: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Top-2 PCA projection by power iteration with deflation.

    Returns (n x 2 projections, explained-variance fractions).  Sign
    convention: each component's largest-magnitude loading is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if n < 3:
        raise UsageError("PCA projection needs at least 3 points")
    if d < 2:
        raise UsageError("PCA projection needs dimension >= 2")
    centered = points - points.mean(axis=0)
    cov = (centered.T @ centered) / (n - 1)
    total = float(np.trace(cov))
    if total == 0.0:
        raise DegenerateVectorError("PCA on zero-variance data")

    def top_eig(mat: np.ndarray) -> tuple[np.ndarray, float]:
        rng = np.random.default_rng(0)
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        for _ in range(10000):
            w = mat @ v
            norm = np.linalg.norm(w)
            if norm < 1e-30:
                return v, 0.0  # operator annihilates the start vector
            w /= norm
            # Eigenvector up to sign: compare against both orientations.
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < 1e-8:
                v = w
                break
            v = w
        val = float(v @ mat @ v)
        return v, val

    v1, l1 = top_eig(cov)
    v2, l2 = top_eig(cov - l1 * np.outer(v1, v1))
    # Deflation residue can leave a small v1 component; project it out.
    v2 = v2 - (v2 @ v1) * v1
    nv2 = np.linalg.norm(v2)
    if nv2 > 0:
        v2 /= nv2
    comps = []
    for v in (v1, v2):
        peak = int(np.argmax(np.abs(v)))
        comps.append(-v if v[peak] < 0 else v)
    proj = centered @ np.stack(comps, axis=1)
    return proj, (l1 / total, max(l2, 0.0) / total)


def ecdf(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right-continuous ECDF step points with ties collapsed."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise UsageError("ECDF of an empty list")
    uniq, counts = np.unique(values, return_counts=True)
    return uniq, np.cumsum(counts) / len(values)


def label_histogram(labels: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-class counts and sample fractions of a (n, C) boolean label matrix."""
    if labels is None:
        raise UsageError("corpus carries no labels")
    labels = np.asarray(labels).astype(bool)
    if labels.ndim != 2 or len(labels) == 0:
        raise UsageError("labels must be a nonempty (n, C) matrix")
    counts = labels.sum(axis=0)
    return counts, counts / len(labels)


def label_comparison(
    full_labels: np.ndarray | None, subset_labels: np.ndarray | None
) -> list[dict]:
    """Full-vs-subset class frequency table with deltas (Fig.-9-style data)."""
    fc, ff = label_histogram(full_labels)
    sc, sf = label_histogram(subset_labels)
    if len(fc) != len(sc):
        raise UsageError("full and subset label matrices disagree on class count")
    return [
        {
            "class": f"class_{i}",
            "count_full": int(fc[i]),
            "frac_full": float(ff[i]),
            "count_subset": int(sc[i]),
            "frac_subset": float(sf[i]),
            "delta": float(sf[i] - ff[i]),
        }
        for i in range(len(fc))
    ]


def run_analysis(corpus: Corpus, cfg: EngineConfig, selection_ids: np.ndarray | None = None) -> dict:
    """Compute the full analysis bundle in memory.

    Returns a dict of artifacts; write_analysis_bundle persists it.  The
    subset profile is the full-corpus profile restricted to the selection,
    so both sides live in the same density field.
    """
    unified = unify_batch(corpus.img, corpus.txt, cfg.curation_space)
    full_profile = knn_mean_distance(unified, cfg.knn_k, ids=corpus.ids)
    proj, explained = pca2(unified)

    bundle: dict = {
        "full_profile": full_profile,
        "pca_projection": proj,
        "pca_explained": explained,
        "ecdf_full": ecdf(full_profile.values),
        "tests": {
            "knn_k": full_profile.k,
            "full_mean_knn": full_profile.mean,
            "full_sd_knn": full_profile.sd,
            "pca_explained": [float(explained[0]), float(explained[1])],
        },
    }
    if corpus.labels is not None:
        counts, fracs = label_histogram(corpus.labels)
        bundle["label_counts"] = counts
        bundle["label_fracs"] = fracs

    if selection_ids is not None:
        subset_profile = full_profile.restrict(selection_ids)
        bundle["subset_profile"] = subset_profile
        bundle["ecdf_subset"] = ecdf(subset_profile.values)
        test = welch_t(subset_profile.values, full_profile.values)
        prop = low_density_proportion(subset_profile, full_profile, cfg.density_quantile)
        bundle["tests"].update(
            subset_mean_knn=subset_profile.mean,
            subset_sd_knn=subset_profile.sd,
            welch_subset_vs_full=test.to_dict(),
            low_density_proportion=prop,
            density_quantile=cfg.density_quantile,
        )
        if corpus.labels is not None:
            rows = _rows_for_ids(corpus, selection_ids)
            bundle["label_table"] = label_comparison(corpus.labels, corpus.labels[rows])
    return bundle


def _rows_for_ids(corpus: Corpus, ids: np.ndarray) -> np.ndarray:
    order = np.argsort(corpus.ids, kind="stable")
    sorted_ids = corpus.ids[order]
    ids = np.asarray(ids, dtype=np.uint64)
    pos = np.searchsorted(sorted_ids, ids)
    pos_clamped = np.minimum(pos, len(sorted_ids) - 1)
    bad = sorted_ids[pos_clamped] != ids
    if np.any(bad):
        missing = int(ids[np.flatnonzero(bad)[0]])
        raise UsageError(f"selection id {missing} not present in corpus")
    return order[pos_clamped]


def write_analysis_bundle(out_dir, bundle: dict) -> None:
    """Persist the bundle as the documented CSV/JSON files."""
    import os

    os.makedirs(out_dir, exist_ok=True)

    def path(name: str) -> str:
        return os.path.join(out_dir, name)

    profile: DensityProfile = bundle["full_profile"]
    with open(path("knn_profile.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,knn_mean\n")
        for i, value in zip(profile.ids, profile.values):
            fh.write(f"{int(i)},{value:.9g}\n")

    def write_ecdf(name: str, steps: tuple[np.ndarray, np.ndarray]) -> None:
        with open(path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("value,cum_frac\n")
            for value, frac in zip(*steps):
                fh.write(f"{value:.9g},{frac:.9g}\n")

    write_ecdf("ecdf_full.csv", bundle["ecdf_full"])
    if "ecdf_subset" in bundle:
        write_ecdf("ecdf_subset.csv", bundle["ecdf_subset"])

    proj = bundle["pca_projection"]
    with open(path("pca2.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,pc1,pc2\n")
        for i, row in zip(profile.ids, proj):
            fh.write(f"{int(i)},{row[0]:.9g},{row[1]:.9g}\n")

    with open(path("tests.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(bundle["tests"], fh, indent=2)
        fh.write("\n")

    if "label_table" in bundle:
        with open(path("labels.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("class,count_full,frac_full,count_subset,frac_subset,delta\n")
            for row in bundle["label_table"]:
                fh.write(
                    f"{row['class']},{row['count_full']},{row['frac_full']:.9g},"
                    f"{row['count_subset']},{row['frac_subset']:.9g},{row['delta']:.9g}\n"
                )
    elif "label_counts" in bundle:
        counts, fracs = bundle["label_counts"], bundle["label_fracs"]
        with open(path("labels.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("class,count,frac\n")
            for i in range(len(counts)):
                fh.write(f"class_{i},{int(counts[i])},{fracs[i]:.9g}\n")
