"""Online curation loop: super-batch scoring, trimming, retention, FPS.

Each super-batch drawn from the shuffled corpus is scored by distance to
the nearest prototype.  The farthest few are discarded as outliers, the
next-farthest slice is retained outright (these are the informative
long-tail samples), and the remaining pool is under-sampled: transported
onto the prototypes under an equipartition constraint, grouped by hard
assignment, and reduced per cluster with farthest point sampling.  The
resulting mini-batch updates the prototypes and joins the curated set.

Every sort in the loop breaks ties by ascending sample id, so a run is a
pure function of (corpus bytes, config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig
from .embedding import unify_batch
from .errors import (
    FormatError,
    InsufficientWarmupError,
    NumericalFailureError,
    UsageError,
)
from .io import Corpus
from .prototypes import (
    PrototypeBank,
    init_kmeans,
    nearest_prototype_batch,
    sinkhorn_plan,
    update_prototypes,
)

REASONS = ("distant", "fps")


@dataclass(frozen=True)
class SelectionRow:
    id: int
    iteration: int
    reason: str
    proto: int
    distance: float


@dataclass
class CuratedSelection:
    rows: list[SelectionRow] = field(default_factory=list)
    stats: list[dict] = field(default_factory=list)

    def ids(self) -> np.ndarray:
        return np.array([row.id for row in self.rows], dtype=np.uint64)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        lines = ["id,iteration,reason,proto,distance"]
        for row in self.rows:
            # repr is the shortest exact float form, so a written selection
            # survives a read back bit for bit
            lines.append(
                f"{row.id},{row.iteration},{row.reason},{row.proto},{row.distance!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "CuratedSelection":
        lines = text.splitlines()
        if not lines or lines[0] != "id,iteration,reason,proto,distance":
            raise FormatError("selection file missing expected CSV header")
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FormatError(f"selection line {lineno}: expected 5 fields")
            try:
                row = SelectionRow(
                    id=int(parts[0]),
                    iteration=int(parts[1]),
                    reason=parts[2],
                    proto=int(parts[3]),
                    distance=float(parts[4]),
                )
            except ValueError:
                raise FormatError(f"selection line {lineno}: malformed field") from None
            if row.reason not in REASONS:
                raise FormatError(
                    f"selection line {lineno}: unknown reason {row.reason!r}"
                )
            rows.append(row)
        return cls(rows=rows)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "CuratedSelection":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_csv(fh.read())

    def write_stats(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.stats, fh, indent=2)
            fh.write("\n")


def score_superbatch(
    z: np.ndarray, bank: PrototypeBank
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype index and distance for each row of z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    return nearest_prototype_batch(z, bank)


def trim_outliers(
    ids: np.ndarray, dist: np.ndarray, outlier_frac: float
) -> tuple[np.ndarray, np.ndarray]:
    """Drop the floor(outlier_frac * m) largest-distance samples.

    Returns (kept positions in input order, trimmed positions).  Distance
    ties resolve by id: among equals the larger id is trimmed first.
    """
    m = len(ids)
    t = int(np.floor(outlier_frac * m))
    if t == 0:
        return np.arange(m), np.zeros(0, dtype=np.int64)
    order = np.lexsort((ids, dist))  # ascending distance, ties ascending id
    trimmed = order[m - t :]
    kept = np.sort(order[: m - t])
    return kept, trimmed


def select_distant(
    ids: np.ndarray, dist: np.ndarray, keep_frac: float
) -> tuple[np.ndarray, np.ndarray]:
    """Split into (distant, pool): the floor(keep_frac * m) largest distances.

    Distant comes back in selection order (distance descending, ties by
    ascending id, smaller id preferred into the distant set); pool keeps
    input order.
    """
    m = len(ids)
    nd = int(np.floor(keep_frac * m))
    if nd == 0:
        return np.zeros(0, dtype=np.int64), np.arange(m)
    order = np.lexsort((ids, -dist))  # descending distance, ties ascending id
    distant = order[:nd]
    pool = np.sort(order[nd:])
    return distant, pool


def fps_select(
    points: np.ndarray, ids: np.ndarray, budget: int, anchor: np.ndarray
) -> np.ndarray:
    """Greedy max-min subset of one cluster, anchored at its prototype.

    The first pick is the point farthest from the anchor; each later pick
    maximizes the minimum distance to the points already picked.  All ties
    go to the smallest id.  Returns positions into ``points`` in pick
    order; if the cluster fits the budget, everything is returned in input
    order.
    """
    if budget < 1:
        raise UsageError("FPS budget must be >= 1")
    points = np.asarray(points, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.uint64)
    n = len(points)
    if n <= budget:
        return np.arange(n)

    def pick(score: np.ndarray, available: np.ndarray) -> int:
        masked = np.where(available, score, -np.inf)
        best = masked.max()
        cands = np.flatnonzero(masked == best)
        return int(cands[np.argmin(ids[cands])])

    available = np.ones(n, dtype=bool)
    anchor_dist = np.linalg.norm(points - np.asarray(anchor, dtype=np.float64)[None, :], axis=1)
    first = pick(anchor_dist, available)
    chosen = [first]
    available[first] = False
    # After the first pick the anchor drops out; max-min runs over picks only.
    min_dist = np.linalg.norm(points - points[first][None, :], axis=1)
    for _ in range(budget - 1):
        pos = pick(min_dist, available)
        chosen.append(pos)
        available[pos] = False
        min_dist = np.minimum(
            min_dist, np.linalg.norm(points - points[pos][None, :], axis=1)
        )
    return np.asarray(chosen, dtype=np.int64)


def curate_superbatch(
    z: np.ndarray, ids: np.ndarray, bank: PrototypeBank, cfg: EngineConfig
) -> tuple[list[tuple[int, str, int, float]], dict]:
    """One iteration of the curation pipeline over a super-batch.

    Returns (mini-batch records, stats).  Records are (id, reason, nearest
    prototype index, distance) in emission order: retained distant samples
    first (distance descending), then FPS picks grouped by cluster index in
    pick order.  Mutates the bank via the EMA update.
    """
    z = np.asarray(z, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.uint64)
    m = len(ids)
    stats: dict = {"superbatch": m}
    if m == 0:
        stats.update(trimmed=0, distant=0, pool=0, fps=0, minibatch=0)
        return [], stats

    proto_idx, dist = score_superbatch(z, bank)

    kept, trimmed = trim_outliers(ids, dist, cfg.outlier_frac)
    distant_local, pool_local = select_distant(
        ids[kept], dist[kept], cfg.keep_frac
    )
    distant = kept[distant_local]
    pool = kept[pool_local]

    order: list[int] = list(distant)
    fps_count = 0
    pool_sink = None
    if len(pool):
        pool_sink = sinkhorn_plan(
            z[pool], bank, epsilon=cfg.epsilon, max_iters=cfg.max_iters, tol=cfg.tol
        )
        if not pool_sink.converged:
            raise NumericalFailureError(
                f"Sinkhorn did not converge on the pool: residual {pool_sink.residual:.3g} "
                f"after {pool_sink.iterations} iterations"
            )
        hard = pool_sink.hard_assignment()
        for k in range(bank.k):
            members = pool[hard == k]
            if len(members) == 0:
                continue
            picks = fps_select(
                z[members], ids[members], cfg.per_cluster_budget, bank.protos[k]
            )
            order.extend(members[picks])
            fps_count += len(picks)

    mb = np.asarray(order, dtype=np.int64)
    records = [
        (int(ids[pos]), "distant" if i < len(distant) else "fps", int(proto_idx[pos]), float(dist[pos]))
        for i, pos in enumerate(mb)
    ]

    update_sink = None
    skipped: list[int] = []
    if len(mb):
        update_sink = sinkhorn_plan(
            z[mb], bank, epsilon=cfg.epsilon, max_iters=cfg.max_iters, tol=cfg.tol
        )
        if not update_sink.converged:
            raise NumericalFailureError(
                f"Sinkhorn did not converge on the mini-batch: residual "
                f"{update_sink.residual:.3g} after {update_sink.iterations} iterations"
            )
        skipped = update_prototypes(update_sink, z[mb], bank)

    stats.update(
        trimmed=int(len(trimmed)),
        distant=int(len(distant)),
        pool=int(len(pool)),
        fps=int(fps_count),
        minibatch=int(len(mb)),
        pool_sinkhorn_iterations=None if pool_sink is None else pool_sink.iterations,
        pool_sinkhorn_residual=None if pool_sink is None else float(pool_sink.residual),
        update_sinkhorn_iterations=None if update_sink is None else update_sink.iterations,
        update_sinkhorn_residual=None if update_sink is None else float(update_sink.residual),
        ema_skipped=skipped,
    )
    return records, stats


def run_curation(
    corpus: Corpus,
    cfg: EngineConfig,
    mode: str = "frozen",
    head=None,
    on_minibatch=None,
) -> tuple[CuratedSelection, PrototypeBank]:
    """Single curation epoch over a corpus.

    The seeded shuffle fixes the stream order; the first warmup_samples
    rows seed the prototypes by k-means and are not offered for curation.
    The rest is consumed in super-batch chunks, each contributing one
    curated mini-batch, until the stream or target_subset_size runs out.

    In joint mode the unified embeddings are recomputed through ``head``
    (any object with a ``unified(img, txt, space)`` method) before every
    iteration, and ``on_minibatch`` is invoked with the selected corpus row
    indices after each iteration so a trainer can take a step; the space
    then evolves with the head.  Frozen mode embeds the raw corpus once.
    """
    if mode not in ("frozen", "joint"):
        raise UsageError(f"unknown curation mode {mode!r}; expected 'frozen' or 'joint'")
    if mode == "joint" and head is None:
        raise UsageError("joint mode requires a projection head")
    if corpus.n < cfg.warmup_samples:
        raise InsufficientWarmupError(
            f"corpus has {corpus.n} samples but warmup_samples={cfg.warmup_samples}; "
            "curation needs at least the warm-up count"
        )

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(corpus.n)
    warm = perm[: cfg.warmup_samples]
    stream = perm[cfg.warmup_samples :]

    def embed(rows: np.ndarray) -> np.ndarray:
        img, txt = corpus.img[rows], corpus.txt[rows]
        if mode == "joint":
            return head.unified(img, txt, cfg.curation_space)
        return unify_batch(img, txt, cfg.curation_space)

    frozen_unified = None
    if mode == "frozen":
        frozen_unified = unify_batch(corpus.img, corpus.txt, cfg.curation_space)

    warm_z = frozen_unified[warm] if frozen_unified is not None else embed(warm)
    bank = init_kmeans(
        warm_z,
        cfg.K,
        max_iters=cfg.kmeans_max_iters,
        seed=cfg.seed,
        ema_alpha=cfg.ema_alpha,
    )

    selection = CuratedSelection()
    target = cfg.target_subset_size
    iteration = 0
    for start in range(0, len(stream), cfg.superbatch_size):
        rows = stream[start : start + cfg.superbatch_size]
        iteration += 1
        z = frozen_unified[rows] if frozen_unified is not None else embed(rows)
        records, stats = curate_superbatch(z, corpus.ids[rows], bank, cfg)

        if target is not None and len(selection) + len(records) > target:
            records = records[: target - len(selection)]
        pos_by_id = {int(corpus.ids[r]): int(r) for r in rows}
        taken = [pos_by_id[rec[0]] for rec in records]
        for rec in records:
            selection.rows.append(
                SelectionRow(
                    id=rec[0],
                    iteration=iteration,
                    reason=rec[1],
                    proto=rec[2],
                    distance=rec[3],
                )
            )
        stats["iteration"] = iteration
        stats["emitted"] = len(records)
        selection.stats.append(stats)

        if on_minibatch is not None and taken:
            on_minibatch(np.asarray(taken, dtype=np.int64))

        if target is not None and len(selection) >= target:
            break

    return selection, bank
