"""Metaheuristic search over edge weights.

Each candidate weight vector induces a spanning tree and a frozen
traversal sequence; fresh stream models are trained on that sequence for
a small inner budget and the candidate is scored by the mean validation
focal loss of the three heads. A global-best particle swarm drives the
search, and identical trees always receive identical scores because the
inner training seed is derived from the tree's edge set.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import DatasetManifest
from .graph import (LandmarkSet, SpanningTree, TraversalSequence, medoid_root,
                    num_edges, preorder_traverse, prim_mst)
from .pipeline import PreparedData, TrainConfig, derive_seed, fit, _make_model
from .neural import TwoStreamModel

__all__ = [
    "SwarmConfig",
    "ParticleSwarm",
    "ObjectiveReport",
    "IterationRecord",
    "TopologyHistory",
    "ObjectiveContext",
    "evaluate_objective",
    "optimize_topology",
    "TopologyResult",
]


@dataclass(frozen=True)
class SwarmConfig:
    """Swarm size, budget, and the constriction-style update constants.

    `inner_epochs` is the per-candidate stream-training budget;
    `cooperative_block` optionally updates only a rotating block of that
    many dimensions per step, which helps in very high-dimensional edge
    spaces.
    """

    swarm_size: int = 12
    iterations: int = 40
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    velocity_clamp: float = 0.5
    seed: int = 0
    inner_epochs: int = 5
    patience: int | None = 2
    cooperative_block: int | None = None
    snapshot_iterations: tuple[int, ...] = (1, 10, 30, 40)

    def __post_init__(self) -> None:
        if self.swarm_size < 2:
            raise ValueError("swarm size must be at least 2")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.inner_epochs < 1:
            raise ValueError("inner epochs must be positive")
        if not 0 < self.velocity_clamp <= 1:
            raise ValueError("velocity clamp is a fraction of the bound range")
        if self.cooperative_block is not None and self.cooperative_block < 1:
            raise ValueError("cooperative block must be positive")


class ParticleSwarm:
    """Global-best PSO over the box [lo, hi]^dim.

    Velocities are clamped to `velocity_clamp * (hi - lo)` and positions
    are clipped back into the box after every move, so all particles stay
    within bounds. The best score never increases.
    """

    def __init__(self, dim: int, objective, cfg: SwarmConfig,
                 lo: float = 0.0, hi: float = 1.0, workers: int = 1) -> None:
        if hi <= lo:
            raise ValueError("empty search box")
        self.cfg = cfg
        self.lo, self.hi = lo, hi
        self.objective = objective
        self.workers = max(1, workers)
        self.rng = np.random.default_rng(cfg.seed)
        self.positions = self.rng.uniform(lo, hi, size=(cfg.swarm_size, dim))
        self.velocities = np.zeros_like(self.positions)
        scores = self._evaluate(self.positions)
        self.pbest_positions = self.positions.copy()
        self.pbest_scores = scores
        best = int(np.argmin(scores))
        self.gbest_position = self.positions[best].copy()
        self.gbest_score = float(scores[best])
        self._block_cursor = 0

    def _evaluate(self, positions: np.ndarray) -> np.ndarray:
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return np.array(list(pool.map(self.objective, positions)), dtype=float)
        return np.array([self.objective(x) for x in positions], dtype=float)

    def _block_mask(self) -> np.ndarray | None:
        block = self.cfg.cooperative_block
        dim = self.positions.shape[1]
        if block is None or block >= dim:
            return None
        n_blocks = -(-dim // block)
        k = self._block_cursor % n_blocks
        self._block_cursor += 1
        mask = np.zeros(dim, dtype=bool)
        mask[k * block:(k + 1) * block] = True
        return mask

    def step(self) -> None:
        """One velocity/position update, re-evaluation, and best tracking."""
        cfg = self.cfg
        shape = self.positions.shape
        r1 = self.rng.uniform(size=shape)
        r2 = self.rng.uniform(size=shape)
        vel = (cfg.inertia * self.velocities
               + cfg.cognitive * r1 * (self.pbest_positions - self.positions)
               + cfg.social * r2 * (self.gbest_position - self.positions))
        vmax = cfg.velocity_clamp * (self.hi - self.lo)
        np.clip(vel, -vmax, vmax, out=vel)
        mask = self._block_mask()
        if mask is not None:
            vel[:, ~mask] = 0.0
        self.velocities = vel
        self.positions = np.clip(self.positions + vel, self.lo, self.hi)
        scores = self._evaluate(self.positions)
        improved = scores < self.pbest_scores
        self.pbest_positions[improved] = self.positions[improved]
        self.pbest_scores[improved] = scores[improved]
        best = int(np.argmin(self.pbest_scores))
        if self.pbest_scores[best] < self.gbest_score:
            self.gbest_score = float(self.pbest_scores[best])
            self.gbest_position = self.pbest_positions[best].copy()


@dataclass(frozen=True)
class ObjectiveReport:
    """Validation quality of one candidate tree.

    The three fields are mean per-sample focal losses of the fused,
    structure, and texture heads; `score` is their mean.
    """

    fused_loss: float
    structure_loss: float
    texture_loss: float
    tree: SpanningTree
    sequence: TraversalSequence

    @property
    def score(self) -> float:
        return (self.fused_loss + self.structure_loss + self.texture_loss) / 3.0


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    best_score: float
    fused_loss: float
    structure_loss: float
    texture_loss: float
    edges: tuple[tuple[int, int], ...]


class TopologyHistory:
    """Per-iteration global-best trace; the best score never increases."""

    def __init__(self) -> None:
        self.records: list[IterationRecord] = []

    def append(self, record: IterationRecord) -> None:
        if self.records and record.best_score > self.records[-1].best_score + 1e-12:
            raise ValueError("global best increased between iterations")
        self.records.append(record)

    def best_scores(self) -> list[float]:
        return [r.best_score for r in self.records]

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "iteration": r.iteration,
                "best_score": r.best_score,
                "fused_loss": r.fused_loss,
                "structure_loss": r.structure_loss,
                "texture_loss": r.texture_loss,
                "edges": [list(e) for e in r.edges],
            }, sort_keys=True))
        return "\n".join(lines) + "\n"


class ObjectiveContext:
    """Everything shared by candidate evaluations within one search run:
    the prepared dataset, the fixed fit/validation index split, the tree
    root, and the memo of already-scored trees."""

    def __init__(self, manifest: DatasetManifest, swarm_cfg: SwarmConfig,
                 train_cfg: TrainConfig, root: int | None = None) -> None:
        if train_cfg.mode != "full":
            raise ValueError("topology search scores the full two-stream model")
        train_idx = manifest.indices("train")
        if train_idx.size < 2:
            raise ValueError("topology search needs at least two training samples")
        if np.unique(manifest.labels()[train_idx]).size < 2:
            raise ValueError("topology search needs at least two classes")
        from .embedding import make_encoder  # local to avoid import noise at module load
        self.encoder = make_encoder(train_cfg.encoder, train_cfg.patch_size,
                                    train_cfg.encoder_dim,
                                    seed=derive_seed(train_cfg.seed, "encoder"))
        self.prepared = PreparedData.build(manifest, self.encoder,
                                           train_cfg.patch_size, need_texture=True)
        from .pipeline import _stratified_carve
        self.fit_idx, self.val_idx = _stratified_carve(
            self.prepared.labels, train_idx, train_cfg.val_fraction,
            derive_seed(train_cfg.seed, "val-carve"))
        if self.val_idx.size == 0:
            raise ValueError("validation split is empty; lower val_fraction or add data")
        self.n = self.prepared.landmark_count
        if root is None:
            mean_coords = self.prepared.coords[train_idx].mean(axis=0)
            root = medoid_root(LandmarkSet(np.clip(mean_coords, 0.0, 1.0)))
        self.root = root
        self.swarm_cfg = swarm_cfg
        self.train_cfg = train_cfg
        self.reports: dict[tuple, ObjectiveReport] = {}

    def score_tree(self, tree: SpanningTree) -> ObjectiveReport:
        key = tree.edges
        hit = self.reports.get(key)
        if hit is not None:
            return hit
        sequence = preorder_traverse(tree)
        seed = derive_seed(self.swarm_cfg.seed, "candidate", tree.edges)
        inner_cfg = replace(self.train_cfg, epochs=self.swarm_cfg.inner_epochs,
                            patience=self.swarm_cfg.patience, seed=seed)
        model = _make_model(inner_cfg, self.encoder.output_dim,
                            self.prepared.classes, seed=seed)
        fit(model, self.prepared, sequence, self.fit_idx, inner_cfg,
            self.encoder, self.val_idx)
        parts = _val_parts(model, self.prepared, sequence, self.val_idx,
                           inner_cfg, self.encoder)
        report = ObjectiveReport(parts[0], parts[1], parts[2], tree, sequence)
        self.reports[key] = report
        return report


def _val_parts(model: TwoStreamModel, prepared: PreparedData,
               sequence: TraversalSequence, idx: np.ndarray,
               cfg: TrainConfig, encoder) -> tuple[float, float, float]:
    tokens = sequence.as_array()
    focal = cfg.focal()
    sums = np.zeros(3)
    for start in range(0, idx.size, 256):
        chunk = idx[start:start + 256]
        xs = prepared.gather_structure(tokens, chunk)
        xt, _ = prepared.gather_texture(tokens, chunk, encoder)
        parts = model.loss_parts(xs, xt, prepared.labels[chunk], focal)
        sums += np.array(parts) * chunk.size
    means = sums / idx.size
    return float(means[0]), float(means[1]), float(means[2])


def evaluate_objective(w, manifest: DatasetManifest, swarm_cfg: SwarmConfig,
                       train_cfg: TrainConfig, root: int | None = None,
                       context: ObjectiveContext | None = None) -> ObjectiveReport:
    """Score one edge-weight vector.

    Builds the induced tree and frozen traversal, trains fresh models for
    the inner budget with a seed derived from the tree's edge set, and
    returns the mean validation focal losses. Two weight vectors that
    induce the same tree therefore get identical reports.
    """
    if context is None:
        context = ObjectiveContext(manifest, swarm_cfg, train_cfg, root)
    tree = prim_mst(context.n, w, root=context.root)
    return context.score_tree(tree)


@dataclass(frozen=True)
class TopologyResult:
    weights: np.ndarray
    report: ObjectiveReport
    history: TopologyHistory


def optimize_topology(manifest: DatasetManifest, swarm_cfg: SwarmConfig,
                      train_cfg: TrainConfig, root: int | None = None,
                      workers: int = 1) -> TopologyResult:
    """Run the swarm over edge-weight space.

    The first recorded iteration is the best of the random initial
    population; each later record follows one swarm update. The recorded
    best score is nonincreasing by construction.
    """
    context = ObjectiveContext(manifest, swarm_cfg, train_cfg, root)

    def objective(w: np.ndarray) -> float:
        return context.score_tree(prim_mst(context.n, w, root=context.root)).score

    swarm = ParticleSwarm(num_edges(context.n), objective, swarm_cfg, 0.0, 1.0, workers)
    history = TopologyHistory()

    def record(iteration: int) -> None:
        tree = prim_mst(context.n, swarm.gbest_position, root=context.root)
        report = context.score_tree(tree)
        history.append(IterationRecord(iteration, swarm.gbest_score,
                                       report.fused_loss, report.structure_loss,
                                       report.texture_loss, tree.edges))

    record(1)
    for iteration in range(2, swarm_cfg.iterations + 1):
        swarm.step()
        record(iteration)
    best_tree = prim_mst(context.n, swarm.gbest_position, root=context.root)
    return TopologyResult(swarm.gbest_position.copy(), context.score_tree(best_tree), history)
