"""End-to-end orchestration.

Prepares per-sample stream inputs once, trains the two-stream model on a
frozen traversal sequence with minibatch ADAM, and provides prediction,
evaluation metrics, checkpoints, the component-removal ablation harness,
and the random-tree benchmark.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .data import DatasetManifest, Sample
from .embedding import (PatchConfig, extract_landmark_patches, make_encoder,
                        structure_embed)
from .graph import (LandmarkSet, SpanningTree, TraversalSequence, medoid_root,
                    num_edges, preorder_traverse, prim_mst, tree_from_sequence)
from .neural import (AdamConfig, CHECKPOINT_FORMAT, FocalLossConfig,
                     TwoStreamModel, adam_init, adam_step, load_named_arrays,
                     save_named_arrays)

__all__ = [
    "TrainConfig",
    "derive_seed",
    "PreparedData",
    "fit",
    "train",
    "TrainedModel",
    "predict",
    "evaluate",
    "EvalReport",
    "ablate",
    "AblationReport",
    "ABLATIONS",
    "bench_random_trees",
    "BenchResult",
    "save_model",
    "load_model",
    "curves_csv",
]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from repr-able parts; identical across runs and
    processes (unlike the builtin hash)."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class TrainConfig:
    """Final-training hyperparameters; the defaults are the desk-scale ones."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    seed: int = 0
    hidden_size: int = 32
    fusion_size: int = 32
    encoder: str = "random-projection"
    encoder_dim: int = 64
    patch_size: int = 17
    mode: str = "full"
    val_fraction: float = 0.2
    patience: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("momentum decays must lie in (0, 1)")
        if self.hidden_size < 1 or self.fusion_size < 1 or self.encoder_dim < 1:
            raise ValueError("model sizes must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val fraction must be in (0, 1)")
        FocalLossConfig(self.focal_gamma, self.focal_alpha)  # range check

    def focal(self) -> FocalLossConfig:
        return FocalLossConfig(self.focal_gamma, self.focal_alpha)

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2)


def _make_model(cfg: TrainConfig, texture_dim: int, classes: int, seed: int) -> TwoStreamModel:
    return TwoStreamModel(texture_dim=texture_dim, classes=classes,
                          hidden_dim=cfg.hidden_size, fusion_dim=cfg.fusion_size,
                          structure_dim=2, mode=cfg.mode, seed=seed)


class PreparedData:
    """Per-sample stream inputs, computed once per dataset.

    Holds the (m, n, 2) coordinate stack, the per-landmark patch stacks,
    and, for non-trainable encoders, the cached (m, n, d) patch encodings
    gathered per traversal token at batch time.
    """

    def __init__(self, coords, labels, tags, classes, patches=None, encodings=None):
        self.coords = coords
        self.labels = labels
        self.tags = tags
        self.classes = classes
        self.patches = patches
        self.encodings = encodings

    @classmethod
    def build(cls, manifest: DatasetManifest, encoder=None, patch_size: int = 17,
              need_texture: bool = True) -> "PreparedData":
        if not manifest.has_landmarks:
            raise ValueError("dataset has no landmarks")
        coords = manifest.coords()
        patches = encodings = None
        if need_texture:
            if not manifest.has_images:
                raise ValueError("texture stream requires images")
            pcfg = PatchConfig(patch_size)
            patches = np.stack([
                extract_landmark_patches(s.image, s.landmarks, pcfg)
                for s in manifest.samples
            ])
            if encoder is not None and not encoder.trainable:
                m, n, s, _ = patches.shape
                flat = encoder.encode(patches.reshape(m * n, s, s))
                encodings = flat.reshape(m, n, -1)
        return cls(coords, manifest.labels(), list(manifest.tags),
                   manifest.class_count, patches, encodings)

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def landmark_count(self) -> int:
        return self.coords.shape[1]

    def indices(self, tag: str | None = None) -> np.ndarray:
        if tag is None:
            return np.arange(self.size)
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=np.int64)

    def gather_structure(self, tokens: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.coords[idx][:, tokens, :]

    def gather_texture(self, tokens: np.ndarray, idx: np.ndarray, encoder=None):
        """(B, T, d) texture inputs; trainable encoders are applied fresh and
        their forward cache is returned alongside."""
        if self.encodings is not None:
            return self.encodings[idx][:, tokens, :], None
        if encoder is None or self.patches is None:
            raise ValueError("no cached encodings and no trainable encoder given")
        batch = self.patches[idx]
        m, n, s, _ = batch.shape
        flat, cache = encoder.forward(batch.reshape(m * n, s, s))
        per_landmark = flat.reshape(m, n, -1)
        return per_landmark[:, tokens, :], cache


def _stratified_carve(labels: np.ndarray, idx: np.ndarray, fraction: float,
                      seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split `idx` into (kept, carved) with per-class proportions."""
    rng = np.random.default_rng(seed)
    kept, carved = [], []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        rng.shuffle(members)
        cut = int(round(fraction * members.size))
        carved.extend(members[:cut])
        kept.extend(members[cut:])
    return np.sort(np.array(kept, dtype=np.int64)), np.sort(np.array(carved, dtype=np.int64))


def _scatter_token_grads(d_xt: np.ndarray, tokens: np.ndarray, n: int) -> np.ndarray:
    """Fold per-token texture gradients back onto the n distinct landmarks."""
    B, T, d = d_xt.shape
    out = np.zeros((B, n, d))
    np.add.at(out, (np.arange(B)[:, None], tokens[None, :]), d_xt)
    return out


def _mean_loss(model, prepared, tokens, idx, focal, encoder, batch_size=256):
    """Mean per-head-per-sample focal loss over `idx` (forward only)."""
    total = 0.0
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        xs = prepared.gather_structure(tokens, chunk) if model.uses_structure else None
        xt = prepared.gather_texture(tokens, chunk, encoder)[0] if model.uses_texture else None
        parts = model.loss_parts(xs, xt, prepared.labels[chunk], focal)
        total += sum(parts) / model.head_count * chunk.size
    return total / idx.size if idx.size else 0.0


def fit(model: TwoStreamModel, prepared: PreparedData, sequence: TraversalSequence,
        train_idx: np.ndarray, cfg: TrainConfig, encoder=None,
        val_idx: np.ndarray | None = None):
    """Minibatch ADAM over the summed focal losses; deterministic per seed.

    Returns {"train": [...], "val": [...]} loss curves on the objective
    scale (mean per-head per-sample focal loss). With `cfg.patience` set,
    stops once the validation loss has not improved for that many epochs;
    the returned best value is the minimum validation loss observed.
    """
    if train_idx.size == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    tokens = sequence.as_array()
    params = model.param_dict()
    state = adam_init(params)
    adam_cfg = cfg.adam()
    focal = cfg.focal()
    train_encoder = encoder is not None and getattr(encoder, "trainable", False) \
        and model.uses_texture
    if train_encoder:
        enc_state = adam_init(encoder.params)
    curves = {"train": [], "val": []}
    best_val = np.inf
    stale = 0
    step = 0
    for _epoch in range(cfg.epochs):
        order = train_idx.copy()
        rng.shuffle(order)
        loss_sum = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xs = prepared.gather_structure(tokens, batch) if model.uses_structure else None
            xt = enc_cache = None
            if model.uses_texture:
                xt, enc_cache = prepared.gather_texture(tokens, batch, encoder)
            total, _parts, grads, _dxs, dxt = model.loss_and_grads(
                xs, xt, prepared.labels[batch], focal)
            loss_sum += total
            scale = 1.0 / batch.size
            step += 1
            adam_step(params, {k: g * scale for k, g in grads.items()}, state, step, adam_cfg)
            if train_encoder and dxt is not None:
                denc = _scatter_token_grads(dxt, tokens, prepared.landmark_count)
                enc_grads = encoder.backward(enc_cache, denc.reshape(-1, denc.shape[2]))
                adam_step(encoder.params,
                          {k: g * scale for k, g in enc_grads.items()},
                          enc_state, step, adam_cfg)
        curves["train"].append(loss_sum / (order.size * model.head_count))
        if val_idx is not None and val_idx.size:
            val = _mean_loss(model, prepared, tokens, val_idx, focal, encoder)
            curves["val"].append(val)
            if val < best_val - 1e-12:
                best_val = val
                stale = 0
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    break
    curves["best_val"] = best_val if best_val < np.inf else (
        curves["val"][-1] if curves["val"] else None)
    return curves


@dataclass
class TrainedModel:
    """A trained model bundle: network, encoder, and the frozen traversal."""

    model: TwoStreamModel
    encoder: object | None
    sequence: TraversalSequence
    tree: SpanningTree
    patch_size: int
    focal: FocalLossConfig
    classes: int
    landmark_count: int

    def predict_batch(self, prepared: PreparedData, idx: np.ndarray):
        tokens = self.sequence.as_array()
        xs = prepared.gather_structure(tokens, idx) if self.model.uses_structure else None
        xt = None
        if self.model.uses_texture:
            xt, _ = prepared.gather_texture(tokens, idx, self.encoder)
        return self.model.predict_proba(xs, xt)


def _check_sequence(manifest: DatasetManifest, sequence: TraversalSequence) -> None:
    n = manifest.landmark_count
    if sequence.length != 2 * n - 1:
        raise ValueError(
            f"sequence length {sequence.length} does not match {n} landmarks")
    if max(sequence.tokens) >= n or min(sequence.tokens) < 0:
        raise ValueError("sequence token out of range for this dataset")


def train(manifest: DatasetManifest, sequence: TraversalSequence, cfg: TrainConfig,
          tree: SpanningTree | None = None):
    """Train on the train-tagged samples with a carved-out validation part.

    Returns (TrainedModel, curves). The tree metadata is recovered from
    the sequence when not supplied.
    """
    if manifest.size == 0:
        raise ValueError("empty dataset")
    _check_sequence(manifest, sequence)
    if tree is None:
        tree = tree_from_sequence(sequence.tokens, manifest.landmark_count)
    need_texture = cfg.mode != "structure_only"
    encoder = None
    if need_texture:
        encoder = make_encoder(cfg.encoder, cfg.patch_size, cfg.encoder_dim,
                               seed=derive_seed(cfg.seed, "encoder"))
    prepared = PreparedData.build(manifest, encoder, cfg.patch_size, need_texture)
    train_idx = prepared.indices("train")
    if train_idx.size == 0:
        raise ValueError("no samples tagged 'train'")
    fit_idx, val_idx = _stratified_carve(prepared.labels, train_idx, cfg.val_fraction,
                                         derive_seed(cfg.seed, "val-carve"))
    if fit_idx.size == 0:
        fit_idx, val_idx = train_idx, np.array([], dtype=np.int64)
    model = _make_model(cfg, encoder.output_dim if encoder else 1, prepared.classes,
                        seed=derive_seed(cfg.seed, "model"))
    curves = fit(model, prepared, sequence, fit_idx, cfg, encoder, val_idx)
    trained = TrainedModel(model, encoder, sequence, tree, cfg.patch_size, cfg.focal(),
                           prepared.classes, prepared.landmark_count)
    return trained, curves


def predict(trained: TrainedModel, sample: Sample) -> dict[str, np.ndarray | None]:
    """Probabilities for one sample: the primary head plus per-stream heads."""
    if sample.landmarks is None:
        raise ValueError("sample has no landmarks")
    if sample.landmarks.n != trained.landmark_count:
        raise ValueError(
            f"sample has {sample.landmarks.n} landmarks, model expects {trained.landmark_count}")
    xs = xt = None
    if trained.model.uses_structure:
        xs = structure_embed(trained.sequence, sample.landmarks)[None, :, :]
    if trained.model.uses_texture:
        if sample.image is None:
            raise ValueError("sample has no image but the texture stream needs one")
        patches = extract_landmark_patches(sample.image, sample.landmarks,
                                           PatchConfig(trained.patch_size))
        enc = trained.encoder.encode(patches)
        xt = enc[trained.sequence.as_array()][None, :, :]
    probs = trained.model.predict_proba(xs, xt)
    return {k: (v[0] if v is not None else None) for k, v in probs.items()}


@dataclass(frozen=True)
class EvalReport:
    """Confusion matrix (rows true, columns predicted) plus derived metrics."""

    confusion: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes: int) -> "EvalReport":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        matrix = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(matrix, (y_true, y_pred), 1)
        return cls(matrix)

    @property
    def size(self) -> int:
        return int(self.confusion.sum())

    @property
    def recognition_rate(self) -> float:
        """Overall accuracy in percent: trace over total."""
        return 100.0 * float(np.trace(self.confusion)) / self.size

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def f1_scores(self) -> np.ndarray:
        """One-vs-all F1 per class; 0 by convention when undefined."""
        diag = np.diag(self.confusion).astype(float)
        col = self.confusion.sum(axis=0).astype(float)
        row = self.confusion.sum(axis=1).astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            precision = np.where(col > 0, diag / col, 0.0)
            recall = np.where(row > 0, diag / row, 0.0)
            pr = precision + recall
            f1 = np.where(pr > 0, 2.0 * precision * recall / pr, 0.0)
        return f1

    def empty_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.support == 0)]


def evaluate(trained: TrainedModel, manifest: DatasetManifest,
             tag: str | None = None) -> EvalReport:
    """Argmax of the primary head over the tagged samples (ties -> lowest
    class index)."""
    prepared = PreparedData.build(manifest, trained.encoder, trained.patch_size,
                                  need_texture=trained.model.uses_texture)
    idx = prepared.indices(tag)
    if idx.size == 0:
        raise ValueError(f"no samples tagged {tag!r}")
    preds = []
    for start in range(0, idx.size, 256):
        chunk = idx[start:start + 256]
        probs = trained.predict_batch(prepared, chunk)["primary"]
        preds.append(probs.argmax(axis=1))
    y_pred = np.concatenate(preds)
    return EvalReport.from_predictions(prepared.labels[idx], y_pred, trained.classes)


ABLATIONS = ("tree-topology", "structure-stream", "texture-stream", "fusion-strategy")


@dataclass(frozen=True)
class AblationRow:
    removed: str
    recognition_rate: float


@dataclass(frozen=True)
class AblationReport:
    """Recognition rates with one component removed at a time.

    Drops are recomputed from the stored rates, never stored themselves.
    Rows b-d reuse the learned tree; row a substitutes a random one.
    """

    full_recognition_rate: float
    rows: tuple[AblationRow, ...]

    def drop(self, removed: str) -> float:
        for row in self.rows:
            if row.removed == removed:
                return self.full_recognition_rate - row.recognition_rate
        raise KeyError(removed)

    def as_records(self) -> list[dict]:
        return [
            {"removed": r.removed, "recognition_rate": r.recognition_rate,
             "drop": self.drop(r.removed)}
            for r in self.rows
        ]


def ablate(manifest: DatasetManifest, sequence: TraversalSequence, cfg: TrainConfig,
           eval_tag: str = "test") -> AblationReport:
    """Train the full model and the four component-removal variants with the
    same budgets and seed, and report held-out recognition rates."""
    if cfg.mode != "full":
        raise ValueError("ablation harness starts from the full model")

    def rr(seq: TraversalSequence, mode: str) -> float:
        trained, _ = train(manifest, seq, replace(cfg, mode=mode))
        return evaluate(trained, manifest, eval_tag).recognition_rate

    full_rr = rr(sequence, "full")
    n = manifest.landmark_count
    rng = np.random.default_rng(derive_seed(cfg.seed, "ablation-random-tree"))
    random_tree = prim_mst(n, rng.uniform(size=num_edges(n)), root=sequence.tokens[0])
    rows = (
        AblationRow("tree-topology", rr(preorder_traverse(random_tree), "full")),
        AblationRow("structure-stream", rr(sequence, "texture_only")),
        AblationRow("texture-stream", rr(sequence, "structure_only")),
        AblationRow("fusion-strategy", rr(sequence, "concat")),
    )
    return AblationReport(full_rr, rows)


@dataclass(frozen=True)
class BenchResult:
    """Recognition rates of models trained on independent random trees."""

    rates: tuple[float, ...]
    trees: tuple[SpanningTree, ...]

    @property
    def spread(self) -> float:
        return max(self.rates) - min(self.rates)

    def summary(self) -> dict[str, float]:
        rates = np.asarray(self.rates)
        return {
            "count": float(rates.size),
            "min": float(rates.min()),
            "median": float(np.median(rates)),
            "max": float(rates.max()),
            "spread": float(self.spread),
        }


def bench_random_trees(manifest: DatasetManifest, cfg: TrainConfig, count: int = 20,
                       seed: int = 0, eval_tag: str = "test",
                       root: int | None = None) -> BenchResult:
    """Train one model per uniform-random tree with identical budgets.

    The spread of the resulting recognition rates measures how sensitive
    the classifier is to the traversal topology.
    """
    if count < 1:
        raise ValueError("need at least one tree")
    n = manifest.landmark_count
    if root is None:
        root = medoid_root(LandmarkSet(manifest.coords()[manifest.indices("train")].mean(axis=0)))
    rng = np.random.default_rng(derive_seed(seed, "bench-random-trees"))
    rates, trees = [], []
    for _ in range(count):
        tree = prim_mst(n, rng.uniform(size=num_edges(n)), root=root)
        trained, _ = train(manifest, preorder_traverse(tree), cfg, tree=tree)
        rates.append(evaluate(trained, manifest, eval_tag).recognition_rate)
        trees.append(tree)
    return BenchResult(tuple(rates), tuple(trees))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, trained: TrainedModel) -> None:
    arrays = {f"model.{k}": v for k, v in trained.model.param_dict().items()}
    encoder_meta = None
    if trained.encoder is not None:
        encoder_meta = {
            "kind": trained.encoder.kind,
            "output_dim": trained.encoder.output_dim,
            "seed": trained.encoder.seed,
        }
        if trained.encoder.trainable:
            arrays.update({f"encoder.{k}": v for k, v in trained.encoder.params.items()})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "mode": trained.model.mode,
        "classes": trained.classes,
        "landmarks": trained.landmark_count,
        "hidden_dim": trained.model.hidden_dim,
        "fusion_dim": trained.model.fusion_dim,
        "texture_dim": trained.model.texture_dim,
        "patch_size": trained.patch_size,
        "focal": {"gamma": trained.focal.gamma, "alpha": trained.focal.alpha},
        "sequence": list(trained.sequence.tokens),
        "root": trained.tree.root,
        "encoder": encoder_meta,
    }
    save_named_arrays(path, arrays, meta)


def load_model(path) -> TrainedModel:
    arrays, meta = load_named_arrays(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    model = TwoStreamModel(texture_dim=int(meta["texture_dim"]),
                           classes=int(meta["classes"]),
                           hidden_dim=int(meta["hidden_dim"]),
                           fusion_dim=int(meta["fusion_dim"]),
                           structure_dim=2, mode=meta["mode"], seed=0)
    params = model.param_dict()
    for key, value in arrays.items():
        if key.startswith("model."):
            params[key[len("model."):]][...] = value
    encoder = None
    if model.uses_texture:
        enc_meta = meta.get("encoder")
        if enc_meta is None:
            raise ValueError("checkpoint is missing encoder metadata")
        encoder = make_encoder(enc_meta["kind"], int(meta["patch_size"]),
                               int(enc_meta["output_dim"]), int(enc_meta["seed"]))
        if encoder.trainable:
            for key, value in arrays.items():
                if key.startswith("encoder."):
                    encoder.params[key[len("encoder."):]][...] = value
    sequence = TraversalSequence(tuple(int(t) for t in meta["sequence"]))
    tree = tree_from_sequence(sequence.tokens, int(meta["landmarks"]))
    focal = FocalLossConfig(float(meta["focal"]["gamma"]), float(meta["focal"]["alpha"]))
    return TrainedModel(model, encoder, sequence, tree, int(meta["patch_size"]),
                        focal, int(meta["classes"]), int(meta["landmarks"]))


def curves_csv(curves: dict) -> str:
    lines = ["epoch,train_loss,val_loss"]
    val = curves.get("val", [])
    for epoch, tr in enumerate(curves["train"], start=1):
        v = repr(val[epoch - 1]) if epoch - 1 < len(val) else ""
        lines.append(f"{epoch},{tr!r},{v}")
    return "\n".join(lines) + "\n"
