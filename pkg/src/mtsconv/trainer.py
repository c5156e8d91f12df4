"""Training loop, grid search, and cross-validated experiments.

Each epoch runs shuffled batches (forward, cross-entropy, backward,
Adam step, then weight averaging on every multi-scale layer), evaluates
validation loss, and stops after ``patience`` epochs without
improvement, restoring the best-validation snapshot.  Fold and grid
jobs are independent; ``run_jobs`` fans them out over a process pool
when workers > 1 and merges results in a deterministic order.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import load_fold
from .errors import TrainingDivergedError
from .interp import ScaleSet
from .layers import softmax_cross_entropy
from .models import build_model
from .optim import Adam

log = logging.getLogger(__name__)

# the factor combinations searched by default, six 3-branch,
# three 5-branch and two 7-branch sets
DEFAULT_SCALE_SETS = (
    ScaleSet((0.25, 1, 4)),
    ScaleSet((0.5, 1, 2)),
    ScaleSet((0.7, 1, 1.428)),
    ScaleSet((0.8, 1, 1.25)),
    ScaleSet((0.9, 1, 1.111)),
    ScaleSet((0.95, 1, 1.053)),
    ScaleSet((0.25, 0.5, 1, 2, 4)),
    ScaleSet((0.5, 0.7, 1, 1.428, 2)),
    ScaleSet((0.8, 0.9, 1, 1.111, 1.25)),
    ScaleSet((0.25, 0.5, 0.7, 1, 1.428, 2, 4)),
    ScaleSet((0.7, 0.8, 0.9, 1, 1.111, 1.25, 1.428)),
)

DEFAULT_L2_GRID = (1e-5, 1e-4, 1e-3, 1e-2)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass
class TrainResult:
    history: list            # per-epoch dicts
    best_epoch: int
    epochs_run: int
    seconds_per_epoch: float
    val_loss: float
    val_accuracy: float


@dataclass
class FoldRecord:
    fold: int
    val_accuracy: float
    val_loss: float
    test_accuracy: float
    epochs_run: int
    seconds_per_epoch: float
    usage: list              # per multi-scale layer, per-branch fractions


@dataclass
class ExperimentResult:
    arch: str
    variant: str             # "standard" | "mts"
    l2: float
    scales: ScaleSet | None
    folds: list = field(default_factory=list)

    @property
    def mean_test_accuracy(self):
        return float(np.mean([f.test_accuracy for f in self.folds]))

    @property
    def mean_val_accuracy(self):
        return float(np.mean([f.val_accuracy for f in self.folds]))

    @property
    def mean_val_loss(self):
        return float(np.mean([f.val_loss for f in self.folds]))

    @property
    def mean_seconds_per_epoch(self):
        return float(np.mean([f.seconds_per_epoch for f in self.folds]))

    def mean_usage(self):
        """Branch usage averaged over folds and multi-scale layers."""
        rows = [np.mean(f.usage, axis=0) for f in self.folds if f.usage]
        if not rows:
            return None
        return list(np.mean(rows, axis=0))


def _param_norms(model):
    return {
        f"param{i}": float(np.linalg.norm(p.value))
        for i, p in enumerate(model.parameters())
    }


def evaluate(model, batches):
    """Mean segment loss plus utterance-level accuracy.

    Segments of one utterance share its group id; class probabilities
    are averaged per group before the argmax.
    """
    total_loss = 0.0
    total_items = 0
    prob_sums = {}
    counts = {}
    truth = {}
    for x, y, groups in batches:
        logits = model.forward(x)
        loss, _, probs = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        total_items += len(y)
        for row, label, gid in zip(probs, y, groups):
            if gid in prob_sums:
                prob_sums[gid] = prob_sums[gid] + row
                counts[gid] += 1
            else:
                prob_sums[gid] = row.copy()
                counts[gid] = 1
                truth[gid] = int(label)
    correct = sum(
        1 for gid, acc in prob_sums.items() if int(np.argmax(acc)) == truth[gid]
    )
    return total_loss / max(total_items, 1), correct / max(len(prob_sums), 1)


def train(model, fold_batches, config):
    """Train with early stopping; returns the model in its best state.

    The stopping signal is validation loss (halt after ``patience``
    epochs without improvement); the restored snapshot is the best
    validation-accuracy epoch, ties broken by lower loss, matching the
    selection metric used by the grid search.
    """
    optimizer = Adam(model.parameters(), lr=config.learning_rate,
                     weight_decay=config.l2)
    history = []
    best_loss = np.inf
    best_key = (-1.0, -np.inf)
    best_state = model.snapshot()
    best_epoch = 0
    best_val_acc = 0.0
    best_val_loss = np.inf
    stale = 0
    epoch_seconds = []
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        model.reset_usage()
        for batch_index, (x, y, _) in enumerate(fold_batches.train_batches(epoch)):
            logits = model.forward(x)
            loss, grad, _ = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}",
                    epoch=epoch, batch=batch_index, layer_norms=_param_norms(model),
                )
            optimizer.zero_grad()
            model.backward(grad)
            optimizer.step()
            model.average_weights()
        epoch_seconds.append(time.perf_counter() - start)
        val_loss, val_acc = evaluate(model, fold_batches.val_batches())
        history.append({"epoch": epoch, "val_loss": val_loss, "val_accuracy": val_acc,
                        "seconds": epoch_seconds[-1]})
        key = (val_acc, -val_loss)
        if key > best_key:
            best_key = key
            best_state = model.snapshot()
            best_epoch = epoch
            best_val_acc = val_acc
            best_val_loss = val_loss
        if val_loss < best_loss:
            best_loss = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.restore(best_state)
    return TrainResult(history, best_epoch, len(history),
                       float(np.mean(epoch_seconds)), best_val_loss, best_val_acc)


def run_fold(manifest, plan, fold_index, cache_dir, arch, scales, config,
             input_shape=None, return_model=False):
    """Train and evaluate one (architecture, variant, fold) cell."""
    batches = load_fold(manifest, plan, fold_index, cache_dir,
                        batch_size=config.batch_size, seed=config.seed)
    if input_shape is None:
        x0, _, _ = next(iter(batches.val_batches()))
        input_shape = x0.shape[2], x0.shape[3]
    seed_seq = np.random.SeedSequence([config.seed, fold_index])
    model = build_model(arch, input_shape, manifest.num_classes, scales=scales,
                        rng=np.random.default_rng(seed_seq))
    result = train(model, batches, config)
    model.reset_usage()
    _, test_acc = evaluate(model, batches.test_batches())
    usage = [list(layer.branch_usage()) for layer in model.mts_layers()]
    record = FoldRecord(
        fold=fold_index,
        val_accuracy=result.val_accuracy,
        val_loss=result.val_loss,
        test_accuracy=test_acc,
        epochs_run=result.epochs_run,
        seconds_per_epoch=result.seconds_per_epoch,
        usage=usage,
    )
    if return_model:
        return record, model
    return record


def _run_grid_job(args):
    manifest, plan, cache_dir, arch, scales, config, fold_index = args
    return run_fold(manifest, plan, fold_index, cache_dir, arch, scales, config)


def run_jobs(jobs, workers=1):
    """Evaluate fold jobs, optionally on a process pool; order preserved."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_grid_job(j) for j in jobs]
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(workers) as pool:
        return pool.map(_run_grid_job, jobs)


def grid_search(arch, manifest, plan, cache_dir, l2_grid, scale_sets, config,
                workers=1):
    """Pick the best regularizer (and scale set for the multi-scale
    variant) by mean validation accuracy across folds; returns one
    ExperimentResult per variant carrying the winner's test accuracy."""
    candidates = {"standard": [(l2, None) for l2 in l2_grid],
                  "mts": [(l2, ss) for l2 in l2_grid for ss in scale_sets]}
    best = {}
    for variant, cands in candidates.items():
        results = []
        for l2, scales in cands:
            cfg = replace(config, l2=l2)
            jobs = [(manifest, plan, cache_dir, arch, scales, cfg, k)
                    for k in range(plan.num_folds)]
            folds = run_jobs(jobs, workers=workers)
            results.append(ExperimentResult(arch, variant, l2, scales, folds))
        # higher validation accuracy wins; break ties on lower loss,
        # then on grid order
        order = sorted(
            range(len(results)),
            key=lambda i: (-results[i].mean_val_accuracy, results[i].mean_val_loss, i),
        )
        best[variant] = results[order[0]]
        log.info("%s %s grid winner: l2=%g scales=%s val=%.4f", arch, variant,
                 best[variant].l2, best[variant].scales,
                 best[variant].mean_val_accuracy)
    return best


def run_experiment(manifest, plan, cache_dir, archs, config, l2_grid=(1e-4,),
                   scale_sets=(ScaleSet((0.5, 1, 2)),), workers=1):
    """Standard-vs-multi-scale comparison over architectures.

    Returns a list of ExperimentResult (two per architecture).  With a
    single-point grid this degenerates to one train/eval per cell.
    """
    out = []
    for arch in archs:
        best = grid_search(arch, manifest, plan, cache_dir, l2_grid, scale_sets,
                           config, workers=workers)
        out.extend([best["standard"], best["mts"]])
    return out


def timing_ratio(results, arch=None):
    """Mean seconds/epoch of the multi-scale variant over the standard one."""
    std = [r.mean_seconds_per_epoch for r in results
           if r.variant == "standard" and (arch is None or r.arch == arch)]
    mts = [r.mean_seconds_per_epoch for r in results
           if r.variant == "mts" and (arch is None or r.arch == arch)]
    if not std or not mts:
        return None
    return float(np.mean(mts) / np.mean(std))
