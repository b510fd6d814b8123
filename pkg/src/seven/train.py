"""Training loop, evaluation, threshold calibration, ablations, and alpha sweeps."""

import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .arch import arch_from_config
from .config import HyperParams, derive_rng
from .data import batches
from .errors import ConfigError, DataFormatError, TrainingDivergedError
from .model import UNL, POS, SevenModel, save_checkpoint
from .optim import RmsProp

log = logging.getLogger(__name__)


class EpochRecord:
    """Pair-weighted mean losses for one epoch."""

    FIELDS = ("epoch", "total", "discriminative", "generative", "regularization",
              "labeled_pairs")

    def __init__(self, epoch, total, discriminative, generative, regularization,
                 labeled_pairs, wall_time_s):
        self.epoch = int(epoch)
        self.total = float(total)
        self.discriminative = float(discriminative)
        self.generative = float(generative)
        self.regularization = float(regularization)
        self.labeled_pairs = int(labeled_pairs)
        self.wall_time_s = float(wall_time_s)

    def row(self):
        return (self.epoch, self.total, self.discriminative, self.generative,
                self.regularization, self.labeled_pairs)


class TrainTrace:
    """Per-epoch records for one training run.

    The CSV form intentionally excludes wall time so identical runs produce
    identical bytes; timing lives in ``summary()``.
    """

    def __init__(self):
        self.records = []

    def add(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ConfigError(
                f"epoch {record.epoch} out of order after {self.records[-1].epoch}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path):
        lines = [",".join(EpochRecord.FIELDS)]
        for rec in self.records:
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in rec.row()))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines))
            fh.write("\n")

    def summary(self):
        if not self.records:
            return {"epochs": 0, "wall_time_s": 0.0}
        last = self.records[-1]
        return {
            "epochs": len(self.records),
            "wall_time_s": float(sum(r.wall_time_s for r in self.records)),
            "final_total": last.total,
            "final_discriminative": last.discriminative,
            "final_generative": last.generative,
            "final_regularization": last.regularization,
        }


class EvalReport:
    """Verification accuracy and confusion counts at one threshold."""

    def __init__(self, tp, tn, fp, fn, tau):
        self.tp = int(tp)
        self.tn = int(tn)
        self.fp = int(fp)
        self.fn = int(fn)
        self.tau = float(tau)
        self.curve = None

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def as_dict(self):
        out = {
            "accuracy": self.accuracy,
            "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
            "tau": self.tau, "pairs": self.total,
        }
        if self.curve is not None:
            out["tau_curve"] = [{"tau": float(t), "accuracy": float(a)} for t, a in self.curve]
        return out


def train(model, manifest, samples, out_dir=None, checkpoint_interval=0, optimizer=None):
    """Run the full training schedule; returns (model, TrainTrace).

    Per epoch: reshuffle, batch, forward both branches, accumulate gradients,
    one optimizer step per batch. When the generative path is off, unlabeled
    pairs are dropped up front — they would contribute nothing, and removing
    them keeps the run identical to one that never had them.
    """
    hp = model.hp
    if not model.generative_active:
        manifest = manifest.labeled_only()
    if len(manifest) == 0:
        raise DataFormatError("manifest has no usable pairs for this variant")
    optimizer = optimizer or RmsProp(lr=hp.lr)
    dropout_rng = derive_rng(hp.seed, "dropout")
    trace = TrainTrace()
    for epoch in range(hp.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        pair_count = 0
        labeled_count = 0
        for b, batch in enumerate(batches(manifest, samples, hp.batch_size, hp.seed, epoch)):
            try:
                report = model.forward_backward(batch, dropout_rng)
            except TrainingDivergedError as exc:
                wrapped = TrainingDivergedError(f"epoch {epoch}, batch {b}: {exc}")
                wrapped.trace = trace
                raise wrapped from exc
            optimizer.step(model.named_params(trainable_only=True),
                           model.named_grads(trainable_only=True))
            m = len(batch)
            sums += m * np.array([report.total, report.discriminative,
                                  report.generative, report.regularization])
            pair_count += m
            labeled_count += int(batch.labeled_mask.sum())
        record = EpochRecord(epoch, *(sums / pair_count), labeled_count,
                             time.perf_counter() - t0)
        trace.add(record)
        log.info("epoch %d/%d total=%.5f disc=%.5f gen=%.5f reg=%.5f (%.1fs)",
                 epoch + 1, hp.epochs, record.total, record.discriminative,
                 record.generative, record.regularization, record.wall_time_s)
        if (out_dir and checkpoint_interval > 0
                and (epoch + 1) % checkpoint_interval == 0 and epoch + 1 < hp.epochs):
            save_checkpoint(model, os.path.join(out_dir, f"epoch_{epoch + 1:04d}.ckpt"),
                            optimizer_state=optimizer.state())
    return model, trace


def pair_distances(model, manifest, samples, chunk=512):
    """Eval-mode embedding distances for every manifest pair, in manifest order."""
    n = len(manifest)
    if n and max(int(manifest.idx1.max()), int(manifest.idx2.max())) >= len(samples):
        raise DataFormatError("manifest references samples beyond the set")
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        sel = slice(start, min(start + chunk, n))
        e1 = model.embed(samples.images[manifest.idx1[sel]])
        e2 = model.embed(samples.images[manifest.idx2[sel]])
        out[sel] = model.distance(e1, e2)
    return out


def evaluate(model, manifest, samples, tau=None):
    """Verify every test pair at threshold tau and report accuracy + confusion counts."""
    if np.any(manifest.rel == UNL):
        raise DataFormatError("evaluation requires fully labeled pairs")
    tau = model.hp.tau if tau is None else float(tau)
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    d = pair_distances(model, manifest, samples)
    predicted_pos = d <= tau
    actual_pos = manifest.rel == POS
    tp = int(np.sum(predicted_pos & actual_pos))
    tn = int(np.sum(~predicted_pos & ~actual_pos))
    fp = int(np.sum(predicted_pos & ~actual_pos))
    fn = int(np.sum(~predicted_pos & actual_pos))
    return EvalReport(tp, tn, fp, fn, tau)


def accuracy_at(d, rel, tau):
    predicted_pos = d <= tau
    actual_pos = rel == POS
    return float(np.mean(predicted_pos == actual_pos))


def calibrate_tau(model, manifest, samples, grid):
    """Pick the grid threshold with the best validation accuracy (ties: smallest)."""
    grid = sorted(float(t) for t in grid)
    if not grid:
        raise ConfigError("tau grid must be non-empty")
    if np.any(manifest.rel == UNL):
        raise DataFormatError("tau calibration requires fully labeled pairs")
    d = pair_distances(model, manifest, samples)
    best_tau, best_acc = None, -1.0
    for tau in grid:
        acc = accuracy_at(d, manifest.rel, tau)
        if acc > best_acc:
            best_tau, best_acc = tau, acc
    return float(best_tau)


def train_and_evaluate(hp, manifest, samples, test_manifest, test_samples, arch_cfg=None):
    """Fresh model for ``hp``, trained and scored; returns (model, trace, report)."""
    model = SevenModel(arch_from_config(hp, arch_cfg), hp)
    model, trace = train(model, manifest, samples)
    report = evaluate(model, test_manifest, test_samples)
    return model, trace, report


def _sweep_worker(args):
    hp_dict, alpha, manifest, samples, test_manifest, test_samples, arch_cfg = args
    hp = HyperParams.from_dict({**hp_dict, "alpha": alpha})
    _, _, report = train_and_evaluate(hp, manifest, samples, test_manifest, test_samples,
                                      arch_cfg)
    return alpha, report.accuracy


def sweep_alpha(base_hp, alphas, manifest, samples, test_manifest, test_samples,
                arch_cfg=None, processes=1):
    """Independent train+evaluate per alpha, shared seed and splits.

    Returns rows (alpha, accuracy, labeled_pair_count). With ``processes > 1``
    the runs fan out across worker processes; results keep the input order.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ConfigError("alpha sweep needs at least one value")
    labeled = int(np.sum(manifest.rel != UNL))
    jobs = [(base_hp.to_dict(), a, manifest, samples, test_manifest, test_samples, arch_cfg)
            for a in alphas]
    if processes > 1:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(job) for job in jobs]
    return [(alpha, acc, labeled) for alpha, acc in results]


def ablate(base_hp, variants, manifest, samples, test_manifest, test_samples, arch_cfg=None):
    """Train each variant with shared seed/splits; returns rows (variant, accuracy)."""
    if not variants:
        raise ConfigError("ablation needs at least one variant")
    rows = []
    for variant in variants:
        hp = dataclasses.replace(base_hp, variant=variant)
        _, _, report = train_and_evaluate(hp, manifest, samples, test_manifest, test_samples,
                                          arch_cfg)
        rows.append((hp.variant, report.accuracy))
    return rows
