"""Training: bias-corrected AMSGrad, the step-decay schedule, the training
loop with deterministic shuffling and NaN-abort, model evaluation, k-fold
cross-validation, and the ablation runner (backbone grid and attention
reduction-ratio sweep).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import network as N
from .blocks import UnitKind, UpsamplerKind
from .data import SegmentationSample, split_folds
from .losses import LossConfig, combined_loss
from .metrics import aggregate, evaluate_masks, binarize
from .substrate import NonFiniteError, Tensor4


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """Per-parameter AMSGrad buffers, keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    vhat_max: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        for p in params:
            state.m[p.name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[p.name] = np.zeros_like(p.data, dtype=np.float64)
            state.vhat_max[p.name] = np.zeros_like(p.data, dtype=np.float64)
        return state


def amsgrad_step(params, grads, state: OptimState, lr):
    """One bias-corrected AMSGrad update, in place on the parameter data.

    m <- b1*m + (1-b1)*g            mhat = m / (1 - b1^t)
    v <- b2*v + (1-b2)*g^2          vhat = v / (1 - b2^t)
    vhat_max <- max(vhat_max, vhat)
    theta <- theta - lr * mhat / (sqrt(vhat_max) + eps)

    Buffers are float64 regardless of the parameter dtype. A non-finite
    gradient aborts before touching any parameter.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g in zip(params, grads):
        if g is None:
            continue
        g64 = np.asarray(g, dtype=np.float64)
        m = state.m[p.name] = b1 * state.m[p.name] + (1.0 - b1) * g64
        v = state.v[p.name] = b2 * state.v[p.name] + (1.0 - b2) * (g64 * g64)
        vhat = v / bc2
        vmax = state.vhat_max[p.name] = np.maximum(state.vhat_max[p.name], vhat)
        update = lr * (m / bc1) / (np.sqrt(vmax) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant step decay: spans[i] epochs at rates[i]."""

    spans: tuple = (40, 30, 30, 20)
    rates: tuple = (1e-4, 5e-5, 1e-5, 1e-6)

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(int(s) for s in self.spans))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.spans) != len(self.rates) or not self.spans:
            raise ValueError("schedule needs matching non-empty spans and rates")
        if any(s <= 0 for s in self.spans):
            raise ValueError(f"spans must be positive, got {self.spans}")
        if any(r <= 0 for r in self.rates):
            raise ValueError(f"rates must be positive, got {self.rates}")
        if any(b < a for a, b in zip(self.rates[1:], self.rates[:-1])):
            raise ValueError(f"rates must be non-increasing, got {self.rates}")

    @property
    def total_epochs(self):
        return sum(self.spans)

    def breakpoints(self):
        acc, out = 0, []
        for s in self.spans[:-1]:
            acc += s
            out.append(acc)
        return out


def lr_at(schedule: Schedule, epoch):
    """Learning rate for a 0-based epoch index."""
    if epoch < 0 or epoch >= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {schedule.total_epochs} epochs")
    acc = 0
    for span, rate in zip(schedule.spans, schedule.rates):
        acc += span
        if epoch < acc:
            return rate
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 4
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0          # epochs; 0 disables periodic saves
    checkpoint_dir: Optional[str] = None
    init_from: Optional[str] = None    # checkpoint path for fine-tuning
    threshold: float = 0.5             # binarization threshold for validation

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_dsc: Optional[float] = None


@dataclass
class TrainResult:
    history: list
    aborted: bool = False
    abort_reason: str = ""

    def history_rows(self):
        rows = [["epoch", "lr", "train_loss", "val_dsc"]]
        for h in self.history:
            rows.append([str(h.epoch), repr(h.lr), repr(h.train_loss),
                         "" if h.val_dsc is None else repr(h.val_dsc)])
        return rows


def _stack_batch(samples, dtype):
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask[None].astype(dtype) for s in samples])
    return images, masks


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def train(model: N.Model, dataset: Sequence[SegmentationSample], cfg: TrainConfig,
          val_dataset: Sequence[SegmentationSample] = None, callbacks=None):
    """Train a model in place over the full schedule.

    Shuffling is deterministic: epoch e uses generator seed cfg.seed + e.
    The last partial batch is kept. A non-finite loss or gradient aborts the
    run and restores the last completed epoch's parameters. Callbacks (if
    given) are called as callback(model, epoch_stats) after every epoch.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    np_dtype = np.float32 if model.dtype == "single" else np.float64
    if cfg.init_from:
        N.load_params_into(model, cfg.init_from)
    opt = OptimState.for_params(model.parameters())
    history = []
    callbacks = callbacks or []
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    last_good = _snapshot(model)
    for epoch in range(cfg.schedule.total_epochs):
        lr = lr_at(cfg.schedule, epoch)
        rng = np.random.default_rng(cfg.seed + epoch)
        order = rng.permutation(len(dataset))
        total_loss, total_n = 0.0, 0
        try:
            for batch_idx in _batches(order, cfg.batch_size):
                samples = [dataset[i] for i in batch_idx]
                images, masks = _stack_batch(samples, np_dtype)
                model.zero_grad()
                probs = N.forward(model, images, mode="train")
                loss = combined_loss(probs, Tensor4(masks), cfg.loss)
                value = float(loss.data.reshape(()))
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss became non-finite at epoch {epoch}")
                loss.backward()
                params = model.parameters()
                amsgrad_step(params, [p.grad for p in params], opt, lr)
                total_loss += value * len(samples)
                total_n += len(samples)
        except NonFiniteError as e:
            _restore(model, last_good)
            result = TrainResult(history=history, aborted=True, abort_reason=str(e))
            if ckpt_dir:
                N.save_model(model, ckpt_dir / "last_good.ckpt")
            return result

        stats = EpochStats(epoch=epoch, lr=lr, train_loss=total_loss / total_n)
        if val_dataset:
            records = evaluate_model(model, val_dataset, threshold=cfg.threshold,
                                     batch_size=cfg.batch_size)
            stats.val_dsc = float(np.mean([r.dsc for r in records]))
        history.append(stats)
        last_good = _snapshot(model)
        if ckpt_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            N.save_model(model, ckpt_dir / f"epoch{epoch + 1:04d}.ckpt")
        for cb in callbacks:
            cb(model, stats)
    return TrainResult(history=history)


def _snapshot(model):
    return ({name: p.data.copy() for name, p in model.params.items()},
            {name: st.copy() for name, st in model.bn_states.items()})


def _restore(model, snapshot):
    params, states = snapshot
    for name, p in model.params.items():
        p.data = params[name].copy()
    for name, st in model.bn_states.items():
        st.running_mean = states[name].running_mean.copy()
        st.running_var = states[name].running_var.copy()


def evaluate_model(model: N.Model, dataset: Sequence[SegmentationSample],
                   threshold=0.5, batch_size=4):
    """Eval-mode predictions and per-image metric records for a dataset."""
    np_dtype = np.float32 if model.dtype == "single" else np.float64
    records = []
    for i in range(0, len(dataset), batch_size):
        chunk = list(dataset[i:i + batch_size])
        images, _ = _stack_batch(chunk, np_dtype)
        probs = N.forward(model, images, mode="eval").data[:, 0]
        for sample, prob in zip(chunk, probs):
            pred = binarize(prob, threshold)
            records.append(evaluate_masks(pred, sample.mask, sample.image_id,
                                          tags=sample.metadata))
    return records


def predict_probabilities(model: N.Model, dataset, batch_size=4):
    """Raw eval-mode probability maps, one (S, S) array per sample."""
    np_dtype = np.float32 if model.dtype == "single" else np.float64
    out = []
    for i in range(0, len(dataset), batch_size):
        chunk = list(dataset[i:i + batch_size])
        images, _ = _stack_batch(chunk, np_dtype)
        probs = N.forward(model, images, mode="eval").data[:, 0]
        out.extend(np.asarray(p) for p in probs)
    return out


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CrossvalResult:
    fold_reports: list      # aggregate report per fold (runs as replicates)
    pooled_mean: dict       # metric -> mean over folds and runs of fold-run means
    pooled_sd: dict         # metric -> sample sd over runs of the per-run fold means
    fold_run_means: dict    # (fold, run) -> {metric: mean}


def run_crossval(samples: Sequence[SegmentationSample], k, train_cfg: TrainConfig,
                 model_cfg: N.ModelConfig, runs=3, axes=("overall",)):
    """k-fold cross-validation repeated over `runs` seeds.

    Per fold, a fresh model trains on the other k-1 folds and is scored on
    the held-out fold. The pooled mean of a metric is the plain average of
    the per-(fold, run) means; the pooled sd is the sample standard
    deviation across runs of each run's fold-average.
    """
    ids = [s.image_id for s in samples]
    by_id = {s.image_id: s for s in samples}
    folds = split_folds(ids, k, seed=train_cfg.seed)
    fold_run_records = {}
    for fold_idx, held_out in enumerate(folds):
        train_ids = [i for f in folds for i in f if f is not held_out]
        train_set = [by_id[i] for i in train_ids]
        eval_set = [by_id[i] for i in held_out]
        for run_idx in range(runs):
            mcfg = replace(model_cfg, seed=model_cfg.seed + 1000 * run_idx + fold_idx)
            tcfg = replace(train_cfg, seed=train_cfg.seed + 1000 * run_idx + fold_idx)
            model = N.build(mcfg)
            result = train(model, train_set, tcfg)
            if result.aborted:
                raise RuntimeError(
                    f"fold {fold_idx} run {run_idx} aborted: {result.abort_reason}")
            fold_run_records[(fold_idx, run_idx)] = evaluate_model(
                model, eval_set, threshold=train_cfg.threshold,
                batch_size=train_cfg.batch_size)

    fold_reports = []
    for fold_idx in range(k):
        per_run = [fold_run_records[(fold_idx, r)] for r in range(runs)]
        fold_reports.append(aggregate(per_run, axes=axes))

    metrics = ("dsc", "sen", "delta_a", "hau")
    fold_run_means = {
        key: {m: float(np.mean([rec.value(m) for rec in records])) for m in metrics}
        for key, records in fold_run_records.items()}
    pooled_mean, pooled_sd = {}, {}
    for m in metrics:
        run_avgs = [float(np.mean([fold_run_means[(f, r)][m] for f in range(k)]))
                    for r in range(runs)]
        pooled_mean[m] = float(np.mean(run_avgs))
        pooled_sd[m] = float(np.std(run_avgs, ddof=1)) if runs > 1 else 0.0
    return CrossvalResult(fold_reports=fold_reports, pooled_mean=pooled_mean,
                          pooled_sd=pooled_sd, fold_run_means=fold_run_means)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_HEADER = ("model,dsc_mean,dsc_sd,sen_mean,sen_sd,da_mean,da_sd,"
                   "hau_mean,hau_sd")
REDUCTION_SWEEP = (2, 4, 8, 16, 32)


@dataclass
class AblationRow:
    label: str
    status: str = "ok"      # "ok" | "failed"
    means: dict = field(default_factory=dict)
    sds: dict = field(default_factory=dict)
    error: str = ""


@dataclass
class AblationTable:
    grid: str
    rows: list

    def to_csv_lines(self):
        lines = [ABLATION_HEADER]
        for row in self.rows:
            if row.status == "ok":
                cells = [row.label]
                for m in ("dsc", "sen", "delta_a", "hau"):
                    cells.append(repr(row.means[m]))
                    cells.append(repr(row.sds[m]))
                lines.append(",".join(cells))
            else:
                lines.append(",".join([row.label] + [""] * 8))
        return lines

    def to_json(self):
        return {
            "grid": self.grid,
            "rows": [{"model": r.label, "status": r.status, "means": r.means,
                      "sds": r.sds, "error": r.error} for r in self.rows],
        }


def backbone_grid():
    """The 9 encoder/decoder combinations, plain fusion, baseline first."""
    kinds = (UnitKind.BASIC, UnitKind.DEEP, UnitKind.RES)
    combos = []
    for enc in kinds:
        for dec in kinds:
            combos.append((enc, dec))
    return combos


def grid_label(enc: UnitKind, dec: UnitKind):
    if enc is UnitKind.BASIC and dec is UnitKind.BASIC:
        return "UNet (Basic-Basic)"
    return f"{enc.value.capitalize()}-{dec.value.capitalize()}-UNet"


def _ablation_cell(args):
    """Train/evaluate one grid cell for `runs` seeds; returns per-run means."""
    (model_cfg_dict, train_cfg, train_set, eval_set, runs) = args
    metrics = ("dsc", "sen", "delta_a", "hau")
    per_run = []
    for run_idx in range(runs):
        mcfg = N.ModelConfig.from_dict(model_cfg_dict)
        mcfg = replace(mcfg, seed=mcfg.seed + 101 * run_idx)
        tcfg = replace(train_cfg, seed=train_cfg.seed + 101 * run_idx)
        model = N.build(mcfg)
        result = train(model, train_set, tcfg)
        if result.aborted:
            raise RuntimeError(f"run {run_idx} aborted: {result.abort_reason}")
        records = evaluate_model(model, eval_set, threshold=train_cfg.threshold,
                                 batch_size=train_cfg.batch_size)
        per_run.append({m: float(np.mean([rec.value(m) for rec in records]))
                        for m in metrics})
    return per_run


def _rows_from_cells(labels, cells, runs):
    metrics = ("dsc", "sen", "delta_a", "hau")
    rows = []
    for label, cell in zip(labels, cells):
        if isinstance(cell, Exception):
            rows.append(AblationRow(label=label, status="failed", error=str(cell)))
            continue
        means = {m: float(np.mean([r[m] for r in cell])) for m in metrics}
        sds = {m: (float(np.std([r[m] for r in cell], ddof=1)) if runs > 1 else 0.0)
               for m in metrics}
        rows.append(AblationRow(label=label, means=means, sds=sds))
    return rows


def run_ablation(grid, samples: Sequence[SegmentationSample], train_cfg: TrainConfig,
                 model_cfg: N.ModelConfig, runs=3, jobs=1, eval_fraction=0.25):
    """Run one ablation table.

    grid = "backbones": the 9 encoder/decoder unit combinations with plain
    fusion, first row the Basic-Basic baseline. grid = "reduction": the
    attention reduction-ratio sweep (2, 4, 8, 16, 32) on the configured
    encoder/decoder with attention-guided fusion. A deterministic
    eval_fraction of the samples is held out for scoring. Rows whose runs
    raise are marked failed; the table is still produced.
    """
    if grid not in ("backbones", "reduction"):
        raise ValueError(f"unknown ablation grid {grid!r}")
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split train/eval")
    ids = sorted(s.image_id for s in samples)
    by_id = {s.image_id: s for s in samples}
    n_eval = max(1, int(round(len(ids) * eval_fraction)))
    rng = np.random.default_rng(train_cfg.seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    eval_ids = set(perm[:n_eval])
    train_set = [by_id[i] for i in perm[n_eval:]]
    eval_set = [by_id[i] for i in sorted(eval_ids)]

    tasks, labels = [], []
    if grid == "backbones":
        variants = [(grid_label(enc, dec),
                     dict(encoder_unit=enc, decoder_unit=dec,
                          upsampler=UpsamplerKind.BU))
                    for enc, dec in backbone_grid()]
    else:
        variants = [(f"r={ratio}",
                     dict(upsampler=UpsamplerKind.AU, reduction_ratio=ratio))
                    for ratio in REDUCTION_SWEEP]
    for label, overrides in variants:
        labels.append(label)
        try:
            cfg = replace(model_cfg, **overrides)
        except ValueError as e:
            # an impossible cell (e.g. a ratio the widths cannot carry) is a
            # failed row, not a reason to lose the rest of the table
            tasks.append(e)
            continue
        tasks.append((cfg.to_dict(), train_cfg, train_set, eval_set, runs))

    cells = [None] * len(tasks)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {}
            for i, t in enumerate(tasks):
                if isinstance(t, Exception):
                    cells[i] = t
                else:
                    futures[i] = pool.submit(_ablation_cell, t)
            for i, fut in futures.items():
                try:
                    cells[i] = fut.result()
                except Exception as e:  # noqa: BLE001 - row marked failed
                    cells[i] = e
    else:
        for i, t in enumerate(tasks):
            if isinstance(t, Exception):
                cells[i] = t
                continue
            try:
                cells[i] = _ablation_cell(t)
            except Exception as e:  # noqa: BLE001 - row marked failed
                cells[i] = e
    return AblationTable(grid=grid, rows=_rows_from_cells(labels, cells, runs))
