"""SGD training loop, evaluation and the overfit smoke check."""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .errors import MissingGradientError, NumericAbort
from .losses import LossBreakdown, LossConfig, combined_loss, soft_dice
from .metrics import AGG_MODES, aggregate, evaluate_pair
from .model import build, predict_mask, small_config

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-8
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    shuffle: bool = True
    include_empty_slices: bool = False
    patience: int | None = 10
    threshold: float = 0.5

    def validate(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.loss.validate()
        return self

    def to_items(self):
        items = {}
        for k, v in asdict(self).items():
            if k == "loss":
                items.update({f"loss.{lk}": repr(lv) for lk, lv in v.items()})
            else:
                items[k] = repr(v) if isinstance(v, float) else str(v)
        return items


@dataclass
class SgdState:
    velocity: dict = field(default_factory=dict)
    step: int = 0


def sgd_step(params, state, cfg):
    """One momentum-SGD update, in place.

    For each parameter ``w`` with gradient ``g``::

        g' = g + weight_decay * w
        v  = momentum * v + g'
        w  = w - lr * v

    Gradients are cleared afterwards.  ``params`` maps names to ``Param``.
    """
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(name)
    dt = None
    for name, p in params.items():
        dt = p.value.dtype.type
        g = p.grad + dt(cfg.weight_decay) * p.value
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.value)
            state.velocity[name] = v
        v *= dt(cfg.momentum)
        v += g
        p.value -= dt(cfg.lr) * v
        p.grad = None
    state.step += 1
    return state


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    val: dict | None
    val_soft_dice: float | None
    wall_time: float
    checkpoint: str | None


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    stopped_early: bool = False

    def losses(self):
        return [(r.epoch, r.loss.focal, r.loss.dice_log, r.loss.bce, r.loss.total) for r in self.records]


@dataclass
class EvalResult:
    rows: list
    summaries: dict
    mean_soft_dice: float
    probs: list | None = None


def _batch_arrays(samples, dtype):
    x = np.stack([s.image for s in samples])[:, None].astype(dtype)
    y = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return x, y


def evaluate(net, dataset, threshold=0.5, batch_size=8, keep_probs=False):
    """Eval-mode forward over ``dataset``; per-slice rows and both aggregations."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("evaluate needs a non-empty dataset")
    rows, sd, probs = [], [], []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        x, y = _batch_arrays(chunk, net.dtype)
        prob, _ = net.forward(x, training=False)
        for k, s in enumerate(chunk):
            rows.append(evaluate_pair(predict_mask(prob[k, 0], threshold), s.mask, s.volume_id, s.slice_index))
            sd.append(soft_dice(prob[k, 0], y[k, 0]))
            if keep_probs:
                probs.append(prob[k, 0].copy())
    summaries = {mode: aggregate(rows, mode) for mode in AGG_MODES}
    return EvalResult(rows, summaries, math.fsum(sd) / len(sd), probs if keep_probs else None)


def _state_items(epoch, state, best, stale):
    return {
        "train.epoch": str(epoch),
        "sgd.step": str(state.step),
        "train.best_val": repr(best),
        "train.stale_epochs": str(stale),
    }


def save_training_checkpoint(net, state, path, epoch, best=-math.inf, stale=0, train_cfg=None):
    items = _state_items(epoch, state, best, stale)
    if train_cfg is not None:
        items.update({f"train_cfg.{k}": v for k, v in train_cfg.to_items().items()})
    arrays = {f"sgd.velocity.{k}": v for k, v in state.velocity.items()}
    ckpt.save_weights(net, path, items, arrays)


def load_training_checkpoint(path, config=None):
    """Returns ``(net, SgdState, epoch, best_val, stale_epochs)``."""
    items, arrays = ckpt.read_checkpoint(path)
    net = ckpt.net_from_checkpoint(items, arrays, config, str(path))
    vel = {k[len("sgd.velocity."):]: v.copy() for k, v in arrays.items() if k.startswith("sgd.velocity.")}
    state = SgdState(vel, int(items.get("sgd.step", 0)))
    return net, state, int(items.get("train.epoch", 0)), float(items.get("train.best_val", "-inf")), \
        int(items.get("train.stale_epochs", 0))


HISTORY_COLUMNS = [
    "epoch", "focal", "dice_log", "bce", "total", "val_dsc_modeA", "val_dsc_modeB",
    "val_iou_modeA", "val_iou_modeB", "val_hd_modeA", "val_hd_modeB", "val_soft_dice",
    "wall_time", "checkpoint",
]


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in history.records:
            a = r.val["exclude_undefined"].means if r.val else {}
            b = r.val["count_empty_match_as_one"].means if r.val else {}
            w.writerow([
                r.epoch, _fmt(r.loss.focal), _fmt(r.loss.dice_log), _fmt(r.loss.bce), _fmt(r.loss.total),
                _fmt(a.get("dsc")), _fmt(b.get("dsc")), _fmt(a.get("iou")), _fmt(b.get("iou")),
                _fmt(a.get("hd")), _fmt(b.get("hd")), _fmt(r.val_soft_dice), f"{r.wall_time:.3f}",
                r.checkpoint or "",
            ])


def write_manifest(path, sections):
    with open(path, "w", encoding="utf-8") as fh:
        for title, items in sections:
            fh.write(f"# {title}\n")
            for k, v in items.items():
                fh.write(f"{k} = {v}\n")


def _diagnostic(epoch, step, batch, breakdown):
    ids = ", ".join(f"{s.volume_id}:{s.slice_index}" for s in batch)
    return (
        f"non-finite loss at epoch {epoch}, optimizer step {step}\n"
        f"batch: {ids}\n"
        f"focal={breakdown.focal!r} dice_log={breakdown.dice_log!r} bce={breakdown.bce!r} total={breakdown.total!r}\n"
    )


def train(net, train_set, val_set=None, cfg=None, out_dir=None, resume_from=None):
    """Train ``net`` in place and return a :class:`RunHistory`.

    Each epoch shuffles with a generator seeded by ``(seed, epoch)``, so a
    run resumed from the epoch-``k`` checkpoint replays epochs ``k+1..``
    exactly.  With ``out_dir`` set, a config manifest, one checkpoint per
    epoch and ``history.csv`` are written there.
    """
    cfg = (cfg or TrainConfig()).validate()
    samples = [s for s in train_set if cfg.include_empty_slices or s.mask.any()]
    if not samples:
        raise ValueError("training set is empty")
    val_set = list(val_set or [])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state, start, best, stale = SgdState(), 1, -math.inf, 0
    if resume_from is not None:
        loaded, state, last, best, stale = load_training_checkpoint(resume_from, net.config)
        for name, arr in loaded.state_arrays().items():
            target = net.params[name].value if name in net.params else net.buffers[name]
            target[...] = arr
        start = last + 1
    if out is not None:
        write_manifest(out / "manifest.txt", [
            ("model", net.config.to_items()),
            ("train", cfg.to_items()),
            ("run", {"n_train": len(samples), "n_val": len(val_set),
                     "resume_from": str(resume_from) if resume_from else ""}),
        ])

    history = RunHistory()
    net.zero_grad()
    for epoch in range(start, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(samples)) if cfg.shuffle else np.arange(len(samples))
        sums = np.zeros(4)
        seen = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[b0 : b0 + cfg.batch_size]]
            if len(batch) < 2:
                log.warning("skipping a batch of one sample (batch-norm needs at least two)")
                continue
            x, y = _batch_arrays(batch, net.dtype)
            prob, _ = net.forward(x, training=True)
            breakdown, grad = combined_loss(prob, y, cfg.loss)
            if not math.isfinite(breakdown.total):
                diag = _diagnostic(epoch, state.step, batch, breakdown)
                if out is not None:
                    (out / "abort.txt").write_text(diag, encoding="utf-8")
                raise NumericAbort("training aborted: non-finite loss", diag)
            net.backward(grad)
            sgd_step(net.params, state, cfg)
            sums += len(batch) * np.array([breakdown.focal, breakdown.dice_log, breakdown.bce, breakdown.total])
            seen += len(batch)
        means = sums / max(seen, 1)
        mean_loss = LossBreakdown(*(float(v) for v in means), n_pixels=int(np.prod(samples[0].image.shape)))

        val, val_sd = None, None
        if val_set:
            res = evaluate(net, val_set, cfg.threshold, cfg.batch_size)
            val, val_sd = res.summaries, res.mean_soft_dice
            if val_sd > best:
                best, stale = val_sd, 0
            else:
                stale += 1

        path = None
        if out is not None:
            path = str(out / f"epoch_{epoch:03d}.vcaw")
            save_training_checkpoint(net, state, path, epoch, best, stale, cfg)
        history.records.append(EpochRecord(epoch, mean_loss, val, val_sd, time.perf_counter() - t0, path))
        if out is not None:
            write_history_csv(history, out / "history.csv")
        log.info("epoch %d loss %.5f val soft-dice %s", epoch, mean_loss.total, val_sd)
        if cfg.patience is not None and val_set and stale >= cfg.patience:
            history.stopped_early = True
            break
    return history


# --------------------------------------------------------------------------


@dataclass
class SmokeResult:
    passed: bool
    curve: list
    steps: int
    final_soft_dice: float


def _mean_soft_dice(prob, y, eps_dice):
    return math.fsum(soft_dice(prob[k, 0], y[k, 0], eps_dice) for k in range(len(prob))) / len(prob)


def overfit_smoke(model_cfg=None, n=4, max_steps=500, lr=0.001, momentum=0.9, weight_decay=1e-8,
                  seed=0, randomize_labels=False, threshold=0.95, check_every=10, loss_cfg=None):
    """Can the network memorise ``n`` synthetic lesion slices?

    Trains on one fixed batch for up to ``max_steps`` SGD steps and passes
    once the eval-mode mean soft dice against the true masks exceeds
    ``threshold``.  With ``randomize_labels`` the optimiser sees fresh random
    masks each step, which should never pass.
    """
    from .data.synth import synth_generate

    model_cfg = model_cfg or small_config(seed=seed)
    loss_cfg = loss_cfg or LossConfig()
    net = build(model_cfg)
    samples = synth_generate(n, lesion_prob=1.0, seed=seed, shape=model_cfg.input_hw)
    x, y = _batch_arrays(samples, net.dtype)
    cfg = TrainConfig(lr=lr, momentum=momentum, weight_decay=weight_decay, batch_size=n, epochs=1, seed=seed)
    state = SgdState()
    label_rng = np.random.default_rng([seed, 1])
    frac = float(y.mean())
    curve = []
    score = 0.0
    for step in range(1, max_steps + 1):
        target = (label_rng.random(y.shape) < frac).astype(y.dtype) if randomize_labels else y
        prob, _ = net.forward(x, training=True)
        _, grad = combined_loss(prob, target, loss_cfg)
        net.backward(grad)
        sgd_step(net.params, state, cfg)
        if step % check_every == 0 or step == max_steps:
            score = _mean_soft_dice(net.forward(x, training=False)[0], y, loss_cfg.eps_dice)
            curve.append((step, score))
            if score > threshold:
                return SmokeResult(True, curve, step, score)
    return SmokeResult(False, curve, max_steps, score)
