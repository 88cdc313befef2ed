"""Training protocol: seeded batches, augmentation, momentum SGD, best-model selection."""
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from scan2num import checkpoint, nn
from scan2num.data import TARGETS, augment, split_entries
from scan2num.errors import DataError, NumericalError
from scan2num.inference import predict_cases, prepare_entries
from scan2num.model import NetworkConfig, Scan2NumNet
from scan2num.seeding import derive_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    target: str = "ve"
    batch_size: int = 16
    base_lr: float = 0.005
    max_iter: int = 100_000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    dropout: float = 0.5
    val_every: int = 500
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: bool = True
    mirror_prob: float = 0.5
    max_rotation_deg: float = 45.0
    deterministic: bool = True
    threads: int = 1
    # regress (y - mean) / sd of the train split, folded back into fc6 on output
    standardize_target: bool = False

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        for name in ("batch_size", "val_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_iter < 0 or self.base_lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("max_iter, base_lr, momentum and weight_decay must be non-negative")
        if self.network.dropout_rate != self.dropout:
            object.__setattr__(self, "network", replace(self.network, dropout_rate=self.dropout))

    def hyperparameters(self):
        return {
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "lr_decay": "linear",
            "max_iter": self.max_iter,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "dropout": self.dropout,
            "val_every": self.val_every,
        }

    def to_meta(self):
        out = {f"train.{k}": str(v) for k, v in asdict(self).items() if k != "network"}
        out.update(self.network.to_meta())
        return out


@dataclass
class TrainState:
    net: Scan2NumNet
    iter: int = 0
    best_val_loss: float = math.inf
    best_iter: int = -1
    best_tensors: dict = None
    history: list = field(default_factory=list)   # (iter, lr, train_loss, val_loss | None)
    target_shift: float = 0.0
    target_scale: float = 1.0

    def output_net(self, net=None):
        """``net`` (default: the current one) mapped back to target units."""
        return (net or self.net).with_output_affine(self.target_scale, self.target_shift)

    def best_net(self):
        if self.best_tensors is None:
            return self.output_net()
        return self.output_net(Scan2NumNet.from_tensors(self.net.config, self.best_tensors))


def validate(net, cases_or_stacks, targets=None):
    """Mean per-case L2 loss (1/2)(pred - target)^2, deterministic inference."""
    if len(cases_or_stacks) == 0:
        raise DataError("validation split is empty")
    if targets is None:
        cases = cases_or_stacks
        preds, _ = predict_cases(net, cases)
        targets = np.array([c.target for c in cases])
    else:
        preds = _predict_stacks(net, cases_or_stacks)
    diff = preds - np.asarray(targets, dtype=np.float64)
    return float(np.mean(0.5 * diff * diff))


def _predict_stacks(net, stacks, chunk=16):
    out = [net.forward(stacks[i:i + chunk], training=False)[0] for i in range(0, len(stacks), chunk)]
    return np.concatenate(out).astype(np.float64)


def _training_stack(case, cfg, seed, it, pos):
    rng = derive_rng(seed, "case", it, pos)
    net = cfg.network
    stack = case.stack(net.num_slices, net.input_size, offset=rng.random())
    if cfg.augment:
        stack = augment(stack, rng, cfg.mirror_prob, cfg.max_rotation_deg)
    return stack.slices


def _write_log(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "lr", "train_loss", "val_loss"])
        for it, lr, tl, vl in history:
            w.writerow([it, repr(lr), repr(tl), "" if vl is None else repr(vl)])


def read_log(path):
    history = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vl = row["val_loss"]
            history.append((int(row["iter"]), float(row["lr"]), float(row["train_loss"]),
                            float(vl) if vl else None))
    return history


def save_state(path, state, config):
    extra = {"best." + k: v for k, v in (state.best_tensors or {}).items()}
    meta = {
        **config.to_meta(),
        "meta.target": config.target,
        "state.iter": str(state.iter),
        "state.best_val_loss": repr(state.best_val_loss),
        "state.best_iter": str(state.best_iter),
        "state.target_shift": repr(state.target_shift),
        "state.target_scale": repr(state.target_scale),
    }
    state.net.save(path, meta, extra)


def load_state(out_dir):
    """Rebuild a :class:`TrainState` from ``last.ckpt`` and ``train_log.csv``."""
    tensors, meta = checkpoint.load(os.path.join(out_dir, "last.ckpt"))
    config = NetworkConfig.from_meta(meta)
    net = Scan2NumNet.from_tensors(config, tensors)
    best = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")}
    history = read_log(os.path.join(out_dir, "train_log.csv"))
    it = int(meta["state.iter"])
    return TrainState(net, it, float(meta["state.best_val_loss"]), int(meta["state.best_iter"]),
                      best or None, [h for h in history if h[0] <= it],
                      float(meta.get("state.target_shift", 0.0)), float(meta.get("state.target_scale", 1.0)))


def _save_best(path, net, config, it, val):
    net.save(path, {"meta.target": config.target, "meta.iter": str(it), "meta.val_loss": repr(val)})


@dataclass
class TrainResult:
    net: Scan2NumNet            # parameters of the best validation iteration
    state: TrainState


def train(entries, config, out_dir=None, state=None):
    """Run (or continue) the training protocol on a manifest.

    Randomness for iteration ``t`` comes only from ``(seed, t)`` and the
    batch position, so a resumed run replays an uninterrupted one bitwise.
    Validation runs after every ``val_every`` iterations and after the last
    one; the lowest validation loss (earliest on ties) is kept as best.
    """
    train_cases = prepare_entries(split_entries(entries, "train"), config.target)
    valid_cases = prepare_entries(split_entries(entries, "valid"), config.target)
    if not train_cases or not valid_cases:
        raise DataError("manifest needs nonempty train and valid splits")
    ncfg = config.network
    if state is None:
        state = TrainState(Scan2NumNet(ncfg, rng=derive_rng(config.seed, "init")))
    raw = np.array([c.target for c in train_cases], dtype=np.float64)
    if config.standardize_target:
        state.target_shift, state.target_scale = float(raw.mean()), float(raw.std()) or 1.0
    shift, scale = state.target_shift, state.target_scale
    net = state.net
    params = list(net.params.values())
    val_stacks = np.stack([c.stack(ncfg.num_slices, ncfg.input_size).slices for c in valid_cases])
    val_targets = (np.array([c.target for c in valid_cases]) - shift) / scale
    train_targets = ((raw - shift) / scale).astype(np.float32)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    pool = None if config.deterministic or config.threads <= 1 else ThreadPoolExecutor(config.threads)
    try:
        for t in range(state.iter, config.max_iter):
            lr = nn.lr_schedule(t, config.base_lr, config.max_iter)
            picks = derive_rng(config.seed, "batch", t).integers(0, len(train_cases), config.batch_size)
            jobs = [(train_cases[i], config, config.seed, t, pos) for pos, i in enumerate(picks)]
            if pool is None:
                slices = [_training_stack(*j) for j in jobs]
            else:
                slices = list(pool.map(lambda j: _training_stack(*j), jobs))
            scores, _ = net.forward(np.stack(slices), training=True,
                                    rng=derive_rng(config.seed, "dropout", t))
            loss, dscore = nn.l2_loss(scores, train_targets[picks])
            loss *= scale * scale   # report in target units
            try:
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite training loss at iteration {t}")
                net.backward(dscore)
                nn.sgd_step(params, lr, config.momentum, config.weight_decay)
            except NumericalError:
                if out_dir:
                    save_state(os.path.join(out_dir, "diverged.ckpt"), state, config)
                    _write_log(os.path.join(out_dir, "train_log.csv"), state.history)
                raise
            state.iter = t + 1
            val = None
            if state.iter % config.val_every == 0 or state.iter == config.max_iter:
                val = validate(net, val_stacks, val_targets) * scale * scale
                log.info("iter %d lr %.6g train %.6g val %.6g", state.iter, lr, loss, val)
                if val < state.best_val_loss:
                    state.best_val_loss, state.best_iter = val, state.iter
                    state.best_tensors = {k: v.value.copy() for k, v in net.params.items()}
                    if out_dir:
                        _save_best(os.path.join(out_dir, "best.ckpt"), state.output_net(), config,
                                   state.iter, val)
            state.history.append((state.iter, lr, loss, val))
            if val is not None and out_dir:
                save_state(os.path.join(out_dir, "last.ckpt"), state, config)
                _write_log(os.path.join(out_dir, "train_log.csv"), state.history)
    finally:
        if pool is not None:
            pool.shutdown()
    if out_dir:
        save_state(os.path.join(out_dir, "last.ckpt"), state, config)
        _write_log(os.path.join(out_dir, "train_log.csv"), state.history)
        if state.best_tensors is None:
            _save_best(os.path.join(out_dir, "best.ckpt"), state.output_net(), config, state.iter, math.nan)
    return TrainResult(state.best_net(), state)


def slice_count_experiment(entries, config, counts, resamples=10_000, out_path=None):
    """Train one model per slice count and report test-split Spearman with CI."""
    from scan2num.evaluation import bootstrap_ci, spearman

    test_cases = prepare_entries(split_entries(entries, "test"), config.target)
    rows = []
    for n in counts:
        if n < 1:
            raise ValueError("slice counts must be >= 1")
        cfg = replace(config, network=replace(config.network, num_slices=int(n)))
        result = train(entries, cfg)
        preds, _ = predict_cases(result.net, test_cases)
        targets = np.array([c.target for c in test_cases])
        rho = spearman(targets, preds)
        lo, hi = bootstrap_ci(targets, preds, spearman, resamples, derive_rng(config.seed, "slice-ci", n))
        rows.append({"num_slices": int(n), "rho": rho, "ci_lo": lo, "ci_hi": hi})
    if out_path:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["num_slices", "rho", "ci_lo", "ci_hi"])
            for r in rows:
                w.writerow([r["num_slices"], f"{r['rho']:.4f}", f"{r['ci_lo']:.4f}", f"{r['ci_hi']:.4f}"])
    return rows
