"""Training loop (Adam, plateau lr halving, early stopping), prediction and
evaluation drivers, and the flat key=value run config."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .correlation import correlation_loss
from .errors import CheckpointMismatchError, ConfigError, DivergenceError, ShapeMismatchError
from .losses import dice_loss, one_hot, total_loss
from .metrics import MetricsReport
from .network import CorrSegNet, NetworkConfig
from .volume_io import LabelVolume, MultiModalCase, decode_labels

log = logging.getLogger(__name__)

EARLY_STOP = "EARLY_STOP"
MAX_EPOCHS = "MAX_EPOCHS"
CALLBACK_STOP = "CALLBACK"


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_factor: float = 0.5
    lr_patience: int = 10
    early_stop_patience: int = 50
    min_delta: float = 1e-4
    max_epochs: int = 300
    batch_size: int = 1
    seed: int = 0
    use_fusion: bool = True
    use_correlation: bool = True
    lambda_corr: float = 0.1
    include_background: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


class PlateauSchedule:
    """Tracks validation loss; halves the lr after ``lr_patience`` stagnant
    epochs and signals a stop after ``stop_patience`` stagnant epochs.

    An epoch improves when its loss is below the best so far by more than
    ``min_delta``.
    """

    def __init__(self, lr: float, factor: float = 0.5, lr_patience: int = 10,
                 stop_patience: int = 50, min_delta: float = 1e-4):
        self.initial_lr = lr
        self.lr = lr
        self.factor = factor
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self.since_improvement = 0
        self._lr_wait = 0
        self.decays = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.since_improvement = 0
            self._lr_wait = 0
            return True, False
        self.since_improvement += 1
        self._lr_wait += 1
        if self._lr_wait >= self.lr_patience:
            self.lr *= self.factor
            self.decays += 1
            self._lr_wait = 0
        return False, self.since_improvement >= self.stop_patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dice_component: float
    corr_component: float
    val_loss: float
    lr: float


@dataclass
class TrainState:
    epoch: int = 0
    current_lr: float = 5e-4
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    stop_reason: str | None = None
    best_epoch: int = 0


@dataclass
class TrainResult:
    model: CorrSegNet
    best_model: CorrSegNet
    state: TrainState
    checkpoint_path: Path | None = None

    @property
    def history(self):
        return self.state.history


def cases_to_tensors(cases: Sequence[MultiModalCase]):
    x = torch.from_numpy(np.stack([c.stack(np.float32) for c in cases]))
    y = None
    if all(c.labels is not None for c in cases):
        y = torch.from_numpy(np.stack([c.labels.classes for c in cases]).astype(np.int64))
    return x, y


def batch_loss(model: CorrSegNet, x, y, cfg: TrainConfig):
    logits, z, f = model(x)
    probs = torch.softmax(logits, dim=1)
    d = dice_loss(probs, one_hot(y, model.config.n_classes).to(probs.dtype),
                  include_background=cfg.include_background)
    if cfg.use_correlation and f:
        c = correlation_loss(z, f, model.config.pairing())
    else:
        c = torch.zeros((), dtype=d.dtype)
    lam = cfg.lambda_corr if cfg.use_correlation else 0.0
    return total_loss(d, c, lam), d, c


def validation_loss(model, x, y, cfg: TrainConfig) -> float:
    total = 0.0
    with torch.no_grad():
        for k in range(x.shape[0]):
            loss, _, _ = batch_loss(model, x[k:k + 1], y[k:k + 1], cfg)
            total += float(loss)
    return total / x.shape[0]


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "dice_component", "corr_component", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.dice_component),
                        repr(r.corr_component), repr(r.val_loss), repr(r.lr)])


def train(train_cases: Sequence[MultiModalCase], val_cases: Sequence[MultiModalCase],
          net_config: NetworkConfig, cfg: TrainConfig, out_dir=None,
          val_loss_fn: Callable[[CorrSegNet, int], float] | None = None,
          callback: Callable[[CorrSegNet, EpochRecord], bool] | None = None) -> TrainResult:
    """Train a fresh model.

    ``val_loss_fn(model, epoch)`` replaces the validation loss computation
    (used to drive the schedule in harness tests). ``callback`` runs after each
    epoch and may return True to stop. When ``out_dir`` is given the best-val
    checkpoint and the history CSV are written there.
    """
    if not train_cases:
        raise ConfigError("empty training set")
    net_config = copy.deepcopy(net_config)
    net_config.use_fusion = cfg.use_fusion
    net_config.use_correlation = cfg.use_correlation
    net_config.lambda_corr = cfg.lambda_corr
    net_config.validate()

    x_train, y_train = cases_to_tensors(train_cases)
    if y_train is None:
        raise ConfigError("training cases need labels")
    if val_cases:
        x_val, y_val = cases_to_tensors(val_cases)
    else:
        x_val, y_val = x_train, y_train
    if y_val is None and val_loss_fn is None:
        raise ConfigError("validation cases need labels")

    torch.manual_seed(cfg.seed)
    model = CorrSegNet.build(net_config, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                           eps=cfg.adam_eps)
    schedule = PlateauSchedule(cfg.lr, cfg.lr_decay_factor, cfg.lr_patience,
                               cfg.early_stop_patience, cfg.min_delta)
    state = TrainState(current_lr=cfg.lr)
    order_rng = np.random.default_rng(cfg.seed)
    best_state = copy.deepcopy(model.state_dict())
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.mmck"

    n = x_train.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        lr_used = schedule.lr
        for group in opt.param_groups:
            group["lr"] = lr_used
        model.train()
        order = order_rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            loss, d, c = batch_loss(model, x_train[idx], y_train[idx], cfg)
            if not torch.isfinite(loss):
                bad = loss.item()
                raise DivergenceError(f"non-finite loss {bad} at epoch {epoch}",
                                      epoch=epoch, loss=bad)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([loss.item(), d.item(), c.item()])
        sums /= n
        model.eval()
        if val_loss_fn is not None:
            val = float(val_loss_fn(model, epoch))
        else:
            val = validation_loss(model, x_val, y_val, cfg)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}",
                                  epoch=epoch, loss=val)
        record = EpochRecord(epoch, float(sums[0]), float(sums[1]), float(sums[2]), val, lr_used)
        state.history.append(record)
        improved, stop = schedule.update(val)
        state.current_lr = schedule.lr
        state.best_val_loss = schedule.best
        state.epochs_since_improvement = schedule.since_improvement
        log.info("epoch %d loss %.5f dice %.5f corr %.5f val %.5f lr %.2e",
                 epoch, *sums, val, lr_used)
        if improved:
            state.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model, {"epoch": epoch, "val_loss": val})
        if stop:
            state.stop_reason = EARLY_STOP
            break
        if callback is not None and callback(model, record):
            state.stop_reason = CALLBACK_STOP
            break
    else:
        state.stop_reason = MAX_EPOCHS

    best_model = CorrSegNet(net_config)
    best_model.load_state_dict(best_state)
    best_model.eval()
    if out_dir is not None:
        write_history(out_dir / "history.csv", state.history)
    return TrainResult(model, best_model, state, ckpt_path)


# --- inference ------------------------------------------------------------

def _resolve_model(model_or_path) -> CorrSegNet:
    if isinstance(model_or_path, CorrSegNet):
        return model_or_path
    model, _ = load_checkpoint(model_or_path)
    return model


def predict_logits(model: CorrSegNet, case: MultiModalCase) -> torch.Tensor:
    cfg = model.config
    if len(case.modalities) != cfg.n_modalities:
        raise CheckpointMismatchError(
            f"case has {len(case.modalities)} modalities, model expects {cfg.n_modalities}")
    if any(s % cfg.divisor for s in case.shape):
        raise ShapeMismatchError(f"case shape {case.shape} not divisible by {cfg.divisor}")
    x = torch.from_numpy(case.stack(np.float32)[None])
    model.eval()
    with torch.no_grad():
        logits, _, _ = model(x)
    return logits[0]


def logits_to_labels(logits) -> np.ndarray:
    """Argmax over the class axis (first maximum wins) mapped to {0,1,2,4}."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    return decode_labels(np.argmax(arr, axis=0))


def predict(model_or_path, case: MultiModalCase) -> LabelVolume:
    model = _resolve_model(model_or_path)
    values = logits_to_labels(predict_logits(model, case))
    return LabelVolume.from_values(values, case.spacing)


def evaluate(model_or_path, cases: Sequence[MultiModalCase]) -> MetricsReport:
    model = _resolve_model(model_or_path)
    report = MetricsReport()
    for case in cases:
        if case.labels is None:
            raise ConfigError(f"{case.case_id}: evaluation needs labels")
        pred = predict(model, case)
        report.add_case(case.case_id, pred.values, case.labels.values, case.spacing)
    return report


# --- run config -----------------------------------------------------------

RUN_CONFIG_KEYS = {
    # TrainConfig
    "lr": "initial Adam learning rate (5e-4)",
    "beta1": "Adam beta1 (0.9)",
    "beta2": "Adam beta2 (0.999)",
    "adam_eps": "Adam epsilon (1e-8)",
    "lr_decay_factor": "lr multiplier on plateau (0.5)",
    "lr_patience": "stagnant epochs before lr decay (10)",
    "early_stop_patience": "stagnant epochs before stopping (50)",
    "min_delta": "absolute val-loss decrease counted as improvement (1e-4)",
    "max_epochs": "epoch cap (300)",
    "batch_size": "cases per optimizer step (1)",
    "seed": "seed for init, data order and split (0)",
    "use_fusion": "dual attention fusion on/off (true)",
    "use_correlation": "correlation block and loss on/off (true)",
    "lambda_corr": "weight of the correlation loss (0.1)",
    "include_background": "count class 0 in the Dice loss (true)",
    # NetworkConfig
    "base_filters": "filters at the first level (8)",
    "n_levels": "resolution levels (4)",
    "n_classes": "output classes (4)",
    "pairs": "correlation pairs, e.g. FLAIR>T1,T1>T1c,T1c>T2",
    # data
    "split_ratio": "train share of the split; 1.0 trains and validates on all cases (0.8)",
    "target_shape": "crop/resize target, e.g. 128,128,128; empty keeps native shape",
}


def _coerce(value: str, kind):
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {kind.__name__}") from exc


def parse_run_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(input_shape=(32, 32, 32)))
    split_ratio: float = 0.8
    target_shape: tuple[int, int, int] | None = None

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "RunConfig":
        tkw = {}
        for f in fields(TrainConfig):
            if f.name in kv:
                kind = {"float": float, "int": int, "bool": bool}[f.type]
                tkw[f.name] = _coerce(kv[f.name], kind)
        train_cfg = TrainConfig(**tkw)
        nkw = {}
        for key in ("base_filters", "n_levels", "n_classes"):
            if key in kv:
                nkw[key] = _coerce(kv[key], int)
        if "pairs" in kv:
            nkw["pairs"] = kv["pairs"]
        target = None
        if kv.get("target_shape"):
            target = tuple(int(s) for s in kv["target_shape"].split(","))
            if len(target) == 1:
                target = target * 3
        split = _coerce(kv["split_ratio"], float) if "split_ratio" in kv else 0.8
        if not 0.0 < split <= 1.0:
            raise ConfigError("split_ratio must lie in (0, 1]")
        shape = target or (2 ** (nkw.get("n_levels", 4) - 1),) * 3
        net = NetworkConfig(input_shape=shape, use_fusion=train_cfg.use_fusion,
                            use_correlation=train_cfg.use_correlation,
                            lambda_corr=train_cfg.lambda_corr, **nkw)
        return cls(train_cfg, net, split, target)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_mapping(parse_run_config(Path(path).read_text()))
