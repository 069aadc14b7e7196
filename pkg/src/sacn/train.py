"""Training loop, evaluation, gradient checking and the sacn-vs-baseline ablation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, capture
from .config import RunConfig, override
from .data import Dataset, DataError
from .model import SacnModel
from .tensor import Rng, derive_seed

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "split", "l_m", "l_r", "l_t", "accuracy", "seconds")


class NumericalError(RuntimeError):
    """Non-finite loss or a failed numerical check (CLI exit code 3)."""


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params: list[tuple[str, T.Tensor]], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def state_tensors(self) -> dict:
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name].astype(np.float64)
            out[f"adam.v/{name}"] = self.v[name].astype(np.float64)
        return out

    def load_state_tensors(self, tensors: dict, step_count: int) -> None:
        for name, p in self.params:
            if f"adam.m/{name}" in tensors:
                self.m[name] = tensors[f"adam.m/{name}"].astype(p.dtype)
                self.v[name] = tensors[f"adam.v/{name}"].astype(p.dtype)
        self.step_count = step_count


class SGD:
    def __init__(self, params, lr: float):
        self.params = params
        self.lr = lr
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        for _, p in self.params:
            if p.grad is not None:
                p.data = (p.data - self.lr * p.grad).astype(p.dtype)

    def state_tensors(self) -> dict:
        return {}

    def load_state_tensors(self, tensors, step_count) -> None:
        self.step_count = step_count


def make_optimizer(model: SacnModel):
    t = model.config.train
    params = model.named_parameters()
    if t.optimizer == "sgd":
        return SGD(params, t.lr)
    return Adam(params, t.lr, t.beta1, t.beta2, t.eps)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    split: str
    l_m: float
    l_r: float
    l_t: float
    accuracy: float
    seconds: float = 0.0

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch), self.split, repr(self.l_m), repr(self.l_r),
                repr(self.l_t), repr(self.accuracy), f"{self.seconds:.3f}"]


class MetricsWriter:
    """Append-only CSV sink."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = self.path.open("a", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._csv.writerow(METRIC_FIELDS)

    def __call__(self, rec: MetricsRecord) -> None:
        self._csv.writerow(rec.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [MetricsRecord(int(r["step"]), int(r["epoch"]), r["split"], float(r["l_m"]),
                              float(r["l_r"]), float(r["l_t"]), float(r["accuracy"]),
                              float(r["seconds"]))
                for r in csv.DictReader(fh)]


def evaluate(model, x, y, split: str = "test", batch_size: int = 256, step: int = 0,
             epoch: int = 0) -> MetricsRecord:
    """Accuracy and per-sample mean losses of ``model`` on (x, y)."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise DataError(f"cannot evaluate on an empty {split} split")
    sums = np.zeros(3)
    correct = 0
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            res = model.forward(xb, yb)
            b = res.breakdown
            sums += len(xb) * np.array([b.l_m, b.l_r, b.l_t])
            correct += int(np.sum(np.argmax(res.lengths, axis=1) == yb))
    l_m, l_r, l_t = (float(v) for v in sums / len(x))
    return MetricsRecord(step, epoch, split, l_m, l_r, l_t, correct / len(x))


# ---------------------------------------------------------------------------
# training


def shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng(derive_seed(seed, f"shuffle/{epoch}")).permutation(n)


def _param_norms(model) -> str:
    return ", ".join(f"{n}={float(np.linalg.norm(p.data)):.4g}" for n, p in model.named_parameters())


class Trainer:
    """Owns a model and its optimizer; runs epochs and records metrics.

    ``epoch`` and ``epoch_step`` locate the next batch, so a trainer restored
    from a checkpoint continues exactly where the saved one stopped.
    """

    def __init__(self, model: SacnModel, optimizer=None, sink=None, timing: bool = True):
        self.model = model
        self.config = model.config
        self.optimizer = optimizer or make_optimizer(model)
        self.sink = sink
        self.timing = timing
        self.history: list[MetricsRecord] = []
        self.step = 0
        self.epoch = 0
        self.epoch_step = 0
        self._t0 = time.perf_counter()
        self._best_val = np.inf
        self._bad_epochs = 0

    def _emit(self, rec: MetricsRecord) -> None:
        rec.seconds = time.perf_counter() - self._t0 if self.timing else 0.0
        self.history.append(rec)
        if self.sink is not None:
            self.sink(rec)

    def train_step(self, xb, yb, batch_id: str = "") -> MetricsRecord:
        self.model.zero_grad()
        res = self.model.forward(xb, yb, training=True)
        if not np.isfinite(res.breakdown.l_t):
            raise NumericalError(f"non-finite loss {res.breakdown.l_t} at step {self.step} "
                                 f"(batch {batch_id}); parameter norms: {_param_norms(self.model)}")
        res.loss.backward()
        self.optimizer.step()
        self.step += 1
        b = res.breakdown
        acc = float(np.mean(res.predictions == np.asarray(yb)))
        return MetricsRecord(self.step, self.epoch, "train", b.l_m, b.l_r, b.l_t, acc)

    def fit(self, x, y, x_val=None, y_val=None, max_steps: int | None = None):
        cfg = self.config.train
        max_steps = cfg.max_steps if max_steps is None else max_steps
        x = np.asarray(x)
        y = np.asarray(y, dtype=np.int64)
        n = len(x)
        if n == 0:
            raise DataError("training split is empty")
        bs = cfg.batch_size
        n_batches = (n + bs - 1) // bs
        while self.epoch < cfg.epochs:
            order = shuffle_order(self.config.seed, self.epoch, n)
            while self.epoch_step < n_batches:
                if max_steps and self.step >= max_steps:
                    return self.history
                idx = order[self.epoch_step * bs:(self.epoch_step + 1) * bs]
                rec = self.train_step(x[idx], y[idx], f"{self.epoch}:{self.epoch_step}")
                self.epoch_step += 1
                if self.step % cfg.log_every == 0:
                    self._emit(rec)
            self.epoch += 1
            self.epoch_step = 0
            if x_val is not None and len(x_val):
                val = evaluate(self.model, x_val, y_val, "val", step=self.step, epoch=self.epoch)
                self._emit(val)
                log.info("epoch %d step %d val acc %.4f loss %.4f", self.epoch, self.step,
                         val.accuracy, val.l_t)
                if cfg.early_stop_patience:
                    if val.l_t < self._best_val:
                        self._best_val, self._bad_epochs = val.l_t, 0
                    else:
                        self._bad_epochs += 1
                        if self._bad_epochs >= cfg.early_stop_patience:
                            break
        return self.history

    def checkpoint(self) -> Checkpoint:
        return capture(self.model, self.optimizer,
                       {"epoch": self.epoch, "step": self.step, "epoch_step": self.epoch_step})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, sink=None, timing: bool = True) -> "Trainer":
        from .checkpoint import restore

        model, opt = restore(ckpt)
        tr = cls(model, opt, sink=sink, timing=timing)
        tr.epoch = ckpt.state.get("epoch", 0)
        tr.step = ckpt.state.get("step", 0)
        tr.epoch_step = ckpt.state.get("epoch_step", 0)
        return tr


@dataclass
class TrainResult:
    trainer: Trainer
    test: MetricsRecord | None

    @property
    def model(self) -> SacnModel:
        return self.trainer.model

    @property
    def history(self) -> list[MetricsRecord]:
        return self.trainer.history


def check_splits(dataset: Dataset) -> None:
    for name in ("train", "val", "test"):
        if not any(r.split == name for r in dataset.rows):
            raise DataError(f"dataset has no {name} split")


def train(config: RunConfig, dataset: Dataset, out_dir=None, timing: bool = True) -> TrainResult:
    """Train on the dataset's train split, validating every epoch; evaluate on test.

    With ``out_dir`` the metrics CSV, the resolved config and the final
    checkpoint are written there.
    """
    check_splits(dataset)
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved-config.txt").write_text(config.to_text(), encoding="utf-8")
        metrics = out_dir / "metrics.csv"
        metrics.unlink(missing_ok=True)
        sink = MetricsWriter(metrics)
    try:
        trainer = Trainer(SacnModel(config), sink=sink, timing=timing)
        xtr, ytr = dataset.subset("train")
        xva, yva = dataset.subset("val")
        trainer.fit(xtr, ytr, xva, yva)
        xte, yte = dataset.subset("test")
        test = evaluate(trainer.model, xte, yte, "test", step=trainer.step, epoch=trainer.epoch)
        trainer._emit(test)
    finally:
        if sink is not None:
            sink.close()
    if out_dir is not None:
        trainer.checkpoint().save(out_dir / "checkpoint.sacn")
    return TrainResult(trainer, test)


# ---------------------------------------------------------------------------
# gradient check


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over the group, relative to the group's largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale_ = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale_ == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale_)


def numeric_gradient(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f()
        flat[k] = orig - eps
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    threshold: float
    routing_iters: int
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failed

    def format(self) -> str:
        w = max(len(n) for n in self.errors)
        lines = [f"routing iterations: {self.routing_iters}"]
        for name, err in self.errors.items():
            flag = "ok" if err < self.threshold else "FAIL"
            lines.append(f"  {name:<{w}}  {err:.3e}  {flag}")
        return "\n".join(lines)


def gradcheck(config: RunConfig, alpha: float = 0.37, eps: float = 1e-5,
              threshold: float = 1e-5, batch: int = 2) -> GradcheckReport:
    """Compare backprop against central differences for every parameter group.

    Runs in 64-bit.  The attention gate is moved off zero (``alpha``) so the
    attention projections receive a gradient; the spectral-norm scale is
    frozen at its current estimate, matching its treatment as a constant in
    backprop.
    """
    t0 = time.perf_counter()
    config = override(config, {"train.precision": "float64"})
    m = config.model
    model = SacnModel(config)
    if model.attention is not None:
        model.attention.alpha.data = np.array([alpha], dtype=np.float64)
    rng = Rng(config.seed).child("gradcheck")
    x = rng.uniform(0.0, 1.0, size=(batch, m.in_channels, m.height, m.width))
    y = np.arange(batch) % m.n_classes

    def loss() -> float:
        with T.no_grad():
            return model.forward(x, y).loss.item()

    model.zero_grad()
    model.forward(x, y).loss.backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numeric_gradient(loss, p.data, eps))
    return GradcheckReport(errors, threshold, m.routing_iters, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    accuracies: dict[str, list[float]]
    seeds: list[int]

    def mean(self, mode: str) -> float:
        return float(np.mean(self.accuracies[mode]))

    def std(self, mode: str) -> float:
        return float(np.std(self.accuracies[mode]))

    @property
    def gap(self) -> float:
        return self.mean("sacn") - self.mean("baseline")

    def format(self) -> str:
        lines = [f"seeds: {self.seeds}"]
        for mode in ("sacn", "baseline"):
            accs = ", ".join(f"{a:.4f}" for a in self.accuracies[mode])
            lines.append(f"{mode:<9} {self.mean(mode):.4f} +- {self.std(mode):.4f}  [{accs}]")
        lines.append(f"gap (sacn - baseline): {self.gap:+.4f}")
        return "\n".join(lines)


def ablate(config: RunConfig, dataset: Dataset, k: int = 3) -> AblationReport:
    """Train both modes on identical data and batch order for k model seeds."""
    seeds = [config.seed + s for s in range(k)]
    accs: dict[str, list[float]] = {"sacn": [], "baseline": []}
    for seed in seeds:
        for mode in ("sacn", "baseline"):
            cfg = override(config, {"model.mode": mode, "seed": seed})
            res = train(cfg, dataset, timing=False)
            accs[mode].append(res.test.accuracy)
            log.info("ablate seed %d %s test acc %.4f", seed, mode, res.test.accuracy)
    return AblationReport(accs, seeds)
