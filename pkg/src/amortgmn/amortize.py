"""Training the metanetwork as a single-shot fine-tuner, the SGD baseline, and metrics.

The training loss for a batch of networks is the mean over networks of
``lam * |theta'|_1 + CE(theta'; images)`` where ``theta'`` is the operator
output. Fresh image batches are drawn at every step.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from . import tensor as T
from .data import ImageBatch
from .metanet import Metanet, MetanetParams
from .nets import ArchSpec
from .optim import AdamW
from .tensor import NonFiniteError, Tensor

CURVE_HEADER = ["epoch", "split", "objective", "ce", "l1"]
EVAL_HEADER = ["network", "method", "acc_before", "acc_after", "loss_before", "loss_after",
               "l1_before", "l1_after", "sparsity"]


class NumericalInstabilityError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class ObjectiveSpec:
    lam: float = 0.0               # L1 coefficient
    batch_fraction: float = 0.1    # fraction of the image training set per step

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("L1 coefficient must be >= 0")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch fraction must lie in (0, 1]")

    @property
    def kind(self) -> str:
        return "CE+L1" if self.lam > 0 else "CE"

    def batch_size(self, n_images: int) -> int:
        return max(1, int(math.ceil(self.batch_fraction * n_images)))


@dataclass
class TrainSchedule:
    max_epochs: int = 300
    patience: int = 30
    lr: float = 5e-4
    weight_decay: float = 1e-2
    dropout: float = 0.0
    batch_size: int = 8            # networks per step
    seed: int = 0
    max_seconds: float | None = None
    val_images: int = 512          # fixed validation image subset

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EvalReport:
    method: str
    n_networks: int
    avg_acc: float          # percent
    max_acc: float          # percent
    mean_loss: float
    sparsity: float         # percent
    time_per_forward: float  # seconds, median
    avg_acc_before: float = float("nan")
    mean_loss_before: float = float("nan")
    rows: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d


# -- objective -----------------------------------------------------------

def objective_terms(theta_out: Tensor, arch: ArchSpec, images: ImageBatch, spec: ObjectiveSpec):
    """Per-network (objective, ce, l1) tensors for ``theta_out`` of shape ``[N, P]`` or ``[P]``."""
    logits = nets.forward(arch, theta_out, images.pixels)
    ce = T.cross_entropy(logits, images.labels)
    l1 = T.l1_norm(theta_out, axis=-1)
    obj = ce + l1 * spec.lam if spec.lam else ce
    return obj, ce, l1


def objective(net: Metanet, theta, arch: ArchSpec, images: ImageBatch, spec: ObjectiveSpec,
              training: bool = False, rng=None) -> Tensor:
    """Mean over the given networks of ``lam * |f(theta)|_1 + CE``; differentiable in the metanet."""
    out = net(theta, training=training, rng=rng)
    obj, _, _ = objective_terms(out, arch, images, spec)
    return T.mean(obj)


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NumericalInstabilityError(f"non-finite loss during {where}")


# -- metanet training ----------------------------------------------------

@dataclass
class TrainResult:
    params: MetanetParams
    curves: list
    best_epoch: int
    best_val: float
    stopped_epoch: int
    seconds: float


def _evaluate_objective(net: Metanet, thetas: np.ndarray, arch, images: ImageBatch, spec: ObjectiveSpec,
                        chunk: int = 16) -> tuple[float, float, float]:
    objs, ces, l1s = [], [], []
    with T.no_grad():
        for i in range(0, len(thetas), chunk):
            out = net(thetas[i:i + chunk])
            o, c, l = objective_terms(out, arch, images, spec)
            objs.append(o.data)
            ces.append(c.data)
            l1s.append(l.data)
    return (float(np.concatenate(objs).mean()), float(np.concatenate(ces).mean()),
            float(np.concatenate(l1s).mean()))


def train_metanet(net: Metanet, train_thetas, val_thetas, images_train: ImageBatch, images_val: ImageBatch,
                  schedule: TrainSchedule, spec: ObjectiveSpec, log=None) -> TrainResult:
    """AdamW over zoo networks with early stopping on the validation objective.

    The returned parameters are those of the best validation epoch (epoch 0
    is the untrained metanet). ``net.params`` is left holding them too.
    """
    train_thetas = np.asarray(train_thetas)
    val_thetas = np.asarray(val_thetas)
    if len(train_thetas) == 0 or len(val_thetas) == 0:
        raise ValueError("train and validation splits must be non-empty")
    arch = net.arch
    dtype = net.params.dtype
    train_thetas = train_thetas.astype(dtype)
    val_thetas = val_thetas.astype(dtype)
    rng = np.random.default_rng(schedule.seed)
    batch_rng, image_rng, drop_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=3))
    val_imgs = images_val.sample(schedule.val_images, np.random.default_rng(schedule.seed + 1))
    bsz_img = spec.batch_size(len(images_train))
    net.config.dropout = schedule.dropout

    opt = AdamW(net.params.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    curves = []
    start = time.monotonic()

    def record(epoch, split, vals):
        o, c, l = vals
        curves.append({"epoch": epoch, "split": split, "objective": float(o), "ce": float(c), "l1": float(l)})

    tr_imgs = images_train.sample(schedule.val_images, np.random.default_rng(schedule.seed + 2))
    try:
        tr0 = _evaluate_objective(net, train_thetas, arch, tr_imgs, spec)
        va0 = _evaluate_objective(net, val_thetas, arch, val_imgs, spec)
    except NonFiniteError as exc:
        raise NumericalInstabilityError(f"initial evaluation: {exc}") from exc
    _check_finite(va0[0], "initial validation")
    record(0, "train", tr0)
    record(0, "val", va0)
    best_val, best_epoch = va0[0], 0
    best_vec = net.params.to_vector().copy()
    stopped = 0
    for epoch in range(1, schedule.max_epochs + 1):
        order = batch_rng.permutation(len(train_thetas))
        sums = np.zeros(3)
        steps = 0
        for i in range(0, len(order), schedule.batch_size):
            idx = order[i:i + schedule.batch_size]
            imgs = images_train.sample(bsz_img, image_rng)
            try:
                out = net(train_thetas[idx], training=True, rng=drop_rng)
                o, c, l = objective_terms(out, arch, imgs, spec)
                loss = T.mean(o)
                _check_finite(loss.item(), f"epoch {epoch}")
                opt.zero_grad()
                T.backward(loss)
                for p in opt.params:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NumericalInstabilityError(f"non-finite gradient during epoch {epoch}")
                opt.step()
            except NonFiniteError as exc:
                raise NumericalInstabilityError(f"epoch {epoch}: {exc}") from exc
            sums += [o.data.mean(), c.data.mean(), l.data.mean()]
            steps += 1
        record(epoch, "train", tuple(sums / steps))
        try:
            va = _evaluate_objective(net, val_thetas, arch, val_imgs, spec)
        except NonFiniteError as exc:
            raise NumericalInstabilityError(f"validation after epoch {epoch}: {exc}") from exc
        _check_finite(va[0], f"validation after epoch {epoch}")
        record(epoch, "val", va)
        if log:
            log(f"epoch {epoch:3d}  train {sums[0] / steps:.4f}  val {va[0]:.4f}")
        stopped = epoch
        if va[0] < best_val:
            best_val, best_epoch = va[0], epoch
            best_vec = net.params.to_vector().copy()
        elif epoch - best_epoch >= schedule.patience:
            break
        if schedule.max_seconds is not None and time.monotonic() - start > schedule.max_seconds:
            break
    net.params.load_vector(best_vec)
    net.config.dropout = 0.0
    return TrainResult(net.params, curves, best_epoch, best_val, stopped, time.monotonic() - start)


# -- SGD baseline --------------------------------------------------------

@dataclass
class BaselineResult:
    checkpoints: dict        # epoch -> theta [N, P] (float64)
    metrics: list            # per checkpoint: dict(epoch, avg_acc, mean_loss, mean_l1)


def sgd_baseline(thetas, arch: ArchSpec, train: ImageBatch, test: ImageBatch, checkpoints=(25, 50, 100, 150),
                 lr: float = 0.01, batch: int = 64, lam: float = 0.0, seed: int = 0) -> BaselineResult:
    """Plain SGD fine-tuning of every network on ``CE + lam * |theta|_1``.

    Networks are independent (their losses are summed, so each receives
    exactly its own gradient) and share one minibatch order per epoch.
    Metrics are taken on ``test`` at epoch 0 and at each checkpoint epoch.
    """
    theta = np.array(thetas, dtype=np.float64, copy=True)
    single = theta.ndim == 1
    theta = theta.reshape(-1, arch.num_params)
    rng = np.random.default_rng(seed)
    spec = ObjectiveSpec(lam=lam, batch_fraction=1.0)
    checkpoints = sorted(set(int(c) for c in checkpoints))
    out = BaselineResult({}, [])

    def snapshot(epoch):
        out.checkpoints[epoch] = theta.reshape(-1) if single else theta.copy()
        out.metrics.append(dict(epoch=epoch, **_network_metrics(theta, arch, test, spec)))

    snapshot(0)
    for epoch in range(1, (checkpoints[-1] if checkpoints else 0) + 1):
        order = rng.permutation(len(train))
        for i in range(0, len(order), batch):
            imgs = train.subset(order[i:i + batch])
            th = Tensor(theta, requires_grad=True)
            obj, _, _ = objective_terms(th, arch, imgs, spec)
            T.backward(T.sum(obj))
            theta = theta - lr * th.grad
        if epoch in checkpoints:
            snapshot(epoch)
    return out


def _network_metrics(theta: np.ndarray, arch: ArchSpec, images: ImageBatch, spec: ObjectiveSpec) -> dict:
    with T.no_grad():
        obj, ce, l1 = objective_terms(Tensor(np.asarray(theta, dtype=np.float64)), arch, images, spec)
    acc = nets.accuracy(arch, np.asarray(theta, dtype=np.float64), images.pixels, images.labels)
    return {"avg_acc": float(np.mean(acc) * 100), "mean_loss": float(np.mean(obj.data)),
            "mean_l1": float(np.mean(l1.data))}


# -- evaluation ----------------------------------------------------------

def sparsity(theta_before, theta_after) -> np.ndarray:
    """Per-network percentage reduction of the L1 norm, ``100 * (1 - |theta'|_1 / |theta|_1)``."""
    b = np.abs(np.asarray(theta_before, dtype=np.float64)).sum(axis=-1)
    a = np.abs(np.asarray(theta_after, dtype=np.float64)).sum(axis=-1)
    return np.minimum(100.0 * (1.0 - a / b), 100.0)


def per_network_rows(thetas, thetas_after, arch: ArchSpec, images: ImageBatch, spec: ObjectiveSpec,
                     method: str, ids=None) -> list[dict]:
    before = np.asarray(thetas, dtype=np.float64).reshape(-1, arch.num_params)
    after = np.asarray(thetas_after, dtype=np.float64).reshape(-1, arch.num_params)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(before))]
    rows = []
    with T.no_grad():
        ob, _, lb = objective_terms(Tensor(before), arch, images, spec)
        oa, _, la = objective_terms(Tensor(after), arch, images, spec)
    acc_b = nets.accuracy(arch, before, images.pixels, images.labels)
    acc_a = nets.accuracy(arch, after, images.pixels, images.labels)
    sp = sparsity(before, after)
    for i in range(len(before)):
        rows.append({"network": ids[i], "method": method,
                     "acc_before": float(acc_b[i] * 100), "acc_after": float(acc_a[i] * 100),
                     "loss_before": float(ob.data[i]), "loss_after": float(oa.data[i]),
                     "l1_before": float(lb.data[i]), "l1_after": float(la.data[i]),
                     "sparsity": float(sp[i])})
    return rows


def report_from_rows(rows: list[dict], method: str, time_per_forward: float = float("nan")) -> EvalReport:
    acc = np.array([r["acc_after"] for r in rows])
    return EvalReport(
        method=method, n_networks=len(rows),
        avg_acc=float(acc.mean()), max_acc=float(acc.max()),
        mean_loss=float(np.mean([r["loss_after"] for r in rows])),
        sparsity=float(np.mean([r["sparsity"] for r in rows])),
        time_per_forward=time_per_forward,
        avg_acc_before=float(np.mean([r["acc_before"] for r in rows])),
        mean_loss_before=float(np.mean([r["loss_before"] for r in rows])),
        rows=rows)


def time_forward(fn, thetas, repeats: int = 20, warmup: int = 3) -> float:
    """Median wall-clock of single-network forward passes (batch size one)."""
    thetas = np.asarray(thetas)
    for i in range(warmup):
        fn(thetas[i % len(thetas)])
    times = []
    for i in range(max(repeats, 20)):
        t0 = time.perf_counter()
        fn(thetas[i % len(thetas)])
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def apply_operator(net: Metanet, thetas, chunk: int = 16) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=net.params.dtype)
    outs = []
    with T.no_grad():
        for i in range(0, len(thetas), chunk):
            outs.append(net(thetas[i:i + chunk]).data)
    return np.concatenate(outs, axis=0)


def evaluate(net_or_fn, thetas, arch: ArchSpec, images: ImageBatch, spec: ObjectiveSpec,
             method: str = "metanet", ids=None, timing: bool = True) -> tuple[EvalReport, np.ndarray]:
    """One forward pass per test network; returns the report and the produced ``theta'``.

    ``net_or_fn`` is a :class:`Metanet` or any callable mapping ``[N, P]`` to ``[N, P]``.
    """
    thetas = np.asarray(thetas)
    if isinstance(net_or_fn, Metanet):
        after = apply_operator(net_or_fn, thetas)

        def single(th):
            with T.no_grad():
                return net_or_fn(th[None].astype(net_or_fn.params.dtype))
    else:
        after = np.asarray(net_or_fn(thetas))

        def single(th):
            return net_or_fn(th[None])
    rows = per_network_rows(thetas, after, arch, images, spec, method, ids)
    t = time_forward(single, thetas) if timing else float("nan")
    return report_from_rows(rows, method, t), after


# -- CSV -------------------------------------------------------------------

def _cell(v):
    # repr round-trips doubles exactly; numpy scalars are unwrapped first
    if isinstance(v, np.generic):
        v = v.item()
    return repr(v) if isinstance(v, float) else v


def write_csv(path, rows: list[dict], header: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items() if k in header})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = int(v) if v.lstrip("-").isdigit() else float(v)
            except ValueError:
                pass
    return rows


def write_curves(path, curves: list[dict]) -> None:
    write_csv(path, curves, CURVE_HEADER)


def write_eval(path, rows: list[dict]) -> None:
    write_csv(path, rows, EVAL_HEADER)
