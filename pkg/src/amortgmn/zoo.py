"""Model zoos: sampled training recipes, checkpoints, filtering and splits.

Store layout (directory)::

    index.json              format version, architecture, one entry per record
    blobs/<record id>.f32   little-endian float32 parameter vector, no header

Each index entry carries ``id``, ``model_id``, ``epoch``, ``split``,
``test_accuracy``, ``diverged``, ``hyperparams``, ``blob`` (path relative
to the store) and ``num_params``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from . import tensor as T
from .data import ImageBatch
from .nets import ArchSpec
from .optim import make_optimizer
from .tensor import NonFiniteError, Tensor

STORE_FORMAT = 1
OPTIMIZERS = ("adam", "sgd", "rmsprop")
INIT_KINDS = ("xavier-normal", "he-normal", "orthogonal", "normal", "truncated-normal")
LR_RANGE = (5e-4, 5e-2)
L2_RANGE = (1e-8, 1e-2)
VAR_RANGE = (1e-3, 0.5)


class EmptyZooError(ValueError):
    """No records survive filtering."""


@dataclass(frozen=True)
class ZooHyperparams:
    optimizer: str
    lr: float
    l2: float
    init_kind: str
    init_variance: float

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS or self.init_kind not in INIT_KINDS:
            raise ValueError("unknown optimizer or init kind")
        for name, v, (lo, hi) in (("lr", self.lr, LR_RANGE), ("l2", self.l2, L2_RANGE),
                                  ("init_variance", self.init_variance, VAR_RANGE)):
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_hyperparams(seed) -> ZooHyperparams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ZooHyperparams(
        optimizer=OPTIMIZERS[rng.integers(len(OPTIMIZERS))],
        lr=_log_uniform(rng, *LR_RANGE),
        l2=_log_uniform(rng, *L2_RANGE),
        init_kind=INIT_KINDS[rng.integers(len(INIT_KINDS))],
        init_variance=_log_uniform(rng, *VAR_RANGE),
    )


@dataclass
class ZooRecord:
    id: str
    model_id: int
    arch_id: str
    epoch: int
    theta: np.ndarray          # float32 [P]
    hyperparams: ZooHyperparams
    test_accuracy: float
    split: str = ""
    diverged: bool = False

    def meta(self) -> dict:
        return {"id": self.id, "model_id": self.model_id, "arch_id": self.arch_id, "epoch": self.epoch,
                "split": self.split, "test_accuracy": self.test_accuracy, "diverged": self.diverged,
                "hyperparams": asdict(self.hyperparams), "num_params": int(self.theta.size)}


def checkpoint_accuracy(arch: ArchSpec, theta32: np.ndarray, test: ImageBatch) -> float:
    """Accuracy of a stored (float32) checkpoint, evaluated in float64."""
    return float(nets.accuracy(arch, np.asarray(theta32, dtype=np.float32).astype(np.float64),
                               test.pixels, test.labels))


def train_model(arch: ArchSpec, hp: ZooHyperparams, train: ImageBatch, test: ImageBatch, checkpoints,
                rng: np.random.Generator, batch: int = 64):
    """Train one network; yields ``(epoch, theta32, diverged)`` at each checkpoint epoch."""
    theta = nets.init_params(arch, rng, hp.init_kind, hp.init_variance)
    param = Tensor(theta, requires_grad=True)
    opt = make_optimizer(hp.optimizer, [param], hp.lr, hp.l2)
    checkpoints = sorted(set(int(c) for c in checkpoints))
    diverged = False
    last_good = theta.copy()
    for epoch in range(1, checkpoints[-1] + 1):
        if not diverged:
            order = rng.permutation(len(train))
            try:
                for i in range(0, len(order), batch):
                    b = train.subset(order[i:i + batch])
                    loss = T.cross_entropy(nets.forward(arch, param, b.pixels), b.labels)
                    opt.zero_grad()
                    T.backward(loss)
                    opt.step()
                    if not np.all(np.isfinite(param.data)):
                        raise NonFiniteError("non-finite parameters")
                last_good = param.data.copy()
            except NonFiniteError:
                diverged = True
        if epoch in checkpoints:
            yield epoch, last_good.astype(np.float32), diverged


def generate_zoo(n_models: int, arch: ArchSpec, dataset, checkpoints=(5, 10, 15), seed: int = 0,
                 batch: int = 64, log=None) -> list[ZooRecord]:
    """Train ``n_models`` networks with sampled recipes; one record per checkpoint.

    ``dataset`` is ``(train, val, test)`` image batches; model ``i`` draws
    everything from the stream ``(seed, i)`` so zoos are reproducible and
    extendable. Diverged models keep their last finite parameters and are
    flagged.
    """
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    train, _, test = dataset
    records = []
    for i in range(n_models):
        rng = np.random.default_rng([seed, i])
        hp = sample_hyperparams(rng)
        for epoch, theta, diverged in train_model(arch, hp, train, test, checkpoints, rng, batch):
            acc = checkpoint_accuracy(arch, theta, test)
            records.append(ZooRecord(f"m{i:05d}-e{epoch:03d}", i, arch.name, epoch, theta, hp, acc,
                                     diverged=diverged))
        if log:
            log(f"model {i}: {hp.optimizer} lr={hp.lr:.2e} acc={records[-1].test_accuracy:.3f}")
    return records


def filter_and_split(records: list[ZooRecord], threshold: float = 0.3, fractions=(0.8, 0.1, 0.1),
                     seed: int = 0) -> list[ZooRecord]:
    """Drop diverged or below-threshold checkpoints; assign splits per model.

    All surviving checkpoints of one model land in the same split.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    kept = [r for r in records if not r.diverged and r.test_accuracy >= threshold]
    if not kept:
        raise EmptyZooError("empty zoo after filter")
    models = sorted({r.model_id for r in kept})
    perm = np.random.default_rng(seed).permutation(len(models))
    n = len(models)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    # with few models, rounding can empty a requested split; borrow from train
    if n >= 3 and fractions[1] > 0 and n_val == 0 and n_train > 1:
        n_train, n_val = n_train - 1, 1
    if n >= 3 and fractions[2] > 0 and n_train + n_val == n and n_train > 1:
        n_train -= 1
    tag = {}
    for rank, j in enumerate(perm):
        tag[models[j]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    out = []
    for r in kept:
        out.append(ZooRecord(r.id, r.model_id, r.arch_id, r.epoch, r.theta, r.hyperparams, r.test_accuracy,
                             tag[r.model_id], r.diverged))
    return out


def split_arrays(records: list[ZooRecord], split: str) -> tuple[np.ndarray, list[str]]:
    sel = [r for r in records if r.split == split]
    if not sel:
        return np.zeros((0, 0), dtype=np.float32), []
    return np.stack([r.theta for r in sel]), [r.id for r in sel]


# -- store -----------------------------------------------------------------

@dataclass
class Zoo:
    arch: ArchSpec
    records: list
    meta: dict = field(default_factory=dict)


def save_zoo(path, arch: ArchSpec, records: list[ZooRecord], meta: dict | None = None) -> Path:
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in records:
        rel = f"blobs/{r.id}.f32"
        (root / rel).write_bytes(np.ascontiguousarray(r.theta, dtype="<f4").tobytes())
        entry = r.meta()
        entry["blob"] = rel
        entries.append(entry)
    index = {"format": STORE_FORMAT, "dtype": "<f4", "arch": arch.to_dict(), "meta": meta or {},
             "records": entries}
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return root / "index.json"


def load_zoo(path) -> Zoo:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    if index.get("format") != STORE_FORMAT:
        raise ValueError(f"{root}: unsupported zoo format {index.get('format')}")
    arch = ArchSpec.from_dict(index["arch"])
    records = []
    for e in index["records"]:
        theta = np.frombuffer((root / e["blob"]).read_bytes(), dtype="<f4").astype(np.float32)
        if theta.size != arch.num_params:
            raise ValueError(f"{e['blob']}: {theta.size} values, expected {arch.num_params}")
        records.append(ZooRecord(e["id"], e["model_id"], e["arch_id"], e["epoch"], theta,
                                 ZooHyperparams(**e["hyperparams"]), e["test_accuracy"], e["split"],
                                 e["diverged"]))
    return Zoo(arch, records, index.get("meta", {}))
