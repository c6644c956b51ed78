"""Loss, Adam, learning-rate schedule, balanced sampling, checkpoints and training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import ctsr
from . import tensor as T
from .metrics import tagging_metrics
from .model import CapsuleSED, ClipPrediction, ModelConfig
from .postprocess import tag_decision
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    lr_decay: float = 0.9
    decay_every: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 44
    epochs: int = 30
    seed: int = 0
    balance: bool = True
    top_k: int = 5
    tag_threshold: float = 0.3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 1 or self.decay_every < 1 or self.top_k < 1:
            raise ValueError("epochs, decay_every and top_k must be positive")


@dataclass
class Dataset:
    clip_ids: list[str]
    features: np.ndarray  # (N, frames, bins) float32
    targets: np.ndarray  # (N, classes) {0, 1}
    classes: list[str]

    def __len__(self) -> int:
        return len(self.clip_ids)

    def label_sets(self) -> dict[str, set[str]]:
        return {cid: {self.classes[k] for k in np.flatnonzero(row)} for cid, row in zip(self.clip_ids, self.targets)}


def bce_loss(y: Tensor, targets) -> Tensor:
    """-sum_l [t log(y+eps) + (1-t) log(1-y+eps)], averaged over the batch."""
    y = T.as_tensor(y)
    t = T.as_tensor(np.asarray(targets), like=y)
    per_class = t * T.log(y + BCE_EPS) + (1.0 - t) * T.log(1.0 - y + BCE_EPS)
    total = T.tsum(per_class, axis=-1)
    return -(T.mean(total) if total.ndim else total)


def lr_schedule(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    return config.learning_rate * config.lr_decay ** (epoch // config.decay_every)


class Adam:
    """Bias-corrected Adam over a dict of named parameter tensors."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def balanced_batches(targets: np.ndarray, batch_size: int, n_batches: int,
                     rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index batches drawn class-first: pick a class uniformly, then a clip of that class.

    Sampling is with replacement; a multi-label clip belongs to every class pool it
    is labeled with. Classes without clips are skipped with a warning.
    """
    targets = np.asarray(targets)
    pools = [np.flatnonzero(targets[:, k]) for k in range(targets.shape[1])]
    empty = [k for k, pool in enumerate(pools) if len(pool) == 0]
    if empty:
        warnings.warn(f"classes {empty} have no samples and are skipped by the balancer")
    pools = [pool for pool in pools if len(pool)]
    if not pools:
        raise ValueError("no class has any samples")
    for _ in range(n_batches):
        classes = rng.integers(len(pools), size=batch_size)
        yield np.array([pools[c][rng.integers(len(pools[c]))] for c in classes])


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# checkpoints

def save_checkpoint(directory, model: CapsuleSED, optimizer: Adam, meta: dict) -> Path:
    directory = Path(directory)
    if directory.exists():
        shutil.rmtree(directory)
    (directory / "params").mkdir(parents=True)
    (directory / "adam").mkdir()
    for name, arr in model.state_arrays().items():
        ctsr.save(directory / "params" / f"{name}.ctsr", arr)
    for name in optimizer.m:
        ctsr.save(directory / "adam" / f"{name}.m.ctsr", optimizer.m[name])
        ctsr.save(directory / "adam" / f"{name}.v.ctsr", optimizer.v[name])
    meta = dict(meta, adam_t=optimizer.t)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory, model_config: ModelConfig) -> tuple[CapsuleSED, Adam, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    model = CapsuleSED.initialize(model_config)
    model.load_state_arrays({p.name[:-len(".ctsr")]: ctsr.load(p) for p in (directory / "params").glob("*.ctsr")})
    optimizer = Adam()
    optimizer.t = meta["adam_t"]
    for name in model.params:
        m_path = directory / "adam" / f"{name}.m.ctsr"
        if m_path.exists():
            optimizer.m[name] = ctsr.load(m_path)
            optimizer.v[name] = ctsr.load(directory / "adam" / f"{name}.v.ctsr")
    return model, optimizer, meta


def evaluate(model: CapsuleSED, data: Dataset, tag_threshold: float = 0.3,
             batch_size: int = 64) -> tuple[float, float, ClipPrediction]:
    """Validation loss, tagging micro F-score at ``tag_threshold`` and the raw predictions."""
    pred = model.predict(data.features, batch_size)
    y = pred.y.astype(np.float64)
    t = data.targets
    loss = float(-np.mean(np.sum(t * np.log(y + BCE_EPS) + (1 - t) * np.log(1 - y + BCE_EPS), axis=1)))
    predicted = {cid: {data.classes[k] for k in tag_decision(row, tag_threshold)} for cid, row in zip(data.clip_ids, y)}
    f = tagging_metrics(predicted, data.label_sets()).f_score
    return loss, f, pred


def train(model_config: ModelConfig, config: TrainConfig, train_set: Dataset, val_set: Dataset, out_dir,
          resume_from: str | Path | None = None) -> list[dict]:
    """Train for ``config.epochs`` epochs, checkpointing every epoch.

    Writes ``checkpoints/epoch_XXX/`` and ``train_log.jsonl`` under ``out_dir``;
    returns the per-epoch log records. Randomness for epoch e comes only from
    ``(seed, e)``, so resuming from a checkpoint replays the same stream.
    """
    out = Path(out_dir)
    ckpt_root = out / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    digest = config_hash(model_config, config)

    if resume_from is not None:
        model, optimizer, meta = load_checkpoint(resume_from, model_config)
        start = meta["epoch"] + 1
        records = [json.loads(line) for line in log_path.read_text().splitlines()[:start]] if log_path.exists() else []
    else:
        model = CapsuleSED.initialize(model_config, seed=config.seed)
        optimizer = Adam(config.beta1, config.beta2, config.adam_eps)
        start, records = 0, []
    optimizer.beta1, optimizer.beta2, optimizer.eps = config.beta1, config.beta2, config.adam_eps

    n_batches = math.ceil(len(train_set) / config.batch_size)
    for epoch in range(start, config.epochs):
        lr = lr_schedule(epoch, config)
        rng = np.random.default_rng([config.seed, epoch])
        if config.balance:
            batches = balanced_batches(train_set.targets, config.batch_size, n_batches, rng)
        else:
            batches = shuffled_batches(len(train_set), config.batch_size, rng)
        losses = []
        for b, idx in enumerate(batches):
            try:
                y, _, _ = model.forward(train_set.features[idx], training=True, rng=rng)
                loss = bce_loss(y, train_set.targets[idx])
                grads = T.gradients(loss, model.params)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in epoch {epoch}, batch {b}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}")
            optimizer.step(model.params, grads, lr)
            losses.append(loss.item())
        val_loss, val_f, _ = evaluate(model, val_set, config.tag_threshold)
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                  "val_f_score": val_f}
        records.append(record)
        save_checkpoint(ckpt_root / f"epoch_{epoch:03d}", model, optimizer,
                        dict(record, seed=config.seed, config_hash=digest))
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
        log.info("epoch %d  lr %.6f  train %.4f  val %.4f  F %.4f", epoch, lr, record["train_loss"], val_loss, val_f)
    return records


def select_checkpoints(run_dir, k: int = 5) -> list[Path]:
    """The ``k`` checkpoints with the best validation F-score (ties: lower loss, then earlier epoch)."""
    metas = []
    for d in sorted((Path(run_dir) / "checkpoints").glob("epoch_*")):
        meta = json.loads((d / "meta.json").read_text())
        metas.append((-meta["val_f_score"], meta["val_loss"], meta["epoch"], d))
    if not metas:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    return [m[-1] for m in sorted(metas)[:k]]


def ensemble_predict(checkpoints: Sequence, model_config: ModelConfig, features: np.ndarray) -> ClipPrediction:
    """Average y, o and z elementwise over several models.

    Each entry is a checkpoint directory or an already loaded model.
    """
    preds = []
    for ckpt in checkpoints:
        model = ckpt if hasattr(ckpt, "predict") else load_checkpoint(ckpt, model_config)[0]
        preds.append(model.predict(features))
    return ClipPrediction(*(np.mean([getattr(p, k) for p in preds], axis=0) for k in ("y", "o", "z")))
