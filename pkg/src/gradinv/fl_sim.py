"""Federated SGD simulation with a passive, honest-but-curious server.

Each round every worker draws a batch from its shard, computes the mean
loss gradient at the current global parameters and shares it. The server
applies ``w <- w - lr * sum_j (m_j / m) v_j`` and, if an attack template is
configured, runs a reconstruction on every shared gradient.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, partition_contiguous, partition_label_skew
from .metrics import match_batch, mean_l1
from .models import MlpConfig, ModelParams, batch_gradient, init_params, loss_value
from .recon import ReconJob, reconstruct

logger = logging.getLogger(__name__)

PARTITIONS = ("contiguous", "label_skew")


@dataclass
class FlConfig:
    arch: object
    workers: int = 2
    rounds: int = 3
    batch: int = 1
    lr: float = 0.1
    shard_sizes: list | None = None  # m_j; even split when None
    partition: str = "contiguous"
    seed: int = 0
    attack: ReconJob | None = None  # template; target/params/arch/batch/truth are filled per worker
    parallel: bool = False

    def validate(self, n_items):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.shard_sizes is not None and sum(self.shard_sizes) > n_items:
            raise ValueError(f"shard sizes sum to {sum(self.shard_sizes)} but the dataset has {n_items} items")


@dataclass
class RoundLog:
    round: int
    indices: list  # per worker, positions into the full dataset
    bundles: list  # per worker GradientBundle
    params: ModelParams  # w^{t+1}
    recon: list | None = None
    l1: list | None = None
    errors: list = field(default_factory=list)


def attack_template(**kw):
    """A ReconJob carrying only attack settings; per-worker fields are set in ``run``."""
    return ReconJob(target=None, params=None, arch=None, **kw)


def make_shards(cfg: FlConfig, data: Dataset):
    if cfg.partition == "label_skew":
        return partition_label_skew(data.labels, cfg.workers, cfg.shard_sizes)
    return partition_contiguous(len(data), cfg.workers, cfg.shard_sizes)


def _inputs(arch, data, idx):
    return data.flat(idx) if isinstance(arch, MlpConfig) else data.images[idx]


def sample_batch(rng, shard, B):
    if len(shard) == 0:
        raise ValueError("empty shard")
    if B > len(shard):
        raise ValueError(f"batch {B} exceeds shard size {len(shard)}")
    return shard[np.sort(rng.choice(len(shard), size=B, replace=False))]


def local_step(arch, w, data, idx):
    """One worker's shared gradient on the data at ``idx``."""
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        raise ValueError("empty batch")
    return batch_gradient(arch, w, _inputs(arch, data, idx), data.labels[idx])


def aggregate(w: ModelParams, bundles, sizes, lr):
    """``w - lr * sum_j (m_j / m) v_j``, summed in worker order."""
    if len(bundles) != len(sizes) or not bundles:
        raise ValueError("need one shard size per bundle")
    m = float(sum(sizes))
    if m <= 0:
        raise ValueError("total data size must be positive")
    tensors = w.tensors()
    step = [np.zeros_like(t) for t in tensors]
    for v, mj in zip(bundles, sizes):
        if len(v.tensors) != len(tensors):
            raise ValueError("bundle does not match the parameter layout")
        for acc, g in zip(step, v.tensors):
            acc += (mj / m) * g
    return w.replace_tensors([t - lr * s for t, s in zip(tensors, step)])


def global_loss(arch, w, data, shards):
    """Data-size weighted mean of per-worker losses, i.e. the loss on the union."""
    sizes = [len(s) for s in shards]
    total = sum(sizes)
    return sum(
        (len(s) / total) * loss_value(arch, w, _inputs(arch, data, s), data.labels[s]) for s in shards if len(s)
    )


def _attack(template, arch, w, v, truth, B):
    job = dataclasses.replace(template, target=v, params=w, arch=arch, batch=B, truth=truth)
    res = reconstruct(job)
    if B == 1:
        score = mean_l1(res.X_hat.reshape(truth.shape), truth)
    else:
        score = match_batch(res.X_hat, truth).mean_l1
    return res, score


def run(cfg: FlConfig, data: Dataset, params=None):
    """Simulate ``cfg.rounds`` rounds; returns one RoundLog per round."""
    cfg.validate(len(data))
    arch = cfg.arch
    w = init_params(arch, cfg.seed) if params is None else params.copy()
    shards = make_shards(cfg, data)
    sizes = [len(s) for s in shards]
    if cfg.batch > min(sizes):
        raise ValueError(f"batch {cfg.batch} exceeds the smallest shard ({min(sizes)})")
    rngs = [np.random.default_rng([cfg.seed, j]) for j in range(cfg.workers)]
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.parallel else None
    logs = []
    try:
        for t in range(cfg.rounds):
            # draws happen in worker order whichever scheduler runs the steps
            idx = [sample_batch(rngs[j], shards[j], cfg.batch) for j in range(cfg.workers)]
            if pool is None:
                bundles = [local_step(arch, w, data, i) for i in idx]
            else:
                bundles = list(pool.map(lambda i: local_step(arch, w, data, i), idx))
            log = RoundLog(round=t, indices=idx, bundles=bundles, params=None)
            if cfg.attack is not None:
                log.recon, log.l1 = [], []
                for j, (i, v) in enumerate(zip(idx, bundles)):
                    truth = _inputs(arch, data, i)
                    try:
                        res, score = _attack(cfg.attack, arch, w, v, truth, cfg.batch)
                    except Exception as exc:  # recorded, the run goes on
                        logger.warning("round %d worker %d: attack failed: %s", t, j, exc)
                        log.errors.append(f"worker {j}: {type(exc).__name__}: {exc}")
                        res, score = None, float("nan")
                    log.recon.append(res)
                    log.l1.append(score)
            w = aggregate(w, bundles, sizes, cfg.lr)
            log.params = w
            logs.append(log)
    finally:
        if pool is not None:
            pool.shutdown()
    return logs
