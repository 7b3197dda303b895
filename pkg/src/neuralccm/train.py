"""Dataset sampling, minibatch Adam training, pointwise certificate accuracy."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import certloss, linalg
from .certloss import ControllerNet, LossConfig, MetricNet
from .diffnet import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, sample=None):
        super().__init__(msg)
        self.sample = sample


@dataclass
class TrainConfig:
    num_samples: int = 130_000
    epochs: int = 20
    batch_size: int = 128
    rate: float | None = None  # None: the benchmark's default contraction rate
    w_lb: float = 0.1
    w_ub: float = 10.0
    num_dirs: int = 64
    margin: float = 1.0
    seed: int = 0
    lr: float = 3e-3
    lr_decay: float = 0.9  # multiplicative per epoch; 1.0 keeps the rate constant
    arch: str = "bottleneck"
    mask: bool | None = None  # None: mask exactly when B has the sparse structure
    use_c2: bool | None = None
    form: str = "primal"
    reduction: str = "violating"
    worst_dir: bool = True
    hidden_dim: int = 128
    width: int = 32
    sampler: str = "uniform"  # "uniform" over X x X x U, or "tracking" (near-reference pairs)
    weights: dict = field(default_factory=lambda: {"contraction": 1.0, "c1": 10.0, "c2": 1.0, "cond": 1.0})

    def __post_init__(self):
        if min(self.num_samples, self.epochs, self.batch_size) < 1:
            raise ValueError("num_samples, epochs and batch_size must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {sorted(SAMPLERS)}")

    def resolved_rate(self, model):
        return model.rate if self.rate is None else float(self.rate)

    def resolved_mask(self, model):
        return model.sparse if self.mask is None else bool(self.mask)

    def loss_config(self, model):
        return LossConfig(rate=self.resolved_rate(model), num_dirs=self.num_dirs, margin=self.margin,
                          weights=dict(self.weights), use_c2=self.use_c2, form=self.form,
                          reduction=self.reduction, worst_dir=self.worst_dir)

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    params: list
    epoch: int
    history: list
    config: dict


@dataclass
class TrainResult:
    metric: MetricNet
    controller: ControllerNet
    history: list
    config: TrainConfig


def sample_dataset(model, count, seed):
    """``count`` independent triples ``(x, xref, uref)`` from X x X x U."""
    rng = np.random.default_rng(seed)
    x = model.state_box.sample(rng, count)
    xref = model.state_box.sample(rng, count)
    uref = model.control_box.sample(rng, count)
    return x, xref, uref


def sample_tracking_dataset(model, count, seed):
    """Triples concentrated around the diagonal ``x = x*``.

    ``x* ~ U(X)``, ``u* ~ U(U)`` and ``x = x* + s e`` with ``e ~ U(X_e0)`` and
    an independent radial factor ``s ~ U(0, 1)``, so arbitrarily small
    tracking errors keep positive density. ``x`` is not clipped to ``X``:
    rollouts start from ``x*(0) + X_e0`` and may leave it.
    """
    rng = np.random.default_rng(seed)
    xref = model.state_box.sample(rng, count)
    err = model.init_error_box.sample(rng, count) * rng.random((count, 1))
    uref = model.control_box.sample(rng, count)
    return xref + err, xref, uref


SAMPLERS = {"uniform": sample_dataset, "tracking": sample_tracking_dataset}


def build_networks(model, config, rng=None):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    mn = MetricNet(model.n, model.m, model.relevant, w_lb=config.w_lb, w_ub=config.w_ub,
                   masked=config.resolved_mask(model), hidden_dim=config.hidden_dim, rng=rng)
    cn = ControllerNet(model.n, model.m, config.arch, model.relevant, width=config.width,
                       hidden_dim=config.hidden_dim, rng=rng)
    return mn, cn


def checkpoint(mn, cn, epoch, history, config):
    return Checkpoint([p.value.copy() for p in mn.params + cn.params], epoch,
                      [dict(h) for h in history], config.to_dict())


def restore(ckpt, mn, cn):
    params = mn.params + cn.params
    if len(params) != len(ckpt.params):
        raise ValueError("checkpoint does not match network layout")
    for p, v in zip(params, ckpt.params):
        p.value = v.copy()


def _offender(x, xref, uref, idx):
    """First batch sample with a non-finite entry (else the first one)."""
    bad = ~(np.isfinite(x[idx]).all(1) & np.isfinite(xref[idx]).all(1) & np.isfinite(uref[idx]).all(1))
    i = idx[np.argmax(bad)] if bad.any() else idx[0]
    return x[i], xref[i], uref[i]


def train(model, config=None, data=None, callback=None):
    """Minimise the empirical contraction risk with minibatch Adam.

    Returns a :class:`TrainResult` whose ``history`` has one row per epoch:
    ``{"epoch", "total", <term>: mean}``. Deterministic for a fixed seed.
    """
    config = TrainConfig() if config is None else config
    rng = np.random.default_rng(config.seed)
    mn, cn = build_networks(model, config, rng)
    if data is None:
        data = SAMPLERS[config.sampler](model, config.num_samples, config.seed + 1)
    x, xref, uref = data
    count = x.shape[0]
    cfg = config.loss_config(model)
    params = mn.params + cn.params
    opt = AdamState(lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(count)
        sums, total_sum, batches = {}, 0.0, 0
        for start in range(0, count, config.batch_size):
            idx = order[start:start + config.batch_size]
            dirs = certloss.sample_dirs(rng, cfg, model)
            for p in params:
                p.grad = None
            where = f"epoch {epoch}, batch {batches}"
            try:
                total, terms = certloss.empirical_risk((x[idx], xref[idx], uref[idx]), model, mn, cn, cfg, dirs)
            except (ArithmeticError, linalg.ContractError) as exc:
                raise TrainingDiverged(f"loss evaluation failed at {where}: {exc}",
                                       sample=_offender(x, xref, uref, idx)) from exc
            value = float(total.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at {where}", sample=_offender(x, xref, uref, idx))
            total.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
            adam_step(opt, [p.value for p in params], grads)
            total_sum += value
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch, "total": total_sum / batches}
        row.update({k: v / batches for k, v in sums.items()})
        history.append(row)
        log.info("epoch %d risk %.6g %s", epoch, row["total"],
                 " ".join(f"{k}={v:.4g}" for k, v in row.items() if k not in ("epoch", "total")))
        if callback is not None:
            callback(row, mn, cn)
        opt.lr *= config.lr_decay
    return TrainResult(mn, cn, history, config)


def pointwise_accuracy(model, mn, cn, rate, count=10_000, seed=12345, data=None):
    """Fraction of fresh samples where the contraction inequality holds exactly."""
    if data is None:
        data = sample_dataset(model, count, seed)
    return certloss.pointwise_accuracy(model, mn, cn, rate, *data)
