"""Training: exact TT contraction adjoints, Adam, and the end-to-end loop.

The loop minimizes the sum of two cross-entropies (sequence-level intent plus
token-level slots) over shuffled mini-batches, with deterministic behaviour
under a fixed seed: parameter order, shuffle order, and summation order are
all fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, pad_batch
from .model import ForwardTrace, TransformerModel
from .quant import MIN_SCALE
from .tt import TensorShapePlan, TTCores, _check_tt_cores


class DivergenceError(RuntimeError):
    """Loss or gradients became non-finite; carries the last good state."""

    def __init__(self, message: str, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    Quantizer scales are orders of magnitude smaller than core entries, and
    Adam steps of the shared learning rate make them oscillate hard enough to
    stall INT8 training, so by default they train at a tenth of the main
    learning rate.  Set ``scale_lr`` explicitly (e.g. to ``learning_rate``)
    to override.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    scale_lr: float | None = None  # None: 0.1 * learning_rate

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")

    @property
    def effective_scale_lr(self) -> float:
        return 0.1 * self.learning_rate if self.scale_lr is None else self.scale_lr


# ---------------------------------------------------------------------------
# Exact adjoints of the TT matvec (standalone; cross-checks the engine path)


def tt_matvec_vjp(cores, plan: TensorShapePlan, x: np.ndarray, upstream: np.ndarray):
    """Gradients of upstream . (W x) w.r.t. every core and x, without
    materializing W.

    Forward intermediates are recomputed by the same sweep used in the
    contraction; adjoints then flow back stage by stage.
    """
    core_list = list(cores.cores if isinstance(cores, TTCores) else cores)
    _check_tt_cores(core_list, plan)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (plan.cols,):
        raise ValueError(f"expected input of length {plan.cols}, got {x.shape}")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (plan.rows,):
        raise ValueError(f"expected upstream of length {plan.rows}, got {upstream.shape}")
    d = plan.order
    xp = x
    if plan.padded_cols != plan.cols:
        xp = np.concatenate([x, np.zeros(plan.padded_cols - plan.cols)])
    up = upstream
    if plan.padded_rows != plan.rows:
        up = np.concatenate([upstream, np.zeros(plan.padded_rows - plan.rows)])

    # forward sweep, saving inputs of every stage
    saved = []
    acc = xp.reshape(1, plan.padded_cols // plan.col_factors[-1], plan.col_factors[-1])
    saved.append(acc)
    acc = np.einsum("bln,rn->blr", acc, core_list[2 * d - 1][:, :, 0])
    for k in range(2 * d - 1, d, -1):
        core = core_list[k - 1]
        acc = acc.reshape(1, acc.shape[1] // core.shape[1], core.shape[1], core.shape[2])
        saved.append(acc)
        acc = np.einsum("blnr,qnr->blq", acc, core)
    acc = acc.reshape(1, -1, 1)
    for k in range(d, 0, -1):
        core = core_list[k - 1]
        saved.append(acc)
        acc = np.einsum("brt,qmr->bqmt", acc, core)
        acc = acc.reshape(1, core.shape[0], -1)

    grads = [None] * (2 * d)
    g = up.reshape(1, 1, core_list[0].shape[1], -1)  # adjoint of last stage output
    for k in range(1, d + 1):
        core = core_list[k - 1]
        inp = saved.pop()
        grads[k - 1] = np.einsum("bqmt,brt->qmr", g, inp)
        g = np.einsum("bqmt,qmr->brt", g, core)
        if k < d:
            # adjoint of (b, r_k, m_{k+1}*tail); split the flattened mode axis
            g = g.reshape(1, core_list[k].shape[0], core_list[k].shape[1], -1)
    # g is now the adjoint of the column-sweep result (b, r_d, 1)
    g = g.reshape(1, 1, -1)
    for k in range(d + 1, 2 * d):
        core = core_list[k - 1]
        inp = saved.pop()
        grads[k - 1] = np.einsum("blq,blnr->qnr", g, inp)
        g = np.einsum("blq,qnr->blnr", g, core)
        g = g.reshape(1, -1, core.shape[2])
    core = core_list[2 * d - 1]
    inp = saved.pop()
    grads[2 * d - 1] = np.einsum("blr,bln->rn", g, inp)[:, :, None]
    gx = np.einsum("blr,rn->bln", g, core[:, :, 0]).reshape(plan.padded_cols)
    return grads, gx[: plan.cols]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[ad.Tensor], grads: dict[int, np.ndarray], state: AdamState,
              config: TrainConfig, scale_params: set[int] = frozenset()):
    """One Adam update with bias correction.

    Quantizer scale parameters (ids in ``scale_params``) are clamped to stay
    positive after the step; they may use their own learning rate.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for p in params:
        g = grads.get(id(p))
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {p.name!r} at step {t}")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            state.v[key] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v[key]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[key], state.v[key] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        lr = config.effective_scale_lr if key in scale_params else config.learning_rate
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.data.dtype)
        if key in scale_params:
            p.data = np.maximum(p.data, MIN_SCALE).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Losses and metrics


def intent_slot_loss(trace: ForwardTrace, intents: np.ndarray, slots: np.ndarray) -> ad.Tensor:
    """Sum of intent cross-entropy (mean over batch) and slot cross-entropy
    (mean over unmasked tokens)."""
    b, s, k = trace.slot_logits.shape
    logp_int = ad.log_softmax(trace.intent_logits, axis=-1)
    picked = ad.take(ad.reshape(logp_int, (-1,)),
                     np.arange(b) * trace.intent_logits.shape[1] + intents, axis=0)
    intent_ce = ad.scale(ad.sum_all(picked), -1.0 / b)
    logp_slot = ad.log_softmax(trace.slot_logits, axis=-1)
    flat = ad.reshape(logp_slot, (-1,))
    mask = trace.mask.reshape(-1)
    slot_idx = np.arange(b * s) * k + np.clip(slots.reshape(-1), 0, k - 1)
    picked_slots = ad.take(flat, slot_idx, axis=0)
    m = ad.Tensor(mask.astype(flat.data.dtype))
    denom = max(mask.sum(), 1.0)
    slot_ce = ad.scale(ad.sum_all(ad.mul(picked_slots, m)), -1.0 / denom)
    return ad.add(intent_ce, slot_ce)


def evaluate(model: TransformerModel, dataset: Dataset, batch_size: int = 64) -> dict:
    """Intent accuracy and token-level slot F1 (micro, non-outside labels)."""
    correct = 0
    total = 0
    tp = fp = fn = 0
    for ids, mask, intents, slots in dataset.batches(batch_size, shuffle=False):
        with ad.no_grad():
            trace = model.forward(ids, mask, mode="train")
        pred_int = trace.intent_logits.data.argmax(axis=-1)
        correct += int((pred_int == intents).sum())
        total += len(intents)
        pred_slots = trace.slot_logits.data.argmax(axis=-1)
        valid = mask > 0
        gold = slots[valid]
        pred = pred_slots[valid]
        tp += int(((pred == gold) & (gold > 0)).sum())
        fp += int(((pred != gold) & (pred > 0)).sum())
        fn += int(((pred != gold) & (gold > 0)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"intent_accuracy": correct / max(total, 1), "slot_f1": f1}


# ---------------------------------------------------------------------------
# End-to-end loop


def snapshot_params(model: TransformerModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params()}


def restore_params(model: TransformerModel, snap: dict[str, np.ndarray]):
    for name, p in model.params():
        p.data = snap[name].copy()


def train_end_to_end(model: TransformerModel, train_set: Dataset, dev_set: Dataset | None,
                     config: TrainConfig, log=None) -> dict:
    """Train on the joint intent+slot objective; returns the training report."""
    if len(train_set) == 0:
        raise ValueError("training dataset is empty")
    params = [p for _, p in model.params()]
    scale_ids = {id(p) for p in model.scale_params()}
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    report = {"epochs": [], "config": {"lr": config.learning_rate, "epochs": config.epochs,
                                       "batch_size": config.batch_size, "seed": config.seed}}
    last_good = snapshot_params(model)
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        n_batches = 0
        order = rng.permutation(len(train_set))
        for ids, mask, intents, slots in train_set.batches(config.batch_size, order=order):
            for p in params:
                p.zero_grad()
            trace = model.forward(ids, mask, mode="train")
            loss = intent_slot_loss(trace, intents, slots)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(
                    f"training loss diverged at epoch {epoch}", last_good=last_good)
            grads = ad.backward(loss)
            adam_step(params, grads, state, config, scale_ids)
            epoch_loss += loss_val
            n_batches += 1
        entry = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1)}
        if dev_set is not None and len(dev_set):
            entry.update({f"dev_{k}": v for k, v in evaluate(model, dev_set).items()})
        report["epochs"].append(entry)
        last_good = snapshot_params(model)
        if log:
            log(entry)
    return report
