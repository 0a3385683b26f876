"""Training loop: optimizers, LR schedule, per-epoch decay factors, metrics,
checkpointing, and the automatic prune once every factor reaches zero.

Clock conventions: the epoch index is zero-based and counts completed epochs,
so the factors and learning rate used while running epoch e are the schedule
functions evaluated at e. With ``decay.unit = iteration`` the decay clock
counts optimizer steps instead, still sampled at epoch boundaries. The first
epoch boundary at which every factor is exactly zero triggers the prune: the
FP branches are deleted, both networks are evaluated on the validation split,
and their predictions are asserted equal sample by sample.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, softmax_xent
from .checkpoint import Checkpoint
from .config import LRSchedule, RunSetup
from .data import Dataset, iter_batches
from .decay import factor_for_layer
from .netspec import Network, build_network, prune_network

log = logging.getLogger("expnet.trainer")


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; carries the last healthy checkpoint."""

    def __init__(self, message: str, epoch: int, last_good: Checkpoint | None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


# -------------------------------------------------------------- optimizers


def _check_grad(name: str, grad: np.ndarray | None) -> np.ndarray:
    if grad is None:
        raise ValueError(f"parameter {name!r} received no gradient")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    return grad


class SGDMomentum:
    """v <- momentum * v + g;  p <- p - lr * v."""

    kind = "sgd-momentum"

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr: float, scales=None) -> None:
        scales = scales or {}
        for name, p in params.items():
            g = _check_grad(name, grads[name])
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity.get(name, np.zeros_like(p.data)) + g
            self.velocity[name] = v
            p.data = p.data - lr * scales.get(name, 1.0) * v

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"v.{name}": v for name, v in self.velocity.items()}

    def state_scalars(self) -> dict:
        return {"kind": self.kind}

    def load_state(self, tensors, scalars) -> None:
        if scalars.get("kind") != self.kind:
            raise ValueError(f"checkpoint optimizer is {scalars.get('kind')!r}, not {self.kind}")
        self.velocity = {
            name.removeprefix("v."): np.array(v) for name, v in tensors.items()
        }


class Adam:
    """Bias-corrected first/second moment update."""

    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr: float, scales=None) -> None:
        scales = scales or {}
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = _check_grad(name, grads[name])
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.beta1 * self.m.get(name, np.zeros_like(p.data)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(p.data)) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data = p.data - lr * scales.get(name, 1.0) * update

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{name}": v for name, v in self.m.items()}
        out.update({f"v.{name}": v for name, v in self.v.items()})
        return out

    def state_scalars(self) -> dict:
        return {"kind": self.kind, "t": self.t}

    def load_state(self, tensors, scalars) -> None:
        if scalars.get("kind") != self.kind:
            raise ValueError(f"checkpoint optimizer is {scalars.get('kind')!r}, not {self.kind}")
        self.t = int(scalars["t"])
        self.m = {n.removeprefix("m."): np.array(v) for n, v in tensors.items()
                  if n.startswith("m.")}
        self.v = {n.removeprefix("v."): np.array(v) for n, v in tensors.items()
                  if n.startswith("v.")}


def make_optimizer(cfg) -> SGDMomentum | Adam:
    if cfg.optimizer == "adam":
        return Adam(weight_decay=cfg.weight_decay)
    return SGDMomentum(momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def lr_at(schedule: LRSchedule, epoch: int) -> float:
    """Piecewise-constant: initial divided by each divisor whose milestone passed."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = schedule.initial
    for milestone, divisor in zip(schedule.milestones, schedule.divisors):
        if epoch >= milestone:
            lr /= divisor
    return lr


# -------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalResult:
    loss: float
    top1: float
    top5: float | None
    n: int


def _batch_logits(net: Network, images: np.ndarray, factors, batch_size: int):
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        yield start, net.forward(Tensor(xb), factors, mode="infer").data


def evaluate(net: Network, dataset: Dataset, factors=None, batch_size: int = 256
             ) -> EvalResult:
    """Inference-mode loss and accuracy; top-5 only when there are >= 5 classes."""
    total_loss = 0.0
    hits1 = 0
    hits5 = 0
    want_top5 = dataset.num_classes >= 5
    for start, logits in _batch_logits(net, dataset.images, factors, batch_size):
        labels = dataset.labels[start : start + len(logits)]
        loss = softmax_xent(Tensor(logits), labels)
        total_loss += float(loss.data) * len(logits)
        hits1 += int(np.sum(np.argmax(logits, axis=1) == labels))
        if want_top5:
            top5 = np.argsort(logits, axis=1)[:, -5:]
            hits5 += int(np.sum(np.any(top5 == labels[:, None], axis=1)))
    n = len(dataset.images)
    return EvalResult(
        loss=total_loss / n,
        top1=hits1 / n,
        top5=hits5 / n if want_top5 else None,
        n=n,
    )


def predictions(net: Network, dataset: Dataset, factors=None, batch_size: int = 256
                ) -> np.ndarray:
    out = np.empty(len(dataset.images), dtype=np.int64)
    for start, logits in _batch_logits(net, dataset.images, factors, batch_size):
        out[start : start + len(logits)] = np.argmax(logits, axis=1)
    return out


# ------------------------------------------------------------ metrics CSV


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, str):
        return value
    return repr(float(value))


def metrics_csv(rows: list[dict], expanded_ids: tuple[str, ...]) -> str:
    header = "epoch,phase,loss,top1,top5,lr" + "".join(f",f.{lid}" for lid in expanded_ids)
    lines = [header]
    for row in rows:
        cells = [str(row["epoch"]), row["phase"], _fmt(row["loss"]), _fmt(row["top1"]),
                 _fmt(row["top5"]), _fmt(row["lr"])]
        cells.extend(_fmt(row[f"f.{lid}"]) for lid in expanded_ids)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- the train op


@dataclass
class TrainResult:
    rows: list[dict]
    csv_text: str
    final: Checkpoint
    pruned: Checkpoint | None
    prune_report: dict | None


def _factors_at(setup: RunSetup, clock: float) -> dict[str, float]:
    ids = setup.spec.expanded_ids()
    return {
        lid: factor_for_layer(setup.train.decay, lid, clock, ids) for lid in ids
    }


def _train_rng(seed: int) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(b"train-batches").digest()[:8], "little")
    return np.random.default_rng([seed, tag])


def _lr_scales(net: Network, fp_lr_scale: float) -> dict[str, float]:
    if fp_lr_scale == 1.0:
        return {}
    return {name: fp_lr_scale for name in net.params() if ".fp." in name}


def _snapshot(net: Network, optimizer, rng, epoch: int, iterations: int,
              rows: list[dict], pruned_done: bool, config_text: str) -> Checkpoint:
    tensors = dict(net.tensor_table())
    for name, arr in optimizer.state_tensors().items():
        tensors[f"opt.{name}"] = arr
    state = {
        "epoch": epoch,
        "iterations": iterations,
        "optimizer": optimizer.state_scalars(),
        "rng": rng.bit_generator.state,
        "metrics": rows,
        "pruned_done": pruned_done,
    }
    # serialize through JSON once so resumed state is exactly what a loader sees
    state = json.loads(json.dumps(state))
    return Checkpoint(config_text=config_text, tensors=tensors, state=state)


def restore(net: Network, optimizer, rng, ckpt: Checkpoint) -> tuple[int, int, list, bool]:
    """Load a checkpoint into net/optimizer/rng; returns (epoch, iterations, rows, pruned)."""
    model = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    opt_tensors = {k.removeprefix("opt."): v for k, v in ckpt.tensors.items()
                   if k.startswith("opt.")}
    net.load_tensor_table(model)
    optimizer.load_state(opt_tensors, ckpt.state["optimizer"])
    rng.bit_generator.state = ckpt.state["rng"]
    return (
        int(ckpt.state["epoch"]),
        int(ckpt.state["iterations"]),
        list(ckpt.state["metrics"]),
        bool(ckpt.state["pruned_done"]),
    )


def _resume_compatible(old_text: str, new_text: str) -> bool:
    """Identical configs up to the epoch target, which resume may extend."""

    def strip_epochs(text: str) -> list[str]:
        return [line for line in text.splitlines()
                if not line.startswith("train.epochs ")]

    return strip_epochs(old_text) == strip_epochs(new_text)


def _pruned_config_text(setup: RunSetup) -> str:
    from .config import render_config

    raw = dict(setup.raw)
    raw["exp.layers"] = "none"
    raw["decay.overrides"] = ""
    return render_config(raw)


def _prune_and_compare(net: Network, val_ds: Dataset, factors: dict[str, float],
                       epoch: int) -> tuple[Network, dict]:
    """Prune and assert the pruned net predicts identically to the expanded net."""
    pruned = prune_network(net, factors)
    expanded_eval = evaluate(net, val_ds, factors)
    pruned_eval = evaluate(pruned, val_ds)
    pred_expanded = predictions(net, val_ds, factors)
    pred_pruned = predictions(pruned, val_ds)
    if not np.array_equal(pred_expanded, pred_pruned):
        bad = int(np.sum(pred_expanded != pred_pruned))
        raise RuntimeError(
            f"pruned network disagrees with expanded network on {bad} of "
            f"{len(pred_pruned)} validation samples at epoch {epoch}"
        )
    report = {
        "epoch": epoch,
        "expanded_top1": expanded_eval.top1,
        "pruned_top1": pruned_eval.top1,
        "expanded_loss": expanded_eval.loss,
        "pruned_loss": pruned_eval.loss,
        "params_before": net.param_count(),
        "params_after": pruned.param_count(),
    }
    log.info(
        "pruned at epoch %d: top1 %.4f (expanded %.4f), params %d -> %d",
        epoch, pruned_eval.top1, expanded_eval.top1,
        report["params_before"], report["params_after"],
    )
    return pruned, report


def _pruned_checkpoint(pruned: Network, setup: RunSetup, epoch: int) -> Checkpoint:
    return Checkpoint(
        config_text=_pruned_config_text(setup),
        tensors=dict(pruned.tensor_table()),
        state={"epoch": epoch, "iterations": 0, "pruned_done": True,
               "optimizer": {"kind": "none"}, "rng": None, "metrics": []},
    )


def train(setup: RunSetup, train_ds: Dataset, val_ds: Dataset,
          resume_from: Checkpoint | None = None) -> TrainResult:
    """Run the full loop; deterministic in the seed, resumable bit-for-bit."""
    cfg = setup.train
    spec = setup.spec
    config_text = setup.config_text()

    net = build_network(spec, cfg.seed)
    optimizer = make_optimizer(cfg)
    rng = _train_rng(cfg.seed)
    scales = _lr_scales(net, cfg.fp_lr_scale)
    expanded_ids = spec.expanded_ids()
    use_iterations = cfg.decay.unit == "iteration"

    start_epoch, iterations, rows, pruned_done = 0, 0, [], False
    pruned_ckpt: Checkpoint | None = None
    prune_report: dict | None = None
    if resume_from is not None:
        if not _resume_compatible(resume_from.config_text, config_text):
            raise ValueError(
                "checkpoint was written with a different configuration "
                "(only train.epochs may change on resume)"
            )
        start_epoch, iterations, rows, pruned_done = restore(net, optimizer, rng, resume_from)
        if start_epoch >= cfg.epochs:
            raise ValueError(
                f"checkpoint already covers {start_epoch} epochs, nothing to resume"
            )

    last_good = _snapshot(
        net, optimizer, rng, start_epoch, iterations, rows, pruned_done, config_text
    )

    params = net.params()
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(cfg.lr, epoch)
        clock = iterations if use_iterations else epoch
        factors = _factors_at(setup, clock)
        try:
            loss_sum = 0.0
            hits1 = 0
            hits5 = 0
            seen = 0
            want_top5 = train_ds.num_classes >= 5
            for xb, yb in iter_batches(train_ds, cfg.batch_size, rng,
                                       augment_batches=cfg.augment, aug_rng=rng):
                if use_iterations:
                    factors = _factors_at(setup, iterations)
                logits = net.forward(Tensor(xb), factors, mode="train")
                loss = softmax_xent(logits, yb)
                loss.backward()
                grads = {name: p.grad for name, p in params.items()}
                optimizer.step(params, grads, lr, scales)
                for p in params.values():
                    p.grad = None
                iterations += 1
                loss_sum += float(loss.data) * len(yb)
                pred = np.argmax(logits.data, axis=1)
                hits1 += int(np.sum(pred == yb))
                if want_top5:
                    top5 = np.argsort(logits.data, axis=1)[:, -5:]
                    hits5 += int(np.sum(np.any(top5 == yb[:, None], axis=1)))
                seen += len(yb)
        except NonFiniteError as exc:
            raise DivergenceError(
                f"training diverged during epoch {epoch}: {exc}", epoch, last_good
            ) from exc

        row = {
            "epoch": epoch, "phase": "train",
            "loss": loss_sum / seen, "top1": hits1 / seen,
            "top5": hits5 / seen if want_top5 else None, "lr": lr,
        }
        for lid in expanded_ids:
            row[f"f.{lid}"] = factors[lid]
        rows.append(row)

        val = evaluate(net, val_ds, factors)
        val_row = {
            "epoch": epoch, "phase": "val",
            "loss": val.loss, "top1": val.top1, "top5": val.top5, "lr": lr,
        }
        for lid in expanded_ids:
            val_row[f"f.{lid}"] = factors[lid]
        rows.append(val_row)
        log.info("epoch %d: train loss %.4f, val top1 %.4f", epoch, row["loss"], val.top1)

        # epoch boundary: decay clock has advanced; prune once all factors hit zero
        boundary_clock = iterations if use_iterations else epoch + 1
        boundary_factors = _factors_at(setup, boundary_clock)
        if expanded_ids and not pruned_done and all(
            f == 0.0 for f in boundary_factors.values()
        ):
            _, prune_report = _prune_and_compare(net, val_ds, boundary_factors, epoch + 1)
            pruned_done = True

        last_good = _snapshot(
            net, optimizer, rng, epoch + 1, iterations, rows, pruned_done, config_text
        )

    if pruned_done:
        # decay factors stay at zero once they hit it, so the final state is
        # prunable too; the shipped artifact reflects the fully trained net
        final_clock = iterations if use_iterations else cfg.epochs
        pruned_net, final_report = _prune_and_compare(
            net, val_ds, _factors_at(setup, final_clock), cfg.epochs
        )
        pruned_ckpt = _pruned_checkpoint(pruned_net, setup, cfg.epochs)
        if prune_report is None:
            prune_report = final_report

    return TrainResult(
        rows=rows,
        csv_text=metrics_csv(rows, expanded_ids),
        final=last_good,
        pruned=pruned_ckpt,
        prune_report=prune_report,
    )
