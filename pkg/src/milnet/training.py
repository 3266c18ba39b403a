"""Adam, the step-halving learning-rate schedule and the three regimes.

separate
    WHEN and WHO are independent networks, each with its own sampler.
joint
    One graph (shared trunk, two heads) fed by a single minibatch stream;
    the loss is ``w_when * L_when + w_who * L_who + l2``.
tied
    WHEN and WHO reference the same trunk tensors but keep their own
    heads, samplers and Adam moments.  Each epoch runs a full WHEN epoch
    and then a full WHO epoch.

MIL losses are averaged over the minibatch (rather than summed over
bags) so the learning rate means the same thing at any batch size.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from milnet import layers as ly
from milnet import losses
from milnet import metrics
from milnet.data import FeatureSet, make_minibatch, make_sampler
from milnet.tensor import NonFiniteError, Tape

log = logging.getLogger(__name__)

REGIMES = ("separate", "joint", "tied")
INPUTS = ("hnh", "plain")

# salts for deriving per-network generators from the plan seed
_SEED_WHEN, _SEED_WHO, _SEED_JOINT = 11, 12, 13


class TrainingError(RuntimeError):
    pass


def lr_at(epoch, initial=1e-5, period=20, floor=1e-8):
    """``max(initial * 2**-(epoch // period), floor)``."""
    return max(initial / 2 ** (epoch // period), floor)


@dataclass
class TrainPlan:
    regime: str = "separate"
    when_input: str = "hnh"
    who_input: str = "plain"
    when_loss: str = "mmm"
    loss_weights: tuple = (0.5, 5.0)
    epochs: int = 100
    seed: int = 0
    initial_lr: float = 1e-5
    lr_halving_period: int = 20
    lr_floor: float = 1e-8
    batch_size: int = 8
    fmaps: int = 64
    gru_units: int = 64
    dense_units: int = 64
    mean_ratio: float = 0.5
    who_phase: bool = True
    patience: int | None = None

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for name in ("when_input", "who_input"):
            if getattr(self, name) not in INPUTS:
                raise ValueError(f"{name} must be one of {INPUTS}, got {getattr(self, name)!r}")
        losses.get_loss(self.when_loss)
        if self.regime == "joint" and self.when_input != self.who_input:
            raise ValueError("joint training feeds both heads from one minibatch stream; "
                             "when_input and who_input must match")
        if len(self.loss_weights) != 2 or min(self.loss_weights) <= 0:
            raise ValueError(f"loss_weights must be two positive numbers, got {self.loss_weights}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr(self, epoch):
        return lr_at(epoch, self.initial_lr, self.lr_halving_period, self.lr_floor)

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    """Bias-corrected Adam; l2 enters through the loss gradient."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.lr = None

    def step(self, params, grads, lr):
        """``params``/``grads`` map names to Tensors / arrays; updates in place."""
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
        self.t += 1
        self.lr = lr
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if p.data.shape != g.shape:
                raise ValueError(f"{name}: gradient {g.shape} vs parameter {p.data.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


# -- per-batch objectives ----------------------------------------------------


def _when_objective(plan):
    def fn(pred, batch):
        return losses.when_batch_loss(pred, batch.lengths, batch.when_targets, plan.when_loss,
                                      **({"mean_ratio": plan.mean_ratio}
                                         if plan.when_loss == "mmm" else {}))
    return fn


def _who_objective(pred, batch):
    return losses.who_batch_loss(pred, batch.who_targets)


def _apply(model, opt, total, tape, lr):
    params = model.parameters()
    grads = tape.backward(total, list(params.values()), accumulate=False)
    named = {name: grads[p] for name, p in params.items()}
    opt.step(params, named, lr)


def train_step(model, batch, objective, opt, lr):
    """One update of a single-task graph.  Returns (total, task, reg)."""
    with Tape() as tape:
        pred = model.forward(batch.features, train=True)
        task = objective(pred, batch)
        reg = ly.regularisation(model)
        total = task + reg
    _apply(model, opt, total, tape, lr)
    return total.item(), task.item(), reg.item()


def joint_step(model, batch, plan, opt, lr):
    """One update of the joint graph; returns the loss components."""
    w_when, w_who = plan.loss_weights
    with Tape() as tape:
        p_when, p_who = model.forward(batch.features, train=True)
        l_when = _when_objective(plan)(p_when, batch)
        l_who = _who_objective(p_who, batch)
        reg = ly.regularisation(model)
        total = l_when * w_when + l_who * w_who + reg
    out = {"total": total.item(), "when": l_when.item(), "who": l_who.item(), "reg": reg.item()}
    _apply(model, opt, total, tape, lr)
    return out


# -- regimes -----------------------------------------------------------------


@dataclass
class RunResult:
    plan: TrainPlan
    models: dict
    history: list = field(default_factory=list)
    batch_log: list = field(default_factory=list)


def _rng(plan, salt):
    return np.random.default_rng([plan.seed, salt])


def _new_when(plan, trunk=None):
    return ly.build_when(fmaps=plan.fmaps, gru_units=plan.gru_units,
                         dense_units=plan.dense_units, seed=_rng(plan, _SEED_WHEN), trunk=trunk)


def _new_who(plan, num_labels, trunk=None):
    return ly.build_who(num_labels=num_labels, fmaps=plan.fmaps, seed=_rng(plan, _SEED_WHO),
                        trunk=trunk)


def _run_epoch(model, fs, sampler, epoch, objective, opt, lr):
    totals = []
    for idx in sampler.epoch(epoch):
        try:
            totals.append(train_step(model, make_minibatch(fs, idx), objective, opt, lr)[0])
        except NonFiniteError as err:
            raise TrainingError(f"{model.kind} epoch {epoch}: {err}") from err
    return float(np.mean(totals)) if totals else float("nan")


class _Stopper:
    def __init__(self, patience):
        self.patience = patience
        self.best = -math.inf
        self.bad = 0

    def update(self, score):
        """True once ``patience`` epochs pass without improvement."""
        if self.patience is None or score is None:
            return False
        if score > self.best:
            self.best, self.bad = score, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def _val(kind, model, val):
    if val is None:
        return None
    if kind == "when":
        return metrics.eval_when(model, val)["auc_micro"] if val.strong_grids is not None else None
    return metrics.eval_who(model, val)["auc_micro"]


def _fit_single(kind, model, plan, fs, val, input_mode, objective):
    sampler = make_sampler(input_mode, fs, plan.batch_size, plan.seed)
    opt = Adam()
    stopper = _Stopper(plan.patience)
    rows = []
    for epoch in range(plan.epochs):
        lr = plan.lr(epoch)
        loss = _run_epoch(model, fs, sampler, epoch, objective, opt, lr)
        score = _val(kind, model, val)
        rows.append({"epoch": epoch, "lr": lr, f"{kind}_loss": loss, f"{kind}_auc": score})
        log.info("%s epoch %d lr %.3g loss %.5f auc %s", kind, epoch, lr, loss, score)
        if stopper.update(score):
            break
    return rows


def _merge(*histories):
    rows = {}
    for hist in histories:
        for row in hist:
            rows.setdefault(row["epoch"], {}).update(row)
    return [rows[k] for k in sorted(rows)]


def run_separate(plan: TrainPlan, train: FeatureSet, val: FeatureSet | None = None) -> RunResult:
    if plan.regime != "separate":
        raise ValueError(f"run_separate needs regime 'separate', got {plan.regime!r}")
    when = _new_when(plan)
    who = _new_who(plan, len(train.classes))
    h_when = _fit_single("when", when, plan, train, val, plan.when_input, _when_objective(plan))
    h_who = _fit_single("who", who, plan, train, val, plan.who_input, _who_objective)
    return RunResult(plan, {"when": when, "who": who}, _merge(h_when, h_who))


def run_joint(plan: TrainPlan, train: FeatureSet, val: FeatureSet | None = None) -> RunResult:
    if plan.regime != "joint":
        raise ValueError(f"run_joint needs regime 'joint', got {plan.regime!r}")
    model = ly.build_joint(num_labels=len(train.classes), fmaps=plan.fmaps,
                           gru_units=plan.gru_units, dense_units=plan.dense_units,
                           seed=_rng(plan, _SEED_JOINT))
    sampler = make_sampler(plan.when_input, train, plan.batch_size, plan.seed)
    opt = Adam()
    stopper = _Stopper(plan.patience)
    result = RunResult(plan, {"joint": model})
    for epoch in range(plan.epochs):
        lr = plan.lr(epoch)
        parts = []
        for idx in sampler.epoch(epoch):
            try:
                comp = joint_step(model, make_minibatch(train, idx), plan, opt, lr)
            except NonFiniteError as err:
                raise TrainingError(f"joint epoch {epoch}: {err}") from err
            comp["epoch"] = epoch
            parts.append(comp)
        result.batch_log.extend(parts)
        row = {"epoch": epoch, "lr": lr,
               "total_loss": float(np.mean([p["total"] for p in parts])),
               "when_loss": float(np.mean([p["when"] for p in parts])),
               "who_loss": float(np.mean([p["who"] for p in parts])),
               "when_auc": _val("when", model.view("when"), val),
               "who_auc": _val("who", model.view("who"), val)}
        result.history.append(row)
        log.info("joint epoch %d lr %.3g loss %.5f", epoch, lr, row["total_loss"])
        scores = [s for s in (row["when_auc"], row["who_auc"]) if s is not None]
        if stopper.update(float(np.mean(scores)) if scores else None):
            break
    return result


def run_tied(plan: TrainPlan, train: FeatureSet, val: FeatureSet | None = None) -> RunResult:
    if plan.regime != "tied":
        raise ValueError(f"run_tied needs regime 'tied', got {plan.regime!r}")
    when = _new_when(plan)
    who = _new_who(plan, len(train.classes), trunk=when.trunk)
    s_when = make_sampler(plan.when_input, train, plan.batch_size, plan.seed)
    s_who = make_sampler(plan.who_input, train, plan.batch_size, plan.seed)
    o_when, o_who = Adam(), Adam()
    f_when = _when_objective(plan)
    stopper = _Stopper(plan.patience)
    result = RunResult(plan, {"when": when, "who": who})
    for epoch in range(plan.epochs):
        lr = plan.lr(epoch)
        row = {"epoch": epoch, "lr": lr}
        row["when_loss"] = _run_epoch(when, train, s_when, epoch, f_when, o_when, lr)
        if plan.who_phase:
            row["who_loss"] = _run_epoch(who, train, s_who, epoch, _who_objective, o_who, lr)
        row["when_auc"] = _val("when", when, val)
        row["who_auc"] = _val("who", who, val) if plan.who_phase else None
        result.history.append(row)
        log.info("tied epoch %d lr %.3g when %.5f who %s", epoch, lr, row["when_loss"],
                 row.get("who_loss"))
        scores = [s for s in (row["when_auc"], row["who_auc"]) if s is not None]
        if stopper.update(float(np.mean(scores)) if scores else None):
            break
    return result


def run(plan: TrainPlan, train: FeatureSet, val: FeatureSet | None = None) -> RunResult:
    return {"separate": run_separate, "joint": run_joint, "tied": run_tied}[plan.regime](
        plan, train, val)


# -- run directories ---------------------------------------------------------

HISTORY_FIELDS = ["epoch", "lr", "total_loss", "when_loss", "who_loss", "when_auc", "who_auc"]


def task_models(models):
    """{'when': graph, 'who': graph} for any regime's result."""
    if "joint" in models:
        return {"when": models["joint"].view("when"), "who": models["joint"].view("who")}
    return dict(models)


def save_run(result: RunResult, run_dir, extra=None):
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = result.plan.to_dict()
    if extra:
        plan.update(extra)
    (out / "plan.json").write_text(json.dumps(plan, indent=1, sort_keys=True) + "\n")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in result.history:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float)
                            else row[k]) for k in HISTORY_FIELDS})
    for name, model in result.models.items():
        ly.save_checkpoint(model, out / f"{name}.ckpt")


def load_run_models(run_dir):
    """Rebuild task graphs from a run directory's checkpoints."""
    d = Path(run_dir)
    plan = json.loads((d / "plan.json").read_text())
    if (d / "joint.ckpt").is_file():
        models = {"joint": ly.load_checkpoint(d / "joint.ckpt")}
    else:
        models = {k: ly.load_checkpoint(d / f"{k}.ckpt") for k in ("when", "who")
                  if (d / f"{k}.ckpt").is_file()}
    if not models:
        raise FileNotFoundError(f"{d}: no checkpoints found")
    return plan, task_models(models)
