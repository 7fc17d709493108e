"""Training stages: minimax-entropy baseline and progressive self-training.

Each iteration draws one labeled batch (source plus labeled target,
uniform), one unlabeled batch, and, during self-training, one batch from
the trusted pseudo-labeled set.  The extractor descends
supervised + pseudo + lambda * entropy while the classifier descends
supervised + pseudo - lambda * entropy, both from gradients taken at the
same evaluation point (the entropy term's sign is flipped for the
classifier, gradient-reversal style).

During self-training the live soft labels of the trusted set are blended
with fresh predictions (momentum 0.9) after every validation phase; the
membership of the set never changes, only the labels do.  Training stops
at the iteration cap or after ``patience`` validations without a
validation-accuracy improvement, and the best-validation snapshot is the
result of a stage.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coremath import seeded_rng
from .datasets import SSDASplit
from .network import (
    GradientBundle,
    NetworkParams,
    add_scaled,
    anneal_lr,
    backward,
    forward,
    grads_from_jsonable,
    grads_to_jsonable,
    init_params,
    params_from_jsonable,
    params_to_jsonable,
    sgd_step,
    zero_grads,
)
from .pseudolabel import SelectedSet

STATE_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Hyperparameters for both training stages.

    ``label_momentum`` = 1.0 disables the refresh entirely (frozen labels,
    the vanilla self-training arm); ``use_hard_labels`` swaps the soft
    targets for one-hot hard pseudo labels.
    """

    lambda_: float = 0.1
    r_u: float = 0.2
    label_momentum: float = 0.9
    use_hard_labels: bool = False
    base_lr: float = 0.005
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    t_max: int = 5000
    t_val: int = 50
    patience: int = 10
    batch_labeled: int = 32
    batch_unlabeled: int = 32
    batch_pseudo: int = 64
    sequential_updates: bool = False
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    temperature: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.lambda_ < 0:
            problems.append(f"lambda must be nonnegative, got {self.lambda_}")
        if not 0.0 <= self.label_momentum <= 1.0:
            problems.append(f"label_momentum must be in [0, 1], got {self.label_momentum}")
        if not 0.0 < self.r_u <= 1.0:
            problems.append(f"r_u must be in (0, 1], got {self.r_u}")
        if self.t_val > self.t_max:
            problems.append(f"t_val {self.t_val} exceeds t_max {self.t_max}")
        if min(self.batch_labeled, self.batch_unlabeled, self.batch_pseudo) < 1:
            problems.append("batch sizes must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.base_lr <= 0:
            problems.append("base_lr must be positive")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))


@dataclass
class ValidationRecord:
    iteration: int
    val_acc: float
    loss_labeled: float
    loss_pseudo: float | None
    loss_entropy: float
    reliability: float | None


@dataclass
class TrainReport:
    history: list[ValidationRecord]
    stop_reason: str
    best_iteration: int
    best_val_acc: float
    final_test_acc: float | None = None


# -- loss values (forward only) --


def labeled_loss(params: NetworkParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross entropy of predictions against integer labels."""
    if len(x) == 0:
        raise ValueError("empty batch")
    return backward(x, params, "hard", y)[0]


def pseudo_label_loss(params: NetworkParams, x: np.ndarray, soft_targets: np.ndarray) -> float:
    """Mean cross entropy against fixed soft targets (no gradient into the targets)."""
    if len(x) == 0:
        raise ValueError("empty batch")
    return backward(x, params, "soft", soft_targets)[0]


def entropy_loss(params: NetworkParams, x: np.ndarray) -> float:
    """Mean prediction entropy over a batch."""
    if len(x) == 0:
        raise ValueError("empty batch")
    return backward(x, params, "entropy")[0]


def evaluate(params: NetworkParams, x: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of argmax predictions matching ground truth (evaluation context)."""
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    preds = np.argmax(forward(np.asarray(x, dtype=np.float64), params), axis=1)
    return float(np.mean(preds == np.asarray(truth)))


def momentum_update_labels(live: np.ndarray, fresh: np.ndarray, m: float) -> np.ndarray:
    """Blend live soft labels toward fresh predictions: m * live + (1 - m) * fresh."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"label momentum must be in [0, 1], got {m}")
    live = np.asarray(live, dtype=np.float64)
    single = live.ndim == 1
    live2 = np.atleast_2d(live)
    fresh2 = np.atleast_2d(np.asarray(fresh, dtype=np.float64))
    for name, mat in (("live", live2), ("fresh", fresh2)):
        sums = mat.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9) or np.any(mat < -1e-9) or np.any(mat > 1.0 + 1e-9):
            raise ValueError(f"simplex violation in {name} labels")
    out = m * live2 + (1.0 - m) * fresh2
    return out[0] if single else out


# -- one optimization step --


def minimax_gradients(
    params: NetworkParams,
    lambda_: float,
    labeled: tuple[np.ndarray, np.ndarray] | None = None,
    pseudo: tuple[np.ndarray, np.ndarray] | None = None,
    unlabeled: np.ndarray | None = None,
) -> tuple[dict, GradientBundle]:
    """Combined gradients for the two objectives, one shared evaluation point.

    Extractor rows carry d(L_sup + L_pseudo + lambda H); the classifier row
    carries d(L_sup + L_pseudo - lambda H).  Returns per-term loss values
    and the combined bundle.
    """
    if labeled is None and pseudo is None and unlabeled is None:
        raise ValueError("at least one batch is required")
    combined = zero_grads(params)
    losses: dict = {"labeled": None, "pseudo": None, "entropy": None}
    if labeled is not None:
        losses["labeled"], g = backward(labeled[0], params, "hard", labeled[1])
        add_scaled(combined, g)
    if pseudo is not None:
        losses["pseudo"], g = backward(pseudo[0], params, "soft", pseudo[1])
        add_scaled(combined, g)
    if unlabeled is not None:
        losses["entropy"], g = backward(unlabeled, params, "entropy")
        if lambda_ != 0.0:
            for (cw, cb), (gw, gb) in zip(combined.grad_layers, g.grad_layers):
                cw += lambda_ * gw
                cb += lambda_ * gb
            combined.grad_classifier -= lambda_ * g.grad_classifier
    return losses, combined


def minimax_step(
    params: NetworkParams,
    velocities: GradientBundle,
    lr: float,
    config: TrainConfig,
    labeled: tuple[np.ndarray, np.ndarray] | None = None,
    pseudo: tuple[np.ndarray, np.ndarray] | None = None,
    unlabeled: np.ndarray | None = None,
) -> dict:
    """Apply one SGD step of the minimax objectives; returns the per-term losses.

    Default is a simultaneous update of both groups from one gradient
    evaluation.  With ``sequential_updates`` the extractor moves first and
    the classifier's gradients are recomputed at the new point.
    """
    losses, combined = minimax_gradients(params, config.lambda_, labeled, pseudo, unlabeled)
    if not config.sequential_updates:
        sgd_step(params, combined, velocities, lr, config.sgd_momentum, config.weight_decay)
        return losses
    sgd_step(params, combined, velocities, lr, config.sgd_momentum, config.weight_decay, groups="extractor")
    _, recomputed = minimax_gradients(params, config.lambda_, labeled, pseudo, unlabeled)
    sgd_step(params, recomputed, velocities, lr, config.sgd_momentum, config.weight_decay, groups="classifier")
    return losses


# -- the training loop --


@dataclass
class TrainState:
    """Everything the loop owns; serializable so a run can pause and resume."""

    stage: str  # "baseline" or "selftrain"
    params: NetworkParams
    velocities: GradientBundle
    t_iter: int
    rng_states: dict
    live_soft: np.ndarray | None
    selected_indices: list[int] | None
    history: list[ValidationRecord] = field(default_factory=list)
    best_val_acc: float = -1.0
    best_iteration: int = 0
    best_params: NetworkParams | None = None
    validations_since_improve: int = 0
    stop_reason: str | None = None
    loss_sums: dict = field(default_factory=lambda: {"labeled": 0.0, "pseudo": 0.0, "entropy": 0.0, "count": 0})


def _batch_rngs(config: TrainConfig, stage: str) -> dict:
    return {role: seeded_rng(config.seed, "batch", stage, role) for role in ("labeled", "unlabeled", "pseudo")}


def init_train_state(
    split: SSDASplit,
    config: TrainConfig,
    stage: str,
    selected: SelectedSet | None = None,
    resume_params: NetworkParams | None = None,
) -> TrainState:
    """Fresh loop state; stage "selftrain" resumes from given params with new velocities."""
    config.validate()
    if stage not in ("baseline", "selftrain"):
        raise ValueError(f"unknown stage: {stage!r}")
    if stage == "selftrain":
        if selected is None or len(selected) == 0:
            raise ValueError("self-training requires a nonempty selected set")
        if resume_params is None:
            raise ValueError("self-training resumes from a baseline checkpoint")
        params = resume_params.copy()
        if config.use_hard_labels:
            live = np.zeros((len(selected), split.n_classes))
            live[np.arange(len(selected)), selected.hard_labels()] = 1.0
        else:
            live = selected.soft_label_matrix().copy()
        selected_indices = list(selected.index_set)
        # annotations are ordered (class, distance, index); align rows to index_set
        order = np.argsort([a.index for a in selected.annotations])
        live = live[order]
    else:
        params = init_params(
            input_dim=split.spec.input_dim,
            hidden_dims=tuple(config.hidden_dims),
            feature_dim=config.feature_dim,
            n_classes=split.n_classes,
            temperature=config.temperature,
            rng=seeded_rng(config.seed, "init"),
        )
        live = None
        selected_indices = None
    rngs = _batch_rngs(config, stage)
    return TrainState(
        stage=stage,
        params=params,
        velocities=zero_grads(params),
        t_iter=0,
        rng_states={role: rng.bit_generator.state for role, rng in rngs.items()},
        live_soft=live,
        selected_indices=selected_indices,
        best_params=params.copy(),
    )


def run_train_loop(
    split: SSDASplit,
    config: TrainConfig,
    state: TrainState,
    unlabeled_truth: np.ndarray | None = None,
    stop_iter: int | None = None,
) -> TrainState:
    """Advance the loop until convergence, t_max, or ``stop_iter``.

    ``unlabeled_truth`` is used only to stamp a reliability snapshot of the
    live hard labels into the history; it never influences an update.
    """
    labeled_x, labeled_y = split.labeled_xy()
    unlabeled_x = split.unlabeled_x()
    val_x, val_y = split.validation_xy()
    pseudo_x = unlabeled_x[state.selected_indices] if state.stage == "selftrain" else None

    rngs = _batch_rngs(config, state.stage)
    for role, rng in rngs.items():
        rng.bit_generator.state = state.rng_states[role]

    while state.stop_reason is None and state.t_iter < config.t_max:
        if stop_iter is not None and state.t_iter >= stop_iter:
            break
        state.t_iter += 1
        lr = anneal_lr(config.base_lr, state.t_iter / config.t_max)

        li = rngs["labeled"].integers(0, len(labeled_x), size=config.batch_labeled)
        ui = rngs["unlabeled"].integers(0, len(unlabeled_x), size=config.batch_unlabeled)
        pseudo_batch = None
        if state.stage == "selftrain":
            pi = rngs["pseudo"].integers(0, len(pseudo_x), size=config.batch_pseudo)
            pseudo_batch = (pseudo_x[pi], state.live_soft[pi])

        if config.lambda_ != 0.0:
            losses = minimax_step(
                state.params,
                state.velocities,
                lr,
                config,
                labeled=(labeled_x[li], labeled_y[li]),
                pseudo=pseudo_batch,
                unlabeled=unlabeled_x[ui],
            )
        else:
            # entropy term drops out of both objectives; keep its pre-step value for the report
            h_value = entropy_loss(state.params, unlabeled_x[ui])
            losses = minimax_step(
                state.params,
                state.velocities,
                lr,
                config,
                labeled=(labeled_x[li], labeled_y[li]),
                pseudo=pseudo_batch,
            )
            losses["entropy"] = h_value

        state.loss_sums["labeled"] += losses["labeled"]
        state.loss_sums["entropy"] += losses["entropy"]
        if losses["pseudo"] is not None:
            state.loss_sums["pseudo"] += losses["pseudo"]
        state.loss_sums["count"] += 1

        if state.t_iter % config.t_val == 0:
            _validation_phase(split, config, state, val_x, val_y, unlabeled_x, unlabeled_truth)

    if state.stop_reason is None and state.t_iter >= config.t_max:
        state.stop_reason = "t_max"
    state.rng_states = {role: rng.bit_generator.state for role, rng in rngs.items()}
    return state


def _validation_phase(
    split: SSDASplit,
    config: TrainConfig,
    state: TrainState,
    val_x: np.ndarray,
    val_y: np.ndarray,
    unlabeled_x: np.ndarray,
    unlabeled_truth: np.ndarray | None,
) -> None:
    val_acc = evaluate(state.params, val_x, val_y)

    # refresh live labels with the updated network, full pass over the set
    if state.stage == "selftrain" and config.label_momentum < 1.0:
        fresh = forward(unlabeled_x[state.selected_indices], state.params)
        state.live_soft = momentum_update_labels(state.live_soft, fresh, config.label_momentum)

    snapshot = None
    if state.stage == "selftrain" and unlabeled_truth is not None:
        live_hard = np.argmax(state.live_soft, axis=1)
        truth = np.asarray(unlabeled_truth)[state.selected_indices]
        snapshot = float(np.mean(live_hard == truth))

    count = max(state.loss_sums["count"], 1)
    state.history.append(
        ValidationRecord(
            iteration=state.t_iter,
            val_acc=val_acc,
            loss_labeled=state.loss_sums["labeled"] / count,
            loss_pseudo=(state.loss_sums["pseudo"] / count) if state.stage == "selftrain" else None,
            loss_entropy=state.loss_sums["entropy"] / count,
            reliability=snapshot,
        )
    )
    state.loss_sums = {"labeled": 0.0, "pseudo": 0.0, "entropy": 0.0, "count": 0}

    # snapshot the latest validation that ties the best accuracy (the most-trained
    # model among equals); patience counts only strict improvements
    if val_acc >= state.best_val_acc:
        if val_acc > state.best_val_acc:
            state.validations_since_improve = 0
        else:
            state.validations_since_improve += 1
        state.best_val_acc = val_acc
        state.best_iteration = state.t_iter
        state.best_params = state.params.copy()
    else:
        state.validations_since_improve += 1
    if state.validations_since_improve >= config.patience:
        state.stop_reason = "patience"


def _report_from_state(state: TrainState) -> TrainReport:
    return TrainReport(
        history=list(state.history),
        stop_reason=state.stop_reason or "t_max",
        best_iteration=state.best_iteration,
        best_val_acc=state.best_val_acc,
    )


def train_baseline(
    split: SSDASplit,
    config: TrainConfig,
    unlabeled_truth: np.ndarray | None = None,
) -> tuple[NetworkParams, TrainReport]:
    """Stage 1: minimax-entropy training without pseudo labels; best-val snapshot."""
    state = init_train_state(split, config, "baseline")
    state = run_train_loop(split, config, state, unlabeled_truth=unlabeled_truth)
    return state.best_params, _report_from_state(state)


def progressive_self_train(
    split: SSDASplit,
    selected: SelectedSet,
    checkpoint_params: NetworkParams,
    config: TrainConfig,
    unlabeled_truth: np.ndarray | None = None,
) -> tuple[NetworkParams, TrainReport]:
    """Stage 3: resume from the baseline and train on all three loss terms.

    The trusted set's membership is frozen; only its soft labels evolve
    through the momentum refresh at each validation phase.
    """
    state = init_train_state(split, config, "selftrain", selected=selected, resume_params=checkpoint_params)
    frozen = list(state.selected_indices)
    state = run_train_loop(split, config, state, unlabeled_truth=unlabeled_truth)
    assert state.selected_indices == frozen, "selected-set membership must not change"
    return state.best_params, _report_from_state(state)


# -- report and state serialization --


def report_csv_lines(report: TrainReport) -> str:
    lines = ["iter,val_acc,L_l,L_pl,H,reliability"]
    for row in report.history:
        lines.append(
            ",".join(
                [
                    str(row.iteration),
                    repr(float(row.val_acc)),
                    repr(float(row.loss_labeled)),
                    "" if row.loss_pseudo is None else repr(float(row.loss_pseudo)),
                    repr(float(row.loss_entropy)),
                    "" if row.reliability is None else repr(float(row.reliability)),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def report_to_jsonable(report: TrainReport) -> dict:
    return {
        "history": [asdict(row) for row in report.history],
        "stop_reason": report.stop_reason,
        "best_iteration": report.best_iteration,
        "best_val_acc": report.best_val_acc,
        "final_test_acc": report.final_test_acc,
    }


def save_report(report: TrainReport, json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(json.dumps(report_to_jsonable(report)), encoding="utf-8")
    Path(csv_path).write_text(report_csv_lines(report), encoding="utf-8")


def state_to_jsonable(state: TrainState) -> dict:
    return {
        "format_version": STATE_FORMAT_VERSION,
        "stage": state.stage,
        "params": params_to_jsonable(state.params),
        "velocities": grads_to_jsonable(state.velocities),
        "t_iter": state.t_iter,
        "rng_states": state.rng_states,
        "live_soft": None if state.live_soft is None else state.live_soft.tolist(),
        "selected_indices": state.selected_indices,
        "history": [asdict(row) for row in state.history],
        "best_val_acc": state.best_val_acc,
        "best_iteration": state.best_iteration,
        "best_params": None if state.best_params is None else params_to_jsonable(state.best_params),
        "validations_since_improve": state.validations_since_improve,
        "stop_reason": state.stop_reason,
        "loss_sums": state.loss_sums,
    }


def state_from_jsonable(obj: dict) -> TrainState:
    if obj.get("format_version") != STATE_FORMAT_VERSION:
        raise ValueError(f"train state version {obj.get('format_version')} != {STATE_FORMAT_VERSION}")
    return TrainState(
        stage=obj["stage"],
        params=params_from_jsonable(obj["params"]),
        velocities=grads_from_jsonable(obj["velocities"]),
        t_iter=obj["t_iter"],
        rng_states=obj["rng_states"],
        live_soft=None if obj["live_soft"] is None else np.asarray(obj["live_soft"], dtype=np.float64),
        selected_indices=obj["selected_indices"],
        history=[ValidationRecord(**row) for row in obj["history"]],
        best_val_acc=obj["best_val_acc"],
        best_iteration=obj["best_iteration"],
        best_params=None if obj["best_params"] is None else params_from_jsonable(obj["best_params"]),
        validations_since_improve=obj["validations_since_improve"],
        stop_reason=obj["stop_reason"],
        loss_sums=obj["loss_sums"],
    )


def save_train_state(path: str | Path, state: TrainState) -> None:
    Path(path).write_text(json.dumps(state_to_jsonable(state)), encoding="utf-8")


def load_train_state(path: str | Path) -> TrainState:
    return state_from_jsonable(json.loads(Path(path).read_text(encoding="utf-8")))
