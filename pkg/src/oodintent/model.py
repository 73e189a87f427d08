"""The in-domain intent classifier: a two-layer feed-forward head over
pooled embedding features, with hand-written gradients, Adam, and the
training objectives (plain cross-entropy, energy margin, entropy
regularization, dual energy bound, and K+1 classification).

Training is single-threaded and deterministic per seed; inference on a
frozen model is pure and safe for parallel evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import detect
from .data import (
    OOD_CLASS,
    DatasetBundle,
    EmbeddingTable,
    derive_seed,
    encode_utterances,
    label_array,
)
from .errors import ConfigError, TrainingError
from .numeric import row_logsumexp, row_softmax

OBJECTIVES = ("ce", "nplusone", "margin", "entropy", "bound")
SUPERVISED_OBJECTIVES = ("nplusone", "margin", "entropy", "bound")
CHECKPOINT_FORMAT_VERSION = 1

_PARAM_NAMES = ("w1", "b1", "w2", "b2")


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class ClassifierModel:
    """Two affine layers with a rectifier between; dropout on the hidden layer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.5

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[0]

    def hidden(self, X) -> np.ndarray:
        """Post-rectifier hidden activations (inference mode, no dropout)."""
        xm = np.asarray(X, dtype=np.float64)
        if xm.ndim != 2 or xm.shape[1] != self.input_dim:
            raise ValueError(f"inputs have shape {xm.shape}, expected (n, {self.input_dim})")
        return _relu(xm @ self.w1.T + self.b1)

    def logits(self, X) -> np.ndarray:
        """Class logits per row (inference mode)."""
        return self.hidden(X) @ self.w2.T + self.b2

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name in _PARAM_NAMES:
            setattr(self, name, params[name])

    def clone(self) -> "ClassifierModel":
        return ClassifierModel(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            dropout_rate=self.dropout_rate,
        )


def init_classifier(
    input_dim: int,
    hidden_dim: int,
    num_classes: int,
    dropout_rate: float,
    rng: np.random.Generator,
) -> ClassifierModel:
    if min(input_dim, hidden_dim, num_classes) < 1:
        raise ValueError("all dimensions must be positive")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    w1 = rng.normal(0.0, math.sqrt(2.0 / input_dim), size=(hidden_dim, input_dim))
    w2 = rng.normal(0.0, math.sqrt(1.0 / hidden_dim), size=(num_classes, hidden_dim))
    return ClassifierModel(
        w1=w1,
        b1=np.zeros(hidden_dim),
        w2=w2,
        b2=np.zeros(num_classes),
        dropout_rate=dropout_rate,
    )


def forward_logits(
    model: ClassifierModel, x, training: bool = False, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Logits for a single feature vector.

    With training=True, inverted dropout is applied to the hidden layer
    (mask drawn from rng, activations rescaled so the expectation is
    unchanged); inference is deterministic.
    """
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1 or xv.shape[0] != model.input_dim:
        raise ValueError(f"input has shape {xv.shape}, expected ({model.input_dim},)")
    h = _relu(model.w1 @ xv + model.b1)
    if training and model.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training-mode forward needs a random generator")
        keep = (rng.random(model.hidden_dim) >= model.dropout_rate) / (1.0 - model.dropout_rate)
        h = h * keep
    return model.w2 @ h + model.b2


# ---------------------------------------------------------------------------
# Loss functions
# ---------------------------------------------------------------------------


def cross_entropy(logits, target_class: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient with respect to the logits."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("cross_entropy requires a non-empty logit vector")
    if not 0 <= target_class < v.size:
        raise ValueError(f"target class {target_class} out of range for {v.size} logits")
    lse = row_logsumexp(v[None, :])[0]
    probs = np.exp(v - lse)
    grad = probs.copy()
    grad[target_class] -= 1.0
    return float(lse - v[target_class]), grad


def margin_loss(e_ind: float, e_ood: float, margin: float) -> float:
    """Hinge on the energy gap: max(0, margin + e_ind - e_ood)."""
    return max(0.0, margin + e_ind - e_ood)


def margin_subgradient(e_ind: float, e_ood: float, margin: float) -> tuple[float, float]:
    """(d/d e_ind, d/d e_ood); zero on the inactive side, including ties."""
    if margin + e_ind - e_ood > 0.0:
        return 1.0, -1.0
    return 0.0, 0.0


def entropy_reg_loss(logits_ood) -> float:
    """Negative Shannon entropy of the softmax prediction.

    Minimizing pushes the prediction toward uniform; the minimum is -ln(K).
    """
    v = np.asarray(logits_ood, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("entropy_reg_loss requires a non-empty logit vector")
    lse = row_logsumexp(v[None, :])[0]
    logp = v - lse
    return float(np.sum(np.exp(logp) * logp))


def bound_loss(e_ind: float, e_ood: float, ind_bound: float, ood_bound: float) -> float:
    """Squared hinges pinning IND energy below ind_bound and OOD above ood_bound."""
    return max(0.0, e_ind - ind_bound) ** 2 + max(0.0, ood_bound - e_ood) ** 2


# ---------------------------------------------------------------------------
# Training configuration and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "ce"
    temperature: float = 0.8
    margin: float = 19.0
    ind_bound: float = -25.0
    ood_bound: float = -7.0
    entropy_weight: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 15
    seed: int = 0

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.entropy_weight <= 0:
            raise ConfigError(f"entropy_weight must be positive, got {self.entropy_weight}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(
                f"patience must be in [1, max_epochs={self.max_epochs}], got {self.patience}"
            )


@dataclass
class Batch:
    """Index sets into the training split, plus the class labels to fit."""

    ind_indices: np.ndarray
    ood_indices: np.ndarray
    ind_labels: np.ndarray
    ood_label_value: int  # OOD_CLASS, or K when OOD is trained as an extra class

    @property
    def labels(self) -> np.ndarray:
        ood_part = np.full(len(self.ood_indices), self.ood_label_value, dtype=np.int64)
        return np.concatenate([self.ind_labels, ood_part])


def ood_batch_quota(batch_size: int) -> int:
    """Minimum OOD samples per supervised batch."""
    return math.ceil(batch_size / 8)


def sample_batch(bundle: DatasetBundle, config: TrainConfig, rng: np.random.Generator) -> Batch:
    """Draw one training batch under the objective's sampling rule.

    Plain cross-entropy draws uniformly from the in-domain pool. The
    supervised margin/entropy/bound objectives reserve a quota of
    ceil(batch_size/8) OOD samples per batch so their OOD terms are always
    computable; K+1 training draws uniformly from the merged pool with OOD
    labeled as the extra class. Draws are without replacement unless a pool
    is smaller than its quota.
    """
    n_ind = len(bundle.train.ind)
    n_ood = len(bundle.train.ood)
    label_map = bundle.label_map
    k = len(bundle.intent_names)

    if config.objective in ("margin", "entropy", "bound") and n_ood == 0:
        raise ConfigError(f"objective {config.objective!r} requires labeled OOD training samples")
    if config.objective == "nplusone" and n_ood == 0:
        raise ConfigError("K+1 training requires labeled OOD training samples")

    if config.objective == "ce":
        take = min(config.batch_size, n_ind)
        ind_idx = rng.choice(n_ind, size=take, replace=False)
        ood_idx = np.empty(0, dtype=np.int64)
    elif config.objective == "nplusone":
        take = min(config.batch_size, n_ind + n_ood)
        merged = rng.choice(n_ind + n_ood, size=take, replace=False)
        ind_idx = merged[merged < n_ind]
        ood_idx = merged[merged >= n_ind] - n_ind
    else:
        quota = min(ood_batch_quota(config.batch_size), config.batch_size)
        take = min(config.batch_size - quota, n_ind)
        if take < 1:
            raise ConfigError(
                f"batch_size {config.batch_size} leaves no room for IND samples "
                f"next to the OOD quota of {quota}"
            )
        ood_idx = rng.choice(n_ood, size=quota, replace=quota > n_ood)
        ind_idx = rng.choice(n_ind, size=take, replace=False)

    ind_labels = np.array(
        [label_map[bundle.train.ind[i].label] for i in ind_idx], dtype=np.int64
    )
    ood_value = k if config.objective == "nplusone" else OOD_CLASS
    return Batch(
        ind_indices=np.asarray(ind_idx, dtype=np.int64),
        ood_indices=np.asarray(ood_idx, dtype=np.int64),
        ind_labels=ind_labels,
        ood_label_value=ood_value,
    )


# ---------------------------------------------------------------------------
# Batch objective: loss and hand-derived gradients
# ---------------------------------------------------------------------------


def _energy_rows(logits: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row energies and d(energy)/d(logits) = -softmax(logits / T)."""
    energies = -temperature * row_logsumexp(logits / temperature)
    denergy = -row_softmax(logits / temperature)
    return energies, denergy


def batch_objective(
    model: ClassifierModel,
    x_ind: np.ndarray,
    y_ind: np.ndarray,
    x_ood: np.ndarray,
    config: TrainConfig,
    pairs: np.ndarray,
    dropout_mask: np.ndarray | None = None,
) -> tuple[float, dict[str, float], dict[str, np.ndarray]]:
    """Loss, named loss components, and parameter gradients for one batch.

    `pairs` gives, for each OOD row, the index of its paired IND row (margin
    objective only; ignored otherwise). `dropout_mask` is the pre-drawn
    inverted-dropout mask for the stacked batch, or None for a plain forward.
    """
    n_ind = x_ind.shape[0]
    n_ood = x_ood.shape[0]
    X = np.vstack([x_ind, x_ood]) if n_ood else np.asarray(x_ind, dtype=np.float64)

    pre = X @ model.w1.T + model.b1
    h = _relu(pre)
    hd = h * dropout_mask if dropout_mask is not None else h
    logits = hd @ model.w2.T + model.b2
    dlogits = np.zeros_like(logits)
    components: dict[str, float] = {}

    # Cross-entropy rows: IND only, except K+1 training which covers the
    # whole batch with OOD as the extra class.
    if config.objective == "nplusone":
        ce_rows = np.arange(n_ind + n_ood)
        ce_labels = np.concatenate([y_ind, np.full(n_ood, model.num_classes - 1, dtype=np.int64)])
    else:
        ce_rows = np.arange(n_ind)
        ce_labels = y_ind
    lse = row_logsumexp(logits[ce_rows])
    probs = np.exp(logits[ce_rows] - lse[:, None])
    ce = float(np.mean(lse - logits[ce_rows, ce_labels]))
    dce = probs
    dce[np.arange(len(ce_rows)), ce_labels] -= 1.0
    dlogits[ce_rows] += dce / len(ce_rows)
    components["cross_entropy"] = ce
    loss = ce

    if config.objective == "margin" and n_ood:
        energies, denergy = _energy_rows(logits, config.temperature)
        e_ind = energies[:n_ind][pairs]
        e_ood = energies[n_ind:]
        hinges = np.maximum(0.0, config.margin + e_ind - e_ood)
        active = hinges > 0.0
        margin_term = float(np.mean(hinges))
        de = np.zeros(n_ind + n_ood)
        np.add.at(de, pairs[active], 1.0 / n_ood)
        de[n_ind:][active] -= 1.0 / n_ood
        dlogits += de[:, None] * denergy
        components["margin"] = margin_term
        loss += margin_term
    elif config.objective == "entropy" and n_ood:
        lse_o = row_logsumexp(logits[n_ind:])
        logp = logits[n_ind:] - lse_o[:, None]
        p = np.exp(logp)
        neg_entropy = np.sum(p * logp, axis=1)
        term = config.entropy_weight * float(np.mean(neg_entropy))
        dlogits[n_ind:] += (
            config.entropy_weight / n_ood * p * (logp - neg_entropy[:, None])
        )
        components["entropy"] = term
        loss += term
    elif config.objective == "bound" and n_ood:
        energies, denergy = _energy_rows(logits, config.temperature)
        over = np.maximum(0.0, energies[:n_ind] - config.ind_bound)
        under = np.maximum(0.0, config.ood_bound - energies[n_ind:])
        term = float(np.mean(over**2) + np.mean(under**2))
        de = np.zeros(n_ind + n_ood)
        de[:n_ind] = 2.0 * over / n_ind
        de[n_ind:] = -2.0 * under / n_ood
        dlogits += de[:, None] * denergy
        components["bound"] = term
        loss += term

    dw2 = dlogits.T @ hd
    db2 = dlogits.sum(axis=0)
    dhd = dlogits @ model.w2
    dh = dhd * dropout_mask if dropout_mask is not None else dhd
    dpre = dh * (pre > 0.0)
    grads = {
        "w1": dpre.T @ X,
        "b1": dpre.sum(axis=0),
        "w2": dw2,
        "b2": db2,
    }
    return loss, components, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    losses: list[float]
    components: dict[str, list[float]]
    val_ood_f1: list[float]
    best_epoch: int
    epochs_run: int

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "components": self.components,
            "val_ood_f1": self.val_ood_f1,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
        }


def validation_ood_f1(
    model: ClassifierModel,
    x_val_ind: np.ndarray,
    x_val_ood: np.ndarray,
    detector_kind: str,
    config: TrainConfig,
    x_train_ind: np.ndarray | None = None,
    y_train_ind: np.ndarray | None = None,
    lof_k: int = 20,
    gda_ridge: float | None = None,
) -> float:
    """Best-threshold OOD F1 on the validation split for one detector kind."""
    X = np.vstack([x_val_ind, x_val_ood])
    is_ood = np.concatenate(
        [np.zeros(len(x_val_ind), dtype=bool), np.ones(len(x_val_ood), dtype=bool)]
    )
    logits = model.logits(X)
    if detector_kind == "nplusone":
        pred_ood = np.argmax(logits, axis=1) == model.num_classes - 1
        return detect.binary_ood_f1(pred_ood, is_ood)
    if detector_kind == "energy":
        conf = detect.energy_confidences(logits, config.temperature)
    elif detector_kind == "msp":
        conf = detect.msp_confidences(logits)
    elif detector_kind == "gda":
        gda = detect.fit_gda(model.hidden(x_train_ind), y_train_ind, ridge=gda_ridge)
        conf = gda.confidence_batch(model.hidden(X))
    elif detector_kind == "lof":
        lof = detect.fit_lof(model.hidden(x_train_ind), k=lof_k)
        conf = lof.confidence_batch(model.hidden(X))
    else:
        raise ValueError(f"unknown detector kind {detector_kind!r}")
    return detect.threshold_sweep(conf, is_ood)[1]


def train(
    bundle: DatasetBundle,
    table: EmbeddingTable,
    config: TrainConfig,
    hidden_dim: int = 128,
    dropout_rate: float = 0.5,
    selection_detector: str | None = None,
    lof_k: int = 20,
    gda_ridge: float | None = None,
) -> tuple[ClassifierModel, TrainReport]:
    """Train a classifier under the configured objective with early stopping.

    Model selection maximizes validation OOD F1 under `selection_detector`
    (default: the energy score at the configured temperature, or the K+1
    rule for K+1 training); training stops after `patience` epochs without
    improvement and the best epoch's parameters are returned.
    """
    config.validate()
    if selection_detector is None:
        selection_detector = "nplusone" if config.objective == "nplusone" else "energy"
    if config.objective in SUPERVISED_OBJECTIVES and len(bundle.train.ood) == 0:
        raise ConfigError(
            f"objective {config.objective!r} requires a non-empty OOD training set"
        )
    if len(bundle.val.ood) == 0 or len(bundle.val.ind) == 0:
        raise ConfigError("validation split needs both IND and OOD utterances for selection")

    x_train = encode_utterances(bundle.train.ind, table)
    y_train = label_array(bundle.train.ind, bundle.label_map)
    x_train_ood = encode_utterances(bundle.train.ood, table)
    x_val_ind = encode_utterances(bundle.val.ind, table)
    x_val_ood = encode_utterances(bundle.val.ood, table)

    k = len(bundle.intent_names)
    num_classes = k + 1 if config.objective == "nplusone" else k
    init_rng = np.random.default_rng(derive_seed(config.seed, "init"))
    batch_rng = np.random.default_rng(derive_seed(config.seed, "batches"))
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    pair_rng = np.random.default_rng(derive_seed(config.seed, "pairing"))

    model = init_classifier(table.dimension, hidden_dim, num_classes, dropout_rate, init_rng)
    params = model.params()
    state = init_adam(params)
    steps_per_epoch = max(1, math.ceil(len(bundle.train.ind) / config.batch_size))

    losses: list[float] = []
    components: dict[str, list[float]] = {}
    val_history: list[float] = []
    best_f1 = -math.inf
    best_epoch = 0
    best_params = {k_: p.copy() for k_, p in params.items()}
    stale = 0
    epochs_run = 0

    for epoch in range(config.max_epochs):
        epochs_run = epoch + 1
        epoch_loss = 0.0
        epoch_components: dict[str, float] = {}
        for _ in range(steps_per_epoch):
            batch = sample_batch(bundle, config, batch_rng)
            xb_ind = x_train[batch.ind_indices]
            yb = batch.ind_labels
            xb_ood = x_train_ood[batch.ood_indices]
            n_rows = len(xb_ind) + len(xb_ood)
            if config.objective == "margin":
                pairs = pair_rng.integers(0, len(xb_ind), size=len(xb_ood))
            else:
                pairs = np.empty(0, dtype=np.int64)
            if model.dropout_rate > 0.0:
                keep = dropout_rng.random((n_rows, model.hidden_dim)) >= model.dropout_rate
                mask = keep / (1.0 - model.dropout_rate)
            else:
                mask = None
            loss, comps, grads = batch_objective(model, xb_ind, yb, xb_ood, config, pairs, mask)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} under objective {config.objective!r}"
                )
            params, state = adam_step(params, grads, state, config.learning_rate)
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise TrainingError(
                    f"non-finite parameters at epoch {epoch} under objective {config.objective!r}"
                )
            model.set_params(params)
            epoch_loss += loss
            for name, value in comps.items():
                epoch_components[name] = epoch_components.get(name, 0.0) + value

        losses.append(epoch_loss / steps_per_epoch)
        for name, total in epoch_components.items():
            components.setdefault(name, []).append(total / steps_per_epoch)
        f1 = validation_ood_f1(
            model,
            x_val_ind,
            x_val_ood,
            selection_detector,
            config,
            x_train_ind=x_train,
            y_train_ind=y_train,
            lof_k=lof_k,
            gda_ridge=gda_ridge,
        )
        val_history.append(f1)
        if f1 > best_f1:
            best_f1 = f1
            best_epoch = epoch
            best_params = {k_: p.copy() for k_, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.set_params(best_params)
    report = TrainReport(
        losses=losses,
        components=components,
        val_ood_f1=val_history,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
    )
    return model, report


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------


def classifier_to_dict(model: ClassifierModel, intent_names: tuple[str, ...]) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "dropout_rate": model.dropout_rate,
        "intent_names": list(intent_names),
        "params": {name: p.tolist() for name, p in model.params().items()},
    }


def classifier_from_dict(obj: dict) -> tuple[ClassifierModel, tuple[str, ...]]:
    version = obj.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        from .errors import VersionError

        raise VersionError(
            f"unsupported checkpoint format: expected {CHECKPOINT_FORMAT_VERSION}, found {version}"
        )
    params = {name: np.asarray(obj["params"][name], dtype=np.float64) for name in _PARAM_NAMES}
    model = ClassifierModel(
        w1=params["w1"],
        b1=params["b1"],
        w2=params["w2"],
        b2=params["b2"],
        dropout_rate=float(obj["dropout_rate"]),
    )
    return model, tuple(obj["intent_names"])
