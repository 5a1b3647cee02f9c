"""Mini-batch SGD training of an MLP embedder under the three supervision schemes.

Scheme I trains with softmax only, scheme II adds the centre loss, scheme III
adds the minimum margin loss on top. One iteration of :func:`train_step`
performs, in order:

1. forward pass and joint loss on the batch,
2. per-sample feature gradients of the joint loss,
3. classifier update from the softmax gradient only,
4. centre-bank update by the batch rule (schemes II and III),
5. embedder update by backpropagating the feature gradients,
6. iteration counter increment.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .centres import CentreBank, apply_update, centre_delta, inter_centre_sq_dists, init_centres
from .errors import ConfigError, DivergenceError, ShapeError
from .losses import (
    ClassifierHead,
    MmlConfig,
    batch_shifted_centres,
    centre_loss,
    mml,
    softmax_ce,
    surrogate_objective,
    total_loss,
)
from .numeric import as_matrix, make_rng, rng_from_state, rng_state

SCHEMES = ("I", "II", "III")
ACTIVATIONS = ("relu", "tanh", "linear")
TRACE_HEADER = (
    "iter",
    "loss_total",
    "loss_softmax",
    "loss_centre",
    "loss_mml",
    "lr",
    "min_centre_sqdist",
    "violating_pairs",
)
CHECKPOINT_FORMAT = "mmloss-checkpoint/1"


@dataclass
class ModelConfig:
    hidden_dims: tuple = (32,)
    embedding_dim: int = 8
    activation: str = "relu"
    init_scale: float = 1.0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.embedding_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer sizes must be positive")


@dataclass
class TrainConfig:
    scheme: str = "II"
    alpha: float = 0.01
    beta: float = 0.1
    gamma: float = 0.5
    margin: float = 0.0
    coupling_mode: str = "coupled"
    pair_scope: str = "batch_classes"
    batch_size: int = 64
    iterations: int = 1500
    base_lr: float = 0.05
    lr_decay_every: int = 1000
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.0
    centre_init: str = "zeros"
    seed: int = 0
    warm_start: str | None = None
    trace_every: int = 1

    def __post_init__(self):
        s = str(self.scheme).upper()
        s = {"1": "I", "2": "II", "3": "III"}.get(s, s)
        if s not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        self.scheme = s
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.base_lr >= 0:
            raise ConfigError("base_lr must be >= 0")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if self.trace_every < 1:
            raise ConfigError("trace_every must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        try:
            self.mml_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def mml_config(self) -> MmlConfig:
        return MmlConfig(self.margin, self.coupling_mode, self.pair_scope)

    def loss_weights(self) -> tuple[float, float]:
        if self.scheme == "I":
            return 0.0, 0.0
        if self.scheme == "II":
            return self.alpha, 0.0
        return self.alpha, self.beta


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    return cfg.base_lr * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


# --- embedder -------------------------------------------------------------


@dataclass
class EmbedderParams:
    """MLP weights; ``weights[l]`` is ``in x out`` for layer ``l``.

    ``activation`` applies to every hidden layer; the last layer is linear.
    """

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        self.weights = [as_matrix(w, "weights") for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias vector per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {l}: weights {w.shape} vs biases {b.shape}")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {l} input {w.shape[0]} != previous output {self.weights[l - 1].shape[1]}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "EmbedderParams":
        return EmbedderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_embedder(input_dim: int, model: ModelConfig, rng: np.random.Generator) -> EmbedderParams:
    sizes = [input_dim, *model.hidden_dims, model.embedding_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        gain = 2.0 if model.activation == "relu" else 1.0
        weights.append(rng.normal(0.0, model.init_scale * math.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EmbedderParams(weights, biases, model.activation)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _forward(params: EmbedderParams, inputs):
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != params.sizes[0]:
        raise ShapeError(f"inputs have dim {x.shape[1]}, embedder expects {params.sizes[0]}")
    layer_inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if l == last else _activate(z, params.activation)
    return h, (layer_inputs, pre)


def forward_embed(params: EmbedderParams, inputs) -> np.ndarray:
    return _forward(params, inputs)[0]


def _backward(params: EmbedderParams, cache, grad_features):
    layer_inputs, pre = cache
    g = as_matrix(grad_features, "grad_features")
    if g.shape != pre[-1].shape:
        raise ShapeError(f"grad_features shape {g.shape} != features shape {pre[-1].shape}")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for l in range(len(params.weights) - 1, -1, -1):
        if l != len(params.weights) - 1:
            if params.activation == "relu":
                g = g * (pre[l] > 0.0)
            elif params.activation == "tanh":
                t = np.tanh(pre[l])
                g = g * (1.0 - t * t)
        gw[l] = layer_inputs[l].T @ g
        gb[l] = g.sum(axis=0)
        if l:
            g = g @ params.weights[l].T
    return gw, gb


def backward_embed(params: EmbedderParams, inputs, grad_features):
    """Reverse-mode gradients ``(grad_weights, grad_biases)`` of the MLP."""
    _, cache = _forward(params, inputs)
    return _backward(params, cache, grad_features)


def _activation_branch(params: EmbedderParams, cache) -> bytes:
    if params.activation != "relu":
        return b""
    return b"".join(np.packbits(z[...] > 0.0).tobytes() for z in cache[1][:-1])


# --- training state -------------------------------------------------------


@dataclass
class TrainState:
    params: EmbedderParams
    head: ClassifierHead
    bank: CentreBank
    config: TrainConfig
    model: ModelConfig
    iteration: int = 0
    rng: np.random.Generator | None = None
    order: np.ndarray | None = None
    cursor: int = 0

    def copy(self) -> "TrainState":
        rng = rng_from_state(rng_state(self.rng)) if self.rng is not None else None
        return TrainState(
            self.params.copy(),
            self.head.copy(),
            CentreBank(self.bank.centres.copy(), self.bank.gamma, self.bank.update_count),
            self.config,
            self.model,
            self.iteration,
            rng,
            None if self.order is None else self.order.copy(),
            self.cursor,
        )


def init_state(config: TrainConfig, model: ModelConfig, input_dim: int, num_classes: int) -> TrainState:
    init_rng = make_rng(config.seed, "init")
    params = init_embedder(input_dim, model, init_rng)
    d = model.embedding_dim
    head = ClassifierHead(init_rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, num_classes)), np.zeros(num_classes))
    if config.centre_init == "zeros":
        bank = init_centres(num_classes, d, "zeros", gamma=config.gamma)
    elif config.centre_init == "seeded_gaussian":
        bank = init_centres(num_classes, d, "seeded_gaussian", sigma=1.0, seed=config.seed, gamma=config.gamma)
    else:
        raise ConfigError(f"unknown centre_init {config.centre_init!r}")
    return TrainState(params, head, bank, config, model, 0, make_rng(config.seed, "sampling"))


@dataclass
class StepResult:
    loss: object
    lr: float


def train_step(state: TrainState, inputs, labels) -> tuple[TrainState, StepResult]:
    """One iteration of joint-supervision SGD. Returns a new state."""
    cfg = state.config
    lr = learning_rate(cfg, state.iteration)
    with np.errstate(over="ignore", invalid="ignore"):
        features, cache = _forward(state.params, inputs)
    if not np.isfinite(features).all():
        raise DivergenceError(f"non-finite features at iteration {state.iteration}", snapshot=state.copy())
    with np.errstate(over="ignore", invalid="ignore"):
        logits_ok = np.isfinite(features @ state.head.weights + state.head.biases).all()
    if not logits_ok:
        raise DivergenceError(f"non-finite logits at iteration {state.iteration}", snapshot=state.copy())
    alpha, beta = cfg.loss_weights()
    loss = total_loss(features, labels, state.head, state.bank.centres, alpha, beta, cfg.mml_config())
    if not math.isfinite(loss.value) or not np.isfinite(loss.grad_features).all():
        raise DivergenceError(
            f"non-finite loss {loss.value!r} at iteration {state.iteration}", snapshot=state.copy()
        )
    wd = cfg.weight_decay

    head = ClassifierHead(
        state.head.weights - lr * (loss.grad_weights + wd * state.head.weights),
        state.head.biases - lr * loss.grad_biases,
    )
    bank = state.bank
    if cfg.scheme != "I":
        bank = apply_update(bank, centre_delta(bank, features, labels))
    gw, gb = _backward(state.params, cache, loss.grad_features)
    params = EmbedderParams(
        [w - lr * (g + wd * w) for w, g in zip(state.params.weights, gw)],
        [b - lr * g for b, g in zip(state.params.biases, gb)],
        state.params.activation,
    )
    new = dataclasses.replace(state, params=params, head=head, bank=bank, iteration=state.iteration + 1)
    return new, StepResult(loss, lr)


# --- batches ---------------------------------------------------------------


def next_batch(state: TrainState, num_train: int) -> np.ndarray:
    """Positions (into the train split) of the next mini-batch.

    Uniform shuffle per epoch; an epoch ends when fewer than ``batch_size``
    positions remain (the remainder is dropped). If the split is smaller than
    one batch, every batch is the whole split in a fresh order.
    """
    bs = min(state.config.batch_size, num_train)
    if state.order is None or state.cursor + bs > len(state.order):
        state.order = state.rng.permutation(num_train)
        state.cursor = 0
    batch = state.order[state.cursor : state.cursor + bs]
    state.cursor += bs
    return batch


def train_split(dataset):
    idx = np.flatnonzero(np.asarray(dataset.splits) == "train")
    return dataset.inputs[idx], dataset.labels[idx]


def _trace_row(state: TrainState, result: StepResult) -> dict:
    comp = result.loss.components
    d = inter_centre_sq_dists(state.bank)
    return {
        "iter": state.iteration,
        "loss_total": result.loss.value,
        "loss_softmax": comp["softmax"],
        "loss_centre": comp["centre"],
        "loss_mml": comp["mml"],
        "lr": result.lr,
        "min_centre_sqdist": float(d.min()),
        "violating_pairs": int(np.count_nonzero(d < state.config.margin)),
    }


def train(config: TrainConfig, dataset, model: ModelConfig | None = None, num_classes: int | None = None,
          init: TrainState | None = None):
    """Run ``config.iterations`` steps; returns ``(final_state, trace_rows)``.

    ``init`` overrides the freshly initialised state (used for warm starts and
    resuming); otherwise ``config.warm_start`` is honoured if set.
    """
    model = model or ModelConfig()
    x, y = train_split(dataset)
    if x.shape[0] < 1:
        raise ValueError("dataset has no training samples")
    k = num_classes or dataset.num_classes
    if init is not None:
        state = init
    elif config.warm_start:
        state = warm_start_state(load_checkpoint(config.warm_start), config, model, x.shape[1], k)
    else:
        state = init_state(config, model, x.shape[1], k)
    trace = []
    for _ in range(config.iterations):
        pos = next_batch(state, x.shape[0])
        state, result = train_step(state, x[pos], y[pos])
        if state.iteration % config.trace_every == 0:
            trace.append(_trace_row(state, result))
    return state, trace


def warm_start_state(source: TrainState, config: TrainConfig, model: ModelConfig, input_dim: int,
                     num_classes: int) -> TrainState:
    """Fresh state for ``config`` that starts from ``source``'s parameters.

    The iteration counter (and so the learning-rate schedule) restarts at 0,
    and batch sampling restarts from ``config.seed``.
    """
    expected = [input_dim, *model.hidden_dims, model.embedding_dim]
    problems = []
    if source.params.sizes != expected:
        problems.append(f"layer sizes {source.params.sizes} != {expected}")
    if source.params.activation != model.activation:
        problems.append(f"activation {source.params.activation} != {model.activation}")
    if source.head.num_classes != num_classes:
        problems.append(f"classes {source.head.num_classes} != {num_classes}")
    if problems:
        raise ConfigError("incompatible warm-start checkpoint: " + "; ".join(problems))
    bank = CentreBank(source.bank.centres.copy(), config.gamma, source.bank.update_count)
    return TrainState(source.params.copy(), source.head.copy(), bank, config, model, 0,
                      make_rng(config.seed, "sampling"))


def predict(state: TrainState, inputs) -> np.ndarray:
    feats = forward_embed(state.params, inputs)
    return np.argmax(feats @ state.head.weights + state.head.biases, axis=1)


def write_trace(rows, path):
    lines = [",".join(TRACE_HEADER)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in TRACE_HEADER))
    Path(path).write_text("\n".join(lines) + "\n")


# --- checkpoints ------------------------------------------------------------


def _enc(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [repr(float(v)) for v in a.reshape(-1)]}


def _dec(obj) -> np.ndarray:
    return np.array([float(v) for v in obj["data"]], dtype=np.float64).reshape(obj["shape"])


def state_to_dict(state: TrainState, extra: dict | None = None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "iteration": state.iteration,
        "config": dataclasses.asdict(state.config),
        "model": dataclasses.asdict(state.model),
        "embedder": {
            "activation": state.params.activation,
            "sizes": state.params.sizes,
            "weights": [_enc(w) for w in state.params.weights],
            "biases": [_enc(b) for b in state.params.biases],
        },
        "head": {"weights": _enc(state.head.weights), "biases": _enc(state.head.biases)},
        "bank": {
            "centres": _enc(state.bank.centres),
            "gamma": state.bank.gamma,
            "update_count": state.bank.update_count,
        },
        "rng": rng_state(state.rng) if state.rng is not None else None,
        "sampler": {
            "order": None if state.order is None else [int(i) for i in state.order],
            "cursor": state.cursor,
        },
    }
    if extra:
        doc["extra"] = extra
    return doc


def state_from_dict(doc: dict) -> TrainState:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint (format={doc.get('format')!r})")
    cfg = doc["config"]
    model = doc["model"]
    emb = doc["embedder"]
    params = EmbedderParams([_dec(w) for w in emb["weights"]], [_dec(b) for b in emb["biases"]], emb["activation"])
    head = ClassifierHead(_dec(doc["head"]["weights"]), _dec(doc["head"]["biases"]))
    bank = CentreBank(_dec(doc["bank"]["centres"]), doc["bank"]["gamma"], doc["bank"]["update_count"])
    sampler = doc["sampler"]
    return TrainState(
        params,
        head,
        bank,
        TrainConfig(**cfg),
        ModelConfig(**model),
        doc["iteration"],
        rng_from_state(doc["rng"]) if doc.get("rng") else None,
        None if sampler["order"] is None else np.asarray(sampler["order"], dtype=np.int64),
        sampler["cursor"],
    )


def dumps_checkpoint(state: TrainState, extra: dict | None = None) -> str:
    return json.dumps(state_to_dict(state, extra), indent=1, sort_keys=True) + "\n"


def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> None:
    Path(path).write_text(dumps_checkpoint(state, extra))


def load_checkpoint(path) -> TrainState:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed checkpoint JSON ({exc})") from None
    return state_from_dict(doc)


# --- gradient checking -------------------------------------------------------


@dataclass
class GradcheckReport:
    epsilon: float
    tolerance: float
    max_rel_err: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    skipped_kinks: int = 0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
            "max_rel_err": self.max_rel_err,
            "checked": self.checked,
            "skipped_kinks": self.skipped_kinks,
            "failures": self.failures,
            "passed": self.passed,
        }


def relative_error(analytic: float, numeric: float, scale: float) -> float:
    """``|a - n| / max(|a|, |n|, 1e-3 * scale, 1e-12)``.

    ``scale`` is the largest analytic gradient magnitude in the same parameter
    group; the floor keeps coordinates whose true gradient is at the
    finite-difference noise level from dominating the report.
    """
    denom = max(abs(analytic), abs(numeric), 1e-3 * scale, 1e-12)
    return abs(analytic - numeric) / denom


def _component_objectives(state: TrainState, y, anchor):
    cfg = state.config
    alpha, beta = cfg.loss_weights()
    mcfg = cfg.mml_config()
    c = state.bank.centres

    def softmax(f, head):
        return softmax_ce(f, y, head).value, b""

    def centre(f, head):
        return centre_loss(f, y, c).value, b""

    def mml_term(f, head):
        shifted = batch_shifted_centres(f, y, c, anchor) if mcfg.coupling_mode == "coupled" else c
        r = mml(f, y, shifted, mcfg)
        return r.value, r.branch

    def total(f, head):
        return surrogate_objective(f, y, head, c, anchor, alpha, beta, mcfg)

    return {"softmax": softmax, "centre": centre, "mml": mml_term, "total": total}


def _component_grads(state: TrainState, features, y):
    cfg = state.config
    alpha, beta = cfg.loss_weights()
    c = state.bank.centres
    s = softmax_ce(features, y, state.head)
    ce = centre_loss(features, y, c)
    m = mml(features, y, c, cfg.mml_config())
    t = total_loss(features, y, state.head, c, alpha, beta, cfg.mml_config())
    zero_w = np.zeros_like(state.head.weights)
    zero_b = np.zeros_like(state.head.biases)
    return {
        "softmax": (s.grad_features, s.grad_weights, s.grad_biases),
        "centre": (ce.grad_features, zero_w, zero_b),
        "mml": (m.grad_features, zero_w, zero_b),
        "total": (t.grad_features, t.grad_weights, t.grad_biases),
    }


def gradcheck(config: TrainConfig, dataset, samples: int = 50, epsilon: float = 1e-5,
              model: ModelConfig | None = None, tolerance: float = 1e-4, states: int = 2,
              steps_between: int = 5, seed: int | None = None, corrupt: float = 0.0) -> GradcheckReport:
    """Compare analytic and central-difference gradients of every loss component.

    Checks ``samples`` random coordinates per component per state, drawn from
    the embedder parameters, the classifier parameters and the batch features.
    States are the initial state and the states reached after
    ``steps_between`` further training steps. Coordinates whose perturbation
    crosses a kink (ReLU sign change, hinge activation, selection change) are
    skipped and redrawn. ``corrupt`` scales the analytic feature gradients by
    ``1 + corrupt``; it exists to exercise the failure path.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    model = model or ModelConfig()
    x_all, y_all = train_split(dataset)
    state = init_state(config, model, x_all.shape[1], dataset.num_classes)
    pick = make_rng(config.seed if seed is None else seed, "eval")
    report = GradcheckReport(epsilon=epsilon, tolerance=tolerance)

    for s_idx in range(states):
        if s_idx:
            for _ in range(steps_between):
                pos = next_batch(state, x_all.shape[0])
                state, _ = train_step(state, x_all[pos], y_all[pos])
        pos = next_batch(state, x_all.shape[0])
        x, y = x_all[pos], y_all[pos]
        features, cache = _forward(state.params, x)
        base_branch = _activation_branch(state.params, cache)
        objectives = _component_objectives(state, y, features)
        grads = _component_grads(state, features, y)

        for name, fn in objectives.items():
            gf, gw_head, gb_head = grads[name]
            gf = gf * (1.0 + corrupt)
            gw_emb, gb_emb = _backward(state.params, cache, gf)
            groups = {"features": gf, "head_w": gw_head, "head_b": gb_head}
            for l, (w, b) in enumerate(zip(gw_emb, gb_emb)):
                groups[f"emb_w{l}"] = w
                groups[f"emb_b{l}"] = b
            scales = {g: float(np.max(np.abs(v))) if v.size else 0.0 for g, v in groups.items()}
            sizes = np.array([v.size for v in groups.values()], dtype=np.float64)
            names = list(groups)
            _, fn_branch = fn(features, state.head)

            done = 0
            attempts = 0
            while done < samples and attempts < 20 * samples:
                attempts += 1
                g = names[int(pick.choice(len(names), p=sizes / sizes.sum()))]
                idx = int(pick.integers(groups[g].size))
                analytic = float(groups[g].reshape(-1)[idx])
                values, stable = [], True
                for sign in (1.0, -1.0):
                    val, br = _perturbed_eval(state, x, features, base_branch, g, idx, sign * epsilon, fn)
                    stable = stable and br == (base_branch, fn_branch)
                    values.append(val)
                if not stable:
                    report.skipped_kinks += 1
                    continue
                numeric = (values[0] - values[1]) / (2 * epsilon)
                err = relative_error(analytic, numeric, scales[g])
                done += 1
                report.checked[name] = report.checked.get(name, 0) + 1
                report.max_rel_err[name] = max(report.max_rel_err.get(name, 0.0), err)
                if err > tolerance:
                    report.failures.append(
                        {"component": name, "state": s_idx, "group": g, "index": idx,
                         "analytic": analytic, "numeric": numeric, "rel_err": err}
                    )
    return report


def _perturbed_eval(state: TrainState, x, features, base_branch, group, idx, delta, fn):
    head = state.head
    params = state.params
    if group == "features":
        f = features.copy()
        f.reshape(-1)[idx] += delta
        act_branch = base_branch
    elif group.startswith("head"):
        head = head.copy()
        arr = head.weights if group == "head_w" else head.biases
        arr.reshape(-1)[idx] += delta
        f = features
        act_branch = base_branch
    else:
        params = params.copy()
        layer = int(group[5:])
        arr = params.weights[layer] if group.startswith("emb_w") else params.biases[layer]
        arr.reshape(-1)[idx] += delta
        f, cache = _forward(params, x)
        act_branch = _activation_branch(params, cache)
    val, br = fn(f, head)
    return val, (act_branch, br)
