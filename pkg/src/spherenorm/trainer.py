"""SGD training with weight-norm, recurrence and BN-statistics tracking."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import batch_iter, make_dataset
from .errors import ConfigurationError, DegenerateInputError, DivergenceError
from .gradients import backward, build_mlp, forward, invariance_blocks, logits
from .normalizers import Method, covariance, kernel_analysis, update_running_stats
from .persist import save_model

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "loss", "acc", "layer", "row", "w_norm", "gamma_gap",
               "beta_gap", "recurrence_resid", "kernel_dim")


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 32
    max_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.0
    method: str = "bn"
    widths: tuple = (32, 32)
    activation: str = "relu"
    eps_norm: float = 1e-5
    groups: int = None
    channels: int = None
    init_scale: float = 1.0
    dataset: str = "gaussian_blobs"
    dataset_params: dict = field(default_factory=dict)
    test_fraction: float = 0.2
    metric_every: int = 50
    kernel_threshold: float = 1e-10
    gap_layer: int = 0

    def __post_init__(self):
        self.method = Method(self.method).value
        self.widths = tuple(int(w) for w in self.widths)
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if self.method == "bn" and self.batch_size < 2:
            raise ConfigurationError("batch norm needs batch size >= 2")
        if self.metric_every < 1:
            raise ConfigurationError("metric_every must be positive")

    @property
    def run_name(self):
        return f"{self.method}_wd{self.weight_decay:g}_seed{self.seed}"

    @classmethod
    def from_json(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class RunRecord:
    config: TrainConfig
    rows: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    failure: str = None
    model: object = None

    @property
    def failed(self):
        return self.failure is not None

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(v) for v in row])
        summary = {"config": self.config.to_json(), "final": self.summary,
                   "failed": self.failed, "failure": self.failure}
        (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if self.model is not None:
            save_model(self.model, directory)
        return directory


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def sgd_step(model, grads, eta, lam=0.0):
    """One decoupled-weight-decay SGD step: ``W <- (1 - eta*lam) W - eta * grad``.

    Returns the updated copy and, per layer, the relative per-row residual
    ``| ||W'_i||^2 - ||(1 - eta*lam) W_i||^2 - eta^2 ||grad_i||^2 | / ||W_i||^2``
    which vanishes when every row is orthogonal to its gradient.
    """
    for g in grads.layers:
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise DivergenceError(f"non-finite gradient in {name!r}")
    new = model.copy()
    eta = np.float64(eta)
    shrink = 1.0 - eta * lam
    residuals = []
    for layer, g in zip(new.layers, grads.layers):
        W_old = layer.W
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            W_new = shrink * W_old - eta * g["W"]
            if not np.all(np.isfinite(W_new)):
                raise DivergenceError("weights overflowed")
            before = np.sum(W_old * W_old, axis=1)
            after = np.sum(W_new * W_new, axis=1)
            predicted = shrink ** 2 * before + eta ** 2 * np.sum(g["W"] * g["W"], axis=1)
            resid = np.where(before > 0, np.abs(after - predicted) / before, 0.0)
        residuals.append(resid)
        layer.W = W_new
        params = layer.params()
        for name in ("bias", "gamma", "beta"):
            if name in params:
                params[name] -= eta * g[name]
    return new, residuals


def _unit_affine(layer):
    m = layer.W.shape[0]
    if layer.method is Method.NONE:
        beta = layer.bias if layer.bias is not None else np.zeros(m)
        return np.ones(m), beta
    return layer.norm.gamma, layer.norm.beta


def _kernel_dim(X, threshold):
    return kernel_analysis(covariance(X), threshold).kernel_dim


def _window_median(values, first):
    k = max(1, int(np.ceil(0.1 * len(values))))
    chunk = values[:k] if first else values[-k:]
    return float(np.median(chunk))


DEFAULT_BLOBS = {"n_samples": 2560, "n_features": 32, "n_classes": 4, "separation": 3.0}


def load_datasets(cfg):
    """The ``(train, test)`` split a run with this config trains and tests on."""
    params = dict(DEFAULT_BLOBS) if cfg.dataset == "gaussian_blobs" else {}
    params.update(cfg.dataset_params)
    ds = make_dataset(cfg.dataset, params, seed=cfg.seed)
    return ds.split(cfg.test_fraction, cfg.seed)


def train(config, out_dir=None):
    """Train an MLP per ``config``; returns the RunRecord (written if ``out_dir``).

    Divergence stops the run and returns a partial record with ``failure``
    set instead of raising.
    """
    # overflow is detected explicitly and turned into a failure marker
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(config, out_dir)


def _train(config, out_dir):
    cfg = config
    train_set, test_set = load_datasets(cfg)
    ds = train_set
    model = build_mlp(ds.n_features, cfg.widths, ds.n_classes, cfg.method, seed=cfg.seed,
                      eps=cfg.eps_norm, activation=cfg.activation, groups=cfg.groups,
                      channels=cfg.channels, init_scale=cfg.init_scale)
    record = RunRecord(config=cfg)
    hidden = range(len(model.layers) - 1)
    # invariance blocks are contiguous, equal-sized row ranges
    block_size = []
    for i in hidden:
        blocks = invariance_blocks(model.layers[i])
        block_size.append(None if blocks is None else len(blocks[0]))
    drop_last = cfg.method == "bn"
    velocity = None

    step = 0
    max_resid = 0.0
    violations = 0
    try:
        for epoch in range(cfg.epochs):
            for Xb, yb in batch_iter(train_set.X, train_set.labels, cfg.batch_size,
                                     cfg.seed, epoch, drop_last=drop_last):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                step += 1
                loss, cache = forward(model, Xb, yb)
                if not np.isfinite(loss):
                    raise DivergenceError(f"loss is {loss} at step {step}")
                grads = backward(model, Xb, yb, cache=cache)
                if cfg.momentum:
                    velocity = _momentum(velocity, grads, cfg.momentum)
                new_model, resid = sgd_step(model, grads, cfg.learning_rate, cfg.weight_decay)
                acc = float(np.mean(np.argmax(cache["probs"], axis=0) == yb))

                step_resid, step_viol = 0.0, 0
                shrink = 1.0 - cfg.learning_rate * cfg.weight_decay
                for i in hidden:
                    if block_size[i] is None:
                        continue
                    k = block_size[i]
                    n0 = np.sum(model.layers[i].W ** 2, axis=1).reshape(-1, k).sum(axis=1)
                    n1 = np.sum(new_model.layers[i].W ** 2, axis=1).reshape(-1, k).sum(axis=1)
                    g2 = np.sum(grads.layers[i]["W"] ** 2, axis=1).reshape(-1, k).sum(axis=1)
                    pred = shrink ** 2 * n0 + cfg.learning_rate ** 2 * g2
                    step_resid = max(step_resid, float(np.max(np.abs(n1 - pred) / n0)))
                    if cfg.weight_decay == 0.0:
                        step_viol += int(np.sum(n1 < n0))
                max_resid = max(max_resid, step_resid)
                violations += step_viol > 0

                first = cache["layers"][cfg.gap_layer]
                gamma, beta = _unit_affine(model.layers[cfg.gap_layer])
                pre = first["pre"]
                gap_g = np.abs(gamma ** 2 - pre.var(axis=1))
                gap_b = np.abs(beta - pre.mean(axis=1))
                record.steps.append({"step": step, "loss": loss, "acc": acc,
                                     "recurrence_resid": step_resid,
                                     "monotone_violation": step_viol > 0,
                                     "gamma_gap": float(np.median(gap_g)),
                                     "beta_gap": float(np.median(gap_b))})

                if step % cfg.metric_every == 0 or step == 1:
                    _emit_rows(record, step, loss, acc, model, new_model, cache, resid,
                               hidden, cfg.kernel_threshold)

                for i in hidden:
                    spec = new_model.layers[i].norm
                    if spec.method is Method.BATCH:
                        update_running_stats(spec, cache["layers"][i]["pre"])
                model = new_model
            else:
                continue
            break
    except (DivergenceError, DegenerateInputError, FloatingPointError) as exc:
        record.failure = f"{type(exc).__name__}: {exc}"
        log.warning("run %s stopped at step %d: %s", cfg.run_name, step, exc)

    record.model = model
    record.summary = _summarize(record, model, train_set, test_set, max_resid, violations)
    if out_dir is not None:
        record.write(Path(out_dir))
    return record


def _momentum(velocity, grads, mu):
    # heavy-ball: the step direction becomes the velocity buffer
    if velocity is None:
        velocity = [{k: np.zeros_like(v) for k, v in g.items()} for g in grads.layers]
    for vel, g in zip(velocity, grads.layers):
        for k in g:
            vel[k] = mu * vel[k] + g[k]
            g[k] = vel[k].copy()
    return velocity


def _emit_rows(record, step, loss, acc, model, new_model, cache, resid, hidden, threshold):
    for i in hidden:
        c = cache["layers"][i]
        pre = c["pre"]
        gamma, beta = _unit_affine(model.layers[i])
        gap_g = np.abs(gamma ** 2 - pre.var(axis=1))
        gap_b = np.abs(beta - pre.mean(axis=1))
        norms = np.linalg.norm(new_model.layers[i].W, axis=1)
        kdim = _kernel_dim(c["X"], threshold)
        for r in range(pre.shape[0]):
            record.rows.append((step, loss, acc, i, r, norms[r], gap_g[r], gap_b[r],
                                resid[i][r], kdim))


def _accuracy(model, ds):
    eval_model = model.with_mode("eval")
    return float(np.mean(np.argmax(logits(eval_model, ds.X), axis=0) == ds.labels))


def _summarize(record, model, train_set, test_set, max_resid, violations):
    steps = record.steps
    out = {
        "steps": len(steps),
        "max_recurrence_resid": max_resid,
        "monotone_violations": int(violations),
        "layer_w_norms": [float(np.linalg.norm(layer.W)) for layer in model.layers[:-1]],
    }
    out["final_w_norm"] = out["layer_w_norms"][0] if out["layer_w_norms"] else 0.0
    if steps:
        out["final_loss"] = steps[-1]["loss"]
        gg = [s["gamma_gap"] for s in steps]
        bg = [s["beta_gap"] for s in steps]
        out.update(gamma_gap_first=_window_median(gg, True), gamma_gap_last=_window_median(gg, False),
                   beta_gap_first=_window_median(bg, True), beta_gap_last=_window_median(bg, False))
    if record.failure is None:
        try:
            out["train_acc"] = _accuracy(model, train_set)
            out["test_acc"] = _accuracy(model, test_set)
        except (DegenerateInputError, FloatingPointError) as exc:
            out["eval_error"] = str(exc)
    return out
