"""Clean, Gaussian-noise and BIM-l_inf accuracy of trained models."""

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .gradients import backward, logits
from .normalizers import Method
from .tensor import as_tensor, seeded_rng

REPORT_COLUMNS = ("method", "wd", "clean", "gauss", "bim", "accdiff1", "accdiff2",
                  "eps", "steps", "alpha", "seed")


@dataclass
class AttackConfig:
    """Attack settings; ``step_size`` defaults to ``epsilon / 5``.

    ``epsilon`` and ``noise_std`` are in standardized-feature units.
    """

    kind: str = "bim"
    epsilon: float = 0.1
    step_size: float = None
    steps: int = 10
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "bim"):
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0 or self.noise_std < 0:
            raise ConfigurationError("epsilon and noise_std must be non-negative")
        if self.step_size is None:
            self.step_size = self.epsilon / 5.0
        if self.steps < 1:
            raise ConfigurationError("steps must be positive")
        if self.kind == "bim" and self.step_size * self.steps < self.epsilon * (1 - 1e-12):
            raise ConfigurationError("step_size * steps must reach epsilon")


def _eval_model(model):
    if any(layer.norm.mode != "eval" for layer in model.layers):
        return model.with_mode("eval")
    return model


def predict(model, X):
    # argmax returns the first maximal index: ties go to the lowest class
    return np.argmax(logits(_eval_model(model), X), axis=0)


def accuracy(model, X, labels):
    X = as_tensor(X, ndim=2)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DimensionError("accuracy of an empty dataset")
    return float(np.mean(predict(model, X) == labels))


def gaussian_eval(model, X, labels, cfg):
    noise = seeded_rng(cfg.seed).standard_normal(np.shape(X))
    return accuracy(model, np.asarray(X) + cfg.noise_std * noise, labels)


def clip_to_ball(X_adv, X, eps):
    """Project onto the l_inf ball so that ``|X_adv - X| <= eps`` holds in floats."""
    delta = np.clip(X_adv - X, -eps, eps)
    out = X + delta
    # X + delta can round past the boundary; step back one ulp at a time
    over = np.abs(out - X) > eps
    while np.any(over):
        out[over] = np.nextafter(out[over], X[over])
        over = np.abs(out - X) > eps
    return out


class AttackResult(NamedTuple):
    X_adv: np.ndarray
    accuracy: float
    degenerate: bool  # the input gradient was zero everywhere


def input_gradient(model, X, labels):
    return backward(_eval_model(model), X, labels).dX


def bim_attack(model, X, labels, cfg):
    """Basic iterative method: signed-gradient ascent clipped to the eps-ball."""
    X = as_tensor(X, ndim=2)
    labels = np.asarray(labels)
    model = _eval_model(model)
    X_adv = X.copy()
    degenerate = True
    if cfg.epsilon > 0:
        for _ in range(cfg.steps):
            g = input_gradient(model, X_adv, labels)
            if np.any(g):
                degenerate = False
            X_adv = clip_to_ball(X_adv + cfg.step_size * np.sign(g), X, cfg.epsilon)
    return AttackResult(X_adv, accuracy(model, X_adv, labels), degenerate and cfg.epsilon > 0)


@dataclass
class RobustnessReport:
    clean_acc: float
    noise_acc: float
    bim_acc: float
    acc_diff1: float
    acc_diff2: float
    epsilon: float
    steps: int
    alpha: float
    noise_std: float
    seed: int

    def csv_row(self, method, wd):
        return [method, wd, self.clean_acc, self.noise_acc, self.bim_acc, self.acc_diff1,
                self.acc_diff2, self.epsilon, self.steps, self.alpha, self.seed]

    def as_dict(self):
        return asdict(self)


def robustness_report(model, X, labels, bim_cfg=None, noise_cfg=None):
    bim_cfg = bim_cfg or AttackConfig("bim")
    noise_cfg = noise_cfg or AttackConfig("gaussian", noise_std=bim_cfg.noise_std,
                                          seed=bim_cfg.seed)
    model = _eval_model(model)
    clean = accuracy(model, X, labels)
    noisy = gaussian_eval(model, X, labels, noise_cfg)
    adv = bim_attack(model, X, labels, bim_cfg).accuracy
    return RobustnessReport(clean, noisy, adv, clean - noisy, clean - adv,
                            bim_cfg.epsilon, bim_cfg.steps, bim_cfg.step_size,
                            noise_cfg.noise_std, bim_cfg.seed)


def append_report(path, report, method, wd):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(REPORT_COLUMNS)
        writer.writerow([v if isinstance(v, str) else repr(float(v)) if isinstance(v, float)
                         else v for v in report.csv_row(method, wd)])
