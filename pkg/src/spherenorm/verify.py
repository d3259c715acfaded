"""Numerical invariant suites behind ``spherenorm verify``.

Each suite returns a list of :class:`Check` records. A check holds the worst
residual observed for one invariant and the tolerance it must stay under;
"exceeds" checks (the unnormalized controls) flip the comparison.
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .errors import KernelCollapse
from .gradients import (build_mlp, check_bn_preactivation_orthogonality,
                        check_grad_orthogonality, check_scaling_invariance,
                        gradient_check)
from .normalizers import (NormalizerSpec, batch_norm, covariance, effective_weight,
                          group_norm, instance_norm, kernel_analysis, layer_norm,
                          spectral_normalize, weight_norm, weight_standardize)
from .tensor import seeded_rng, sym_eigen
from .trainer import TrainConfig, train


@dataclass
class Check:
    invariant: str
    residual: float
    tol: float
    kind: str = "max"  # "max": residual <= tol; "min": residual > tol; "info": logged only

    def __post_init__(self):
        self.residual, self.tol = float(self.residual), float(self.tol)

    @property
    def passed(self):
        if self.kind == "info":
            return True
        if not np.isfinite(self.residual):
            return False
        return bool(self.residual <= self.tol if self.kind == "max" else self.residual > self.tol)


@dataclass
class SuiteResult:
    name: str
    checks: list
    seconds: float
    error: str = None

    @property
    def passed(self):
        return self.error is None and all(c.passed for c in self.checks)

    def failed_invariants(self):
        return [c.invariant for c in self.checks if not c.passed]


@dataclass
class VerifyReport:
    suites: list = field(default_factory=list)

    @property
    def passed(self):
        return all(s.passed for s in self.suites)

    def to_json(self):
        return {"passed": self.passed,
                "suites": [{"name": s.name, "passed": s.passed, "seconds": s.seconds,
                            "error": s.error,
                            "checks": [dict(asdict(c), passed=c.passed) for c in s.checks]}
                           for s in self.suites]}

    def table(self):
        lines = [f"{'suite':<14}{'invariant':<40}{'residual':>12}{'tol':>10}  result"]
        for s in self.suites:
            if s.error is not None:
                lines.append(f"{s.name:<14}{'(error) ' + s.error:<62}  FAIL")
            for c in s.checks:
                op = {"max": "", "min": ">", "info": "~"}[c.kind]
                lines.append(f"{s.name:<14}{c.invariant:<40}{c.residual:>12.3e}"
                             f"{op + format(c.tol, '.0e'):>10}  {'PASS' if c.passed else 'FAIL'}")
        lines.append("ALL PASS" if self.passed else "FAILED: " + ", ".join(
            f"{s.name}[{','.join(s.failed_invariants()) or 'error'}]"
            for s in self.suites if not s.passed))
        return "\n".join(lines)


def _random_vectors(rng, count, n_lo=2, n_hi=64):
    for _ in range(count):
        n = int(rng.integers(n_lo, n_hi + 1))
        scale = 10.0 ** rng.uniform(-3, 3)
        yield rng.standard_normal(n) * scale + rng.uniform(-10, 10)


def suite_lemma1(seed=0, count=1000):
    rng = seeded_rng(seed)
    worst = np.zeros(4)
    for v in _random_vectors(rng, count):
        n = v.shape[0]
        d = geometry.decompose(v)
        N = d.direction
        vn2 = float(v @ v)
        worst = np.maximum(worst, [
            abs(np.linalg.norm(N) - np.sqrt(n)) / np.sqrt(n),
            abs(N.sum()) / (np.linalg.norm(N) * np.sqrt(n)),
            np.linalg.norm(d.reconstruct() - v) / np.linalg.norm(v),
            abs(vn2 - n * (d.gamma ** 2 + d.beta ** 2)) / vn2,
        ])
    names = ["norm(N(v)) = sqrt(n)", "N(v) orthogonal to e_n",
             "v = gamma N(v) + beta e_n", "|v|^2 = n (gamma^2 + beta^2)"]
    return [Check(name, float(w), 1e-9) for name, w in zip(names, worst)]


def suite_invariance(seed=0, count=300):
    rng = seeded_rng(seed + 1)
    pos = neg = 0.0
    for v in _random_vectors(rng, count):
        n = v.shape[0]
        N = geometry.standardize(v)
        alpha = rng.uniform(1e-3, 10.0)
        t = rng.uniform(-10, 10)
        pos = max(pos, float(np.max(np.abs(geometry.standardize(alpha * v + t * np.ones(n)) - N))))
        neg = max(neg, float(np.max(np.abs(geometry.standardize(-alpha * v) + N))))
    return [Check("N(alpha v + t e) = N(v), alpha > 0", pos, 1e-9),
            Check("N(alpha v) = -N(v), alpha < 0", neg, 1e-9)]


def suite_normalizers(seed=0):
    rng = seeded_rng(seed + 2)
    checks = []
    m, B = 8, 6
    Y = rng.standard_normal((m, B)) * 3 + 1
    bn = batch_norm(Y, NormalizerSpec("bn", eps=0.0).init_affine(m))
    rows = np.array([geometry.standardize(r) for r in Y])
    checks.append(Check("BN rows equal N(row)", float(np.max(np.abs(bn - rows))), 1e-12))
    ln = layer_norm(Y, NormalizerSpec("ln", eps=0.0).init_affine(m))
    cols = np.array([geometry.standardize(c) for c in Y.T]).T
    checks.append(Check("LN columns equal N(column)", float(np.max(np.abs(ln - cols))), 1e-12))
    t = rng.standard_normal((4, 3, B))
    gn = group_norm(t, 2, NormalizerSpec("gn", eps=0.0, groups=2))
    ref = np.stack([geometry.standardize(t[2 * k:2 * k + 2, :, b].ravel()).reshape(2, 3)
                    for k in range(2) for b in range(B)]).reshape(2, B, 2, 3)
    ref = ref.transpose(0, 2, 3, 1).reshape(4, 3, B)
    checks.append(Check("GN groups equal N(group)", float(np.max(np.abs(gn - ref))), 1e-12))
    inn = instance_norm(t, NormalizerSpec("in", eps=0.0))
    ref_in = np.stack([[geometry.standardize(t[c, :, b]) for b in range(B)]
                       for c in range(4)]).transpose(0, 2, 1)
    checks.append(Check("IN channels equal N(channel)", float(np.max(np.abs(inn - ref_in))), 1e-12))

    two = batch_norm(rng.standard_normal((m, 2)), NormalizerSpec("bn", eps=0.0).init_affine(m))
    checks.append(Check("B=2 BN output rows are (1,-1) or (-1,1)",
                        float(np.max(np.abs(np.abs(two) - 1.0)) + np.max(np.abs(two.sum(axis=1)))),
                        0.0))

    ws_gap = cwn_gap = wn_gap = sn_gap = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 33))
        w = rng.standard_normal(n)
        ws_gap = max(ws_gap, float(np.max(np.abs(
            weight_standardize(w, "ws") - np.sqrt(n) * weight_standardize(w, "cwn")))))
        cwn_gap = max(cwn_gap, abs(np.linalg.norm(weight_standardize(w, "cwn")) - 1.0))
        g = rng.uniform(-5, 5)
        wn_gap = max(wn_gap, abs(np.linalg.norm(weight_norm(w, g)) - abs(g)))
    for _ in range(5):
        W = rng.standard_normal((int(rng.integers(2, 10)), int(rng.integers(2, 10))))
        Wsn = spectral_normalize(W)
        sigma = np.sqrt(sym_eigen(Wsn.T @ Wsn).eigenvalues[0])
        sn_gap = max(sn_gap, abs(sigma - 1.0))
    checks += [Check("WS = sqrt(n) CWN", ws_gap, 0.0),
               Check("|CWN(w)| = 1", cwn_gap, 1e-12),
               Check("|WN(v, g)| = |g|", wn_gap, 1e-12),
               Check("sigma(SN(W)) = 1 (eigen oracle)", sn_gap, 1e-5)]
    return checks


def _whiten(X):
    """Affinely map the columns of ``X`` so their covariance is the identity."""
    S = covariance(X)
    eig = sym_eigen(S)
    inv_sqrt = eig.eigenvectors @ np.diag(eig.eigenvalues ** -0.5) @ eig.eigenvectors.T
    mean = X.mean(axis=1, keepdims=True)
    return inv_sqrt @ (X - mean) + mean


def suite_kernel(seed=0, count=100):
    rng = seeded_rng(seed + 3)
    checks = []
    short = 0
    for _ in range(count):
        n = int(rng.integers(4, 17))
        B = int(rng.integers(2, n + 1))
        rep = kernel_analysis(covariance(rng.standard_normal((n, B))))
        short = max(short, (n - B) - rep.kernel_dim)
    checks.append(Check("kernel_dim >= n - B (shortfall)", float(max(short, 0)), 0.0))

    n, B = 16, 4
    X = rng.standard_normal((n, B))
    rep = kernel_analysis(covariance(X))
    w = rep.kernel_basis @ rng.standard_normal(rep.kernel_dim)
    gamma, beta = 1.7, 0.3
    raised = 0.0
    try:
        effective_weight(w, X, gamma, beta)
        out = None
    except KernelCollapse as exc:
        raised = 1.0
        out = exc.output
    checks.append(Check("W in kernel raises collapse signal", raised, 0.5, kind="min"))
    spec = NormalizerSpec("bn", eps=1e-5, gamma=np.array([gamma]), beta=np.array([beta]))
    bn = batch_norm((w @ X)[None, :], spec)[0]
    dev = float(np.max(np.abs(bn - beta)))
    if out is not None:
        dev = max(dev, float(np.max(np.abs(out - beta))))
    checks.append(Check("collapsed BN output = beta e_B", dev, 1e-8))

    ell = 0.0
    for _ in range(count):
        n = int(rng.integers(2, 17))
        B = int(rng.integers(n + 1, 3 * n + 2))
        X = rng.standard_normal((n, B)) * rng.uniform(0.1, 5, size=(n, 1))
        w = rng.standard_normal(n)
        g = rng.uniform(0.1, 3)
        ew = effective_weight(w, X, g, 0.0)
        q = float(ew.w_prime @ covariance(X) @ ew.w_prime)
        ell = max(ell, abs(q - g * g) / (g * g))
    checks.append(Check("W' Sigma W'^T = gamma^2", ell, 1e-8))

    worst_cos = 0.0
    white_err = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 12))
        X = _whiten(rng.standard_normal((n, 4 * n)))
        white_err = max(white_err, float(np.max(np.abs(covariance(X) - np.eye(n)))))
        w = rng.standard_normal(n)
        ew = effective_weight(w, X, 1.0, 0.0)
        wn = weight_norm(w, 1.0)
        cos = float(ew.w_prime @ wn) / np.linalg.norm(ew.w_prime)
        worst_cos = max(worst_cos, 1.0 - cos)
    checks.append(Check("whitened X: Sigma_X = I", white_err, 1e-10))
    checks.append(Check("whitened X: 1 - cos(BN eff. weight, WN)", worst_cos, 1e-8))
    return checks


ORTHO_METHODS = ("bn", "ln", "gn", "in", "wn", "cwn", "ws", "sn")


def _small_problem(seed, method, eps=0.0, in_dim=10, widths=(8, 8), B=12, classes=3):
    rng = seeded_rng(1000 + seed)
    X = rng.standard_normal((in_dim, B))
    y = rng.integers(0, classes, B)
    kw = {"groups": 2} if method == "gn" else {"channels": 2} if method == "in" else {}
    model = build_mlp(in_dim, widths, classes, method=method, seed=seed, eps=eps, **kw)
    return model, X, y


def suite_orthogonality(seed=0, instances=40):
    checks = []
    for method in ORTHO_METHODS:
        worst = scale = 0.0
        for k in range(3):
            model, X, y = _small_problem(seed + k, method)
            for rep in check_grad_orthogonality(model, X, y):
                worst = max(worst, float(np.max(np.abs(rep.block_cosines))))
            scale = max(scale, check_scaling_invariance(model, X, y, 0).max_deviation)
        checks.append(Check(f"{method}: |cos(W_block, grad)|", worst, 1e-8))
        checks.append(Check(f"{method}: loss change under block scaling", scale, 1e-9))
    # epsilon > 0 breaks exact invariance; record by how much
    eps_dev = 0.0
    for method in ORTHO_METHODS:
        model, X, y = _small_problem(seed, method, eps=1e-5)
        for rep in check_grad_orthogonality(model, X, y):
            eps_dev = max(eps_dev, float(np.max(np.abs(rep.block_cosines))))
    checks.append(Check("max |cos| at eps=1e-5 (logged only)", eps_dev, 0.0, kind="info"))
    hits = 0
    for k in range(instances):
        model, X, y = _small_problem(seed + k, "none")
        reps = check_grad_orthogonality(model, X, y)
        cos = np.concatenate([np.abs(r.row_cosines) for r in reps])
        hits += int(np.median(cos) > 1e-3)
    checks.append(Check("none: fraction of instances with |cos| > 1e-3",
                        hits / instances, 0.95, kind="min"))
    return checks


def suite_preactivation(seed=0):
    worst_y = worst_e = 0.0
    ctrl = []
    for k in range(5):
        model, X, y = _small_problem(seed + k, "bn")
        for rep in check_bn_preactivation_orthogonality(model, X, y):
            worst_y = max(worst_y, float(np.max(rep.yhat_inner)))
            worst_e = max(worst_e, float(np.max(rep.ones_inner)))
        model, X, y = _small_problem(seed + k, "none")
        ctrl += [float(np.median(r.ones_inner)) for r in check_bn_preactivation_orthogonality(model, X, y)]
    return [Check("BN: <dL/dy, yhat> normalized", worst_y, 1e-8),
            Check("BN: <dL/dy, e> normalized", worst_e, 1e-8),
            Check("none: median <dL/dy, e> (control)", float(np.median(ctrl)), 1e-3, kind="min")]


def suite_recurrence(seed=0, steps=200):
    cfg = TrainConfig(seed=seed, method="bn", max_steps=steps, learning_rate=0.1,
                      metric_every=steps)
    rec = train(cfg)
    if rec.failed:
        return [Check("run completed", float("nan"), 0.0)]
    s = rec.summary
    return [Check("|W+|^2 = |W|^2 + eta^2 |grad|^2 (rel.)", s["max_recurrence_resid"], 1e-9),
            Check("steps with a shrinking row norm", float(s["monotone_violations"]), 0.0)]


GRADIENT_METHODS = ("bn", "ln", "gn", "in", "wn", "cwn", "ws", "sn", "none")


def suite_gradients(seed=0, seeds=2):
    checks = []
    for method in GRADIENT_METHODS:
        worst = 0.0
        for k in range(seeds):
            rng = seeded_rng(2000 + seed + k)
            X = rng.standard_normal((6, 6))
            y = rng.integers(0, 3, 6)
            kw = {"groups": 2} if method == "gn" else {"channels": 2} if method == "in" else {}
            model = build_mlp(6, (8, 8), 3, method=method, seed=seed + k, **kw)
            worst = max(worst, gradient_check(model, X, y).max_rel_error)
        checks.append(Check(f"{method}: analytic vs central difference", worst, 1e-5))
    return checks


SUITES = {
    "lemma1": suite_lemma1,
    "invariance": suite_invariance,
    "normalizers": suite_normalizers,
    "kernel": suite_kernel,
    "orthogonality": suite_orthogonality,
    "preactivation": suite_preactivation,
    "recurrence": suite_recurrence,
    "gradients": suite_gradients,
}


def resolve_suite(name):
    if name not in SUITES:
        raise KeyError(name)
    return name


def run_suites(names=None, seed=0):
    names = list(SUITES) if names is None else [resolve_suite(n) for n in names]
    report = VerifyReport()
    for name in names:
        t0 = time.perf_counter()
        try:
            checks, error = SUITES[name](seed=seed), None
        except Exception as exc:  # a crashing suite is a failed suite
            checks, error = [], f"{type(exc).__name__}: {exc}"
        report.suites.append(SuiteResult(name, checks, time.perf_counter() - t0, error))
    return report
