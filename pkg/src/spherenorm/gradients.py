"""A small MLP with closed-form reverse-mode gradients.

Each hidden layer is ``dense -> normalizer -> activation``; the last layer is
a plain affine head feeding softmax cross-entropy. Gradients are derived by
hand per layer type so the orthogonality identities of scaling-invariant
normalizers hold to rounding error. :func:`finite_diff` is the independent
oracle.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import (BatchTooSmallError, DegenerateInputError, DimensionError,
                     NotApplicableError, ValidationError)
from .normalizers import (AxisLayout, Method, NormalizerSpec,
                          standardize_slices, standardize_slices_backward)
from .tensor import as_tensor, power_iteration, seeded_rng

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class Layer:
    W: np.ndarray
    norm: NormalizerSpec = field(default_factory=NormalizerSpec)
    activation: str = "relu"
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.W = as_tensor(self.W, ndim=2)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm.method is not Method.NONE:
            self.norm.init_affine(self.W.shape[0])
        if self.bias is not None:
            self.bias = as_tensor(self.bias, ndim=1)

    @property
    def method(self):
        return self.norm.method

    def params(self):
        """Trainable arrays by name; the arrays are live references."""
        out = {"W": self.W}
        if self.bias is not None:
            out["bias"] = self.bias
        if self.method is not Method.NONE:
            out["gamma"] = self.norm.gamma
            out["beta"] = self.norm.beta
        return out

    def copy(self):
        return Layer(self.W.copy(), self.norm.copy(), self.activation,
                     None if self.bias is None else self.bias.copy())


@dataclass
class MlpModel:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise DimensionError(
                    f"layer widths incompatible: {a.W.shape} then {b.W.shape}")

    @property
    def in_dim(self):
        return self.layers[0].W.shape[1]

    @property
    def num_classes(self):
        return self.layers[-1].W.shape[0]

    def copy(self):
        return MlpModel([layer.copy() for layer in self.layers])

    def with_mode(self, mode):
        model = self.copy()
        for layer in model.layers:
            layer.norm.mode = mode
        return model


def build_mlp(in_dim, widths, num_classes, method="bn", seed=0, eps=1e-5,
              activation="relu", groups=None, channels=None, init_scale=1.0):
    """Hidden layers of the given widths, each normalized by ``method``.

    Weights are drawn N(0, init_scale^2 * 2 / fan_in). GN defaults to 4
    groups of single-unit channels; IN views each width ``m`` as ``m // 4``
    channels of 4 positions.
    """
    method = Method(method)
    rng = seeded_rng(seed)
    layers = []
    fan_in = in_dim
    for m in widths:
        W = rng.standard_normal((m, fan_in)) * init_scale * np.sqrt(2.0 / fan_in)
        g, C = groups, channels
        if method is Method.GROUP and g is None:
            g = 4
        if method is Method.INSTANCE and C is None:
            C = m // 4
        spec = NormalizerSpec(method=method, eps=eps, groups=g, channels=C)
        if method.data_based:
            spec.channel_view(m)
        bias = np.zeros(m) if method is Method.NONE else None
        layers.append(Layer(W, spec, activation, bias))
        fan_in = m
    W = rng.standard_normal((num_classes, fan_in)) * np.sqrt(1.0 / fan_in)
    layers.append(Layer(W, NormalizerSpec(Method.NONE), "identity", np.zeros(num_classes)))
    return MlpModel(layers)


# ---------------------------------------------------------------------------
# forward


def _effective_weight(layer):
    """Apply the weight transform; returns ``(W_eff, aux)`` for backward."""
    V = layer.W
    method = layer.method
    if method is Method.WEIGHT:
        norms = np.linalg.norm(V, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("zero weight row under weight norm",
                                       index=int(np.argmin(norms)))
        return V / norms[:, None], norms
    if method in (Method.CENTERED_WEIGHT, Method.WEIGHT_STANDARDIZATION):
        C = V - V.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(C, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("constant weight row under centering",
                                       index=int(np.argmin(norms)))
        scale = np.sqrt(V.shape[1]) if method is Method.WEIGHT_STANDARDIZATION else 1.0
        return scale * C / norms[:, None], norms
    if method is Method.SPECTRAL:
        est = power_iteration(V, iters=layer.norm.sn_iters, seed=0, tol=1e-14)
        if est.degenerate:
            raise DegenerateInputError("zero matrix under spectral norm")
        return V / est.sigma, est
    return V, None


def _norm_layout(spec, m, B):
    """Axis layout of the data-based normalizer on an ``m x B`` pre-activation."""
    method = spec.method
    if method is Method.BATCH:
        return (m, B), AxisLayout((m, B), (1,))
    if method is Method.LAYER:
        return (m, B), AxisLayout((m, B), (0,))
    C, L, g = spec.channel_view(m)
    shape = (g, C // g, L, B)
    return shape, AxisLayout(shape, (1, 2))


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _layer_forward(layer, X):
    W_eff, aux = _effective_weight(layer)
    pre = W_eff @ X
    if layer.bias is not None:
        pre = pre + layer.bias[:, None]
    spec = layer.norm
    cache = {"X": X, "W_eff": W_eff, "aux": aux, "pre": pre}
    m, B = pre.shape
    if spec.method.data_based:
        if spec.method is Method.BATCH and spec.mode == "eval":
            inv = 1.0 / np.sqrt(spec.running_var + spec.eps ** 2)
            xhat = (pre - spec.running_mean[:, None]) * inv[:, None]
            cache["eval_inv"] = inv
        else:
            if spec.method is Method.BATCH and B < 2:
                raise BatchTooSmallError(f"batch norm needs B >= 2, got {B}")
            shape, layout = _norm_layout(spec, m, B)
            if layout.k < 2:
                raise DegenerateInputError(
                    f"{spec.method.value} slice of size {layout.k} is undefined")
            try:
                xs, inv = standardize_slices(layout.to_slices(pre.reshape(shape)), spec.eps)
            except DegenerateInputError as exc:
                raise DegenerateInputError(
                    f"{spec.method.value}: slice {exc.index} has zero variance",
                    index=exc.index) from None
            xhat = layout.from_slices(xs).reshape(m, B)
            cache.update(layout=layout, shape=shape, xs=xs, inv=inv)
        cache["xhat"] = xhat
        z = spec.gamma[:, None] * xhat + spec.beta[:, None]
    elif spec.method.weight_based:
        z = spec.gamma[:, None] * pre + spec.beta[:, None]
    else:
        z = pre
    cache["z"] = z
    out = _activate(z, layer.activation)
    return out, cache


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over columns and the softmax probabilities."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=0, keepdims=True)
    B = logits.shape[1]
    logp = shifted[labels, np.arange(B)] - np.log(expz.sum(axis=0))
    return float(-np.mean(logp)), probs


def _check_inputs(model, X, labels):
    X = as_tensor(X, ndim=2)
    if X.shape[0] != model.in_dim:
        raise DimensionError(f"input has {X.shape[0]} features, model expects {model.in_dim}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (X.shape[1],):
        raise DimensionError("need one label per column of X")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValidationError("label out of range")
    return X, labels


def logits(model, X):
    h = as_tensor(X, ndim=2)
    for layer in model.layers:
        h, _ = _layer_forward(layer, h)
    return h


def forward(model, X, labels):
    """Return ``(loss, cache)``; the cache feeds :func:`backward`."""
    X, labels = _check_inputs(model, X, labels)
    caches = []
    h = X
    for layer in model.layers:
        h, cache = _layer_forward(layer, h)
        caches.append(cache)
    loss, probs = softmax_cross_entropy(h, labels)
    return loss, {"layers": caches, "probs": probs, "labels": labels, "loss": loss}


# ---------------------------------------------------------------------------
# backward


@dataclass
class GradientBundle:
    """Gradients keyed like :meth:`Layer.params`, plus input gradient and loss.

    ``pre_grads[i]`` is the gradient w.r.t. layer ``i``'s pre-activation
    ``W_eff @ X``; only filled by :func:`backward`.
    """

    layers: list
    dX: np.ndarray
    loss: float
    pre_grads: list = field(default_factory=list)

    def flat(self, include_input=True):
        parts = [g.ravel() for grads in self.layers for g in grads.values()]
        if include_input:
            parts.append(self.dX.ravel())
        return np.concatenate(parts)


def _weight_backward(layer, cache, dW_eff):
    """Pull the gradient of the effective weight back to the raw parameter."""
    method = layer.method
    W_eff, aux = cache["W_eff"], cache["aux"]
    if method is Method.WEIGHT:
        u = W_eff
        radial = np.sum(dW_eff * u, axis=1, keepdims=True)
        return (dW_eff - radial * u) / aux[:, None]
    if method in (Method.CENTERED_WEIGHT, Method.WEIGHT_STANDARDIZATION):
        scale = np.sqrt(W_eff.shape[1]) if method is Method.WEIGHT_STANDARDIZATION else 1.0
        u = W_eff / scale
        g = scale * dW_eff
        radial = np.sum(g * u, axis=1, keepdims=True)
        dC = (g - radial * u) / aux[:, None]
        return dC - dC.mean(axis=1, keepdims=True)
    if method is Method.SPECTRAL:
        est = aux
        # W_eff = V / sigma(V), d sigma = u^T dV v
        coupling = float(np.sum(dW_eff * layer.W)) / est.sigma ** 2
        return dW_eff / est.sigma - coupling * np.outer(est.u, est.v)
    return dW_eff


def backward(model, X, labels, cache=None):
    """Exact gradients of the mean cross-entropy w.r.t. every parameter and X."""
    if cache is None:
        _, cache = forward(model, X, labels)
    loss = cache["loss"]
    labels = cache["labels"]
    probs = cache["probs"]
    B = probs.shape[1]
    delta = probs.copy()
    delta[labels, np.arange(B)] -= 1.0
    delta /= B

    grads = [None] * len(model.layers)
    pre_grads = [None] * len(model.layers)
    da = delta
    for i in range(len(model.layers) - 1, -1, -1):
        layer, c = model.layers[i], cache["layers"][i]
        spec = layer.norm
        z = c["z"]
        if layer.activation == "relu":
            dz = da * (z > 0.0)
        elif layer.activation == "tanh":
            dz = da * (1.0 - np.tanh(z) ** 2)
        else:
            dz = da
        g = {}
        if spec.method.data_based:
            xhat = c["xhat"]
            g_gamma = np.sum(dz * xhat, axis=1)
            g_beta = np.sum(dz, axis=1)
            dxhat = spec.gamma[:, None] * dz
            if "eval_inv" in c:
                dpre = dxhat * c["eval_inv"][:, None]
            else:
                layout = c["layout"]
                ds = layout.to_slices(dxhat.reshape(c["shape"]))
                dpre = layout.from_slices(
                    standardize_slices_backward(ds, c["xs"], c["inv"])).reshape(z.shape)
        elif spec.method.weight_based:
            g_gamma = np.sum(dz * c["pre"], axis=1)
            g_beta = np.sum(dz, axis=1)
            dpre = spec.gamma[:, None] * dz
        else:
            dpre = dz
        dW_eff = dpre @ c["X"].T
        g["W"] = _weight_backward(layer, c, dW_eff)
        if layer.bias is not None:
            g["bias"] = np.sum(dpre, axis=1)
        if spec.method is not Method.NONE:
            g["gamma"] = g_gamma
            g["beta"] = g_beta
        grads[i] = g
        pre_grads[i] = dpre
        da = c["W_eff"].T @ dpre
    return GradientBundle(layers=grads, dX=da, loss=loss, pre_grads=pre_grads)


def loss_value(model, X, labels):
    return forward(model, X, labels)[0]


# ---------------------------------------------------------------------------
# finite-difference oracle


def _loss_and_masks(model, X, labels):
    loss, cache = forward(model, X, labels)
    masks = [c["z"] > 0.0 for layer, c in zip(model.layers, cache["layers"])
             if layer.activation == "relu"]
    return loss, masks


class FiniteDiffResult(NamedTuple):
    grads: GradientBundle
    valid: GradientBundle  # 1.0 where neither probe crossed a ReLU kink


def finite_diff(model, X, labels, h=1e-5):
    """Central differences ``(L(p + h) - L(p - h)) / 2h`` per coordinate.

    A coordinate is marked invalid when either probe flips the sign of any
    ReLU input, i.e. the difference straddles a kink.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    X, labels = _check_inputs(model, X, labels)
    model = model.copy()
    X = X.copy()
    _, base_masks = _loss_and_masks(model, X, labels)

    def probe(arr):
        g = np.zeros_like(arr)
        ok = np.ones_like(arr)
        flat, gflat, okflat = arr.reshape(-1), g.reshape(-1), ok.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp, mp = _loss_and_masks(model, X, labels)
            flat[j] = orig - h
            lm, mm = _loss_and_masks(model, X, labels)
            flat[j] = orig
            gflat[j] = (lp - lm) / (2.0 * h)
            if any(np.any(a != b) or np.any(a != c)
                   for a, b, c in zip(base_masks, mp, mm)):
                okflat[j] = 0.0
        return g, ok

    grads, valid = [], []
    for layer in model.layers:
        gl, vl = {}, {}
        for name, arr in layer.params().items():
            gl[name], vl[name] = probe(arr)
        grads.append(gl)
        valid.append(vl)
    dX, vX = probe(X)
    loss = loss_value(model, X, labels)
    return FiniteDiffResult(GradientBundle(grads, dX, loss), GradientBundle(valid, vX, loss))


def scalar_finite_diff(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        g.flat[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# scaling-symmetry checks


def invariance_blocks(layer):
    """Row groups whose joint positive rescaling leaves the loss unchanged.

    BN, WN, CWN and WS are invariant per row. IN and GN are invariant per
    channel or group of rows; LN and SN only for the whole matrix. ``None``
    means the layer has no such symmetry.
    """
    method = layer.method
    m = layer.W.shape[0]
    if method in (Method.BATCH, Method.WEIGHT, Method.CENTERED_WEIGHT,
                  Method.WEIGHT_STANDARDIZATION):
        return [np.array([i]) for i in range(m)]
    if method in (Method.LAYER, Method.SPECTRAL):
        return [np.arange(m)]
    if method in (Method.GROUP, Method.INSTANCE):
        C, L, g = layer.norm.channel_view(m)
        per_group = (C // g) * L
        return [np.arange(k * per_group, (k + 1) * per_group) for k in range(g)]
    return None


class ScalingReport(NamedTuple):
    max_deviation: float
    invariant: bool  # whether the layer's normalizer predicts invariance


def check_scaling_invariance(model, X, labels, layer_index, alphas=(0.5, 2.0, 10.0)):
    """Max ``|L(Lambda W) - L(W)|`` over positive rescalings of layer weights.

    Each alpha is applied to every invariance block; a mixed scaling then
    gives successive blocks successive alphas. For a layer without a
    scaling symmetry the rescaling is per row and ``invariant`` is False.
    """
    if any(a <= 0 for a in alphas):
        raise ValueError("alphas must be positive")
    base = loss_value(model, X, labels)
    layer = model.layers[layer_index]
    blocks = invariance_blocks(layer)
    invariant = blocks is not None
    if blocks is None:
        blocks = [np.array([i]) for i in range(layer.W.shape[0])]
    plans = [[a] * len(blocks) for a in alphas]
    plans.append([alphas[k % len(alphas)] for k in range(len(blocks))])
    worst = 0.0
    for plan in plans:
        scaled = model.copy()
        W = scaled.layers[layer_index].W
        for rows, a in zip(blocks, plan):
            W[rows] *= a
        worst = max(worst, abs(loss_value(scaled, X, labels) - base))
    return ScalingReport(worst, invariant)


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb)), False


@dataclass
class OrthogonalityReport:
    layer: int
    method: str
    row_cosines: np.ndarray
    block_cosines: np.ndarray
    zero_gradient: np.ndarray  # per row


def check_grad_orthogonality(model, X, labels, grads=None):
    """Cosine between each weight row and its gradient, for every hidden layer.

    ``block_cosines`` measures the same quantity over each invariance block
    (see :func:`invariance_blocks`); it is empty for unnormalized layers.
    """
    if grads is None:
        grads = backward(model, X, labels)
    reports = []
    for i, layer in enumerate(model.layers[:-1]):
        W, G = layer.W, grads.layers[i]["W"]
        rows = [_cosine(W[r], G[r]) for r in range(W.shape[0])]
        blocks = invariance_blocks(layer) or []
        reports.append(OrthogonalityReport(
            layer=i, method=layer.method.value,
            row_cosines=np.array([c for c, _ in rows]),
            block_cosines=np.array([_cosine(W[b], G[b])[0] for b in blocks]),
            zero_gradient=np.array([z for _, z in rows])))
    return reports


@dataclass
class PreactivationReport:
    layer: int
    yhat_inner: np.ndarray  # |<dL/dy_j, yhat_j>| / (||dL/dy_j|| ||yhat_j||)
    ones_inner: np.ndarray  # |<dL/dy_j, e>| / (||dL/dy_j|| sqrt(B))


def check_bn_preactivation_orthogonality(model, X, labels):
    """Per BN unit, the normalized inner products of the pre-activation
    gradient with the standardized pre-activation and with ``e_B``.

    Layers without a normalizer are reported against their own standardized
    pre-activation, which makes them usable as a control.
    """
    loss, cache = forward(model, X, labels)
    grads = backward(model, X, labels, cache=cache)
    out = []
    for i, layer in enumerate(model.layers[:-1]):
        if layer.method not in (Method.BATCH, Method.NONE):
            continue
        gy = grads.pre_grads[i]
        pre = cache["layers"][i]["pre"]
        yc = pre - pre.mean(axis=1, keepdims=True)
        B = pre.shape[1]
        gnorm = np.linalg.norm(gy, axis=1)
        ynorm = np.linalg.norm(yc, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            a = np.abs(np.sum(gy * yc, axis=1)) / (gnorm * ynorm)
            b = np.abs(gy.sum(axis=1)) / (gnorm * np.sqrt(B))
        out.append(PreactivationReport(i, np.nan_to_num(a), np.nan_to_num(b)))
    return out


class GradientCheck(NamedTuple):
    max_rel_error: float
    max_abs_error: float
    checked: int  # coordinates compared
    skipped: int  # coordinates whose probes crossed a ReLU kink


def relative_error(a, b, floor=1e-4):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps coordinates whose true gradient is ~0 from turning
    finite-difference rounding noise into a large ratio.
    """
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(model, X, labels, h=1e-5, floor=1e-4):
    analytic = backward(model, X, labels).flat()
    fd = finite_diff(model, X, labels, h=h)
    numeric, valid = fd.grads.flat(), fd.valid.flat() > 0
    if not np.any(valid):
        return GradientCheck(0.0, 0.0, 0, int(valid.size))
    rel = relative_error(analytic[valid], numeric[valid], floor)
    return GradientCheck(float(rel.max()), float(np.abs(analytic - numeric)[valid].max()),
                         int(valid.sum()), int((~valid).sum()))
