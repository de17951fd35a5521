"""Two-branch feature network with a shared trunk, projection heads, a
fused classifier, and a shared feature-type discriminator.

Forward and reverse passes are written directly in numpy (float64), which
keeps runs bit-reproducible and lets gradients be checked against central
finite differences.

Layer arithmetic, for patch size S, band count B, feature dim d, and K
classes (all convolutions are stride 1 with zero "same" padding):

``compact3d`` trunk::

    input    (m, 1, S, S, B)
    conv3d   1 -> 4, kernel 3x3x3, relu      (m, 4, S, S, B)
    conv3d   4 -> 8, kernel 3x3x3, relu      (m, 8, S, S, B)
    flatten                                  (m, 8*S*S*B)
    linear   8*S*S*B -> 2d, norm, tanh       (m, 2d)

``hybrid`` trunk::

    input    (m, 1, S, S, B)
    conv3d   1 -> 4, kernel 3x3x3, relu      (m, 4, S, S, B)
    regroup  bands into channels             (m, 4*B, S, S)
    conv2d   4*B -> 8, kernel 3x3, relu      (m, 8, S, S)
    flatten                                  (m, 8*S*S)
    linear   8*S*S -> 2d, norm, tanh         (m, 2d)

``plain2d`` trunk::

    input    (m, B, S, S)
    conv2d   B -> 8, kernel 3x3, relu        (m, 8, S, S)
    conv2d   8 -> 16, kernel 3x3, relu       (m, 16, S, S)
    flatten                                  (m, 16*S*S)
    linear   16*S*S -> 2d, norm, tanh        (m, 2d)

``norm`` standardizes each sample's vector to zero mean and unit variance
(no learnable parameters); after the trunk linear a tanh then bounds it.
The bounded output is split into halves: the first d columns feed the
environmental branch, the last d the categorical branch.  Each branch
head is one linear d -> d layer, standardized the same way, plus relu.
Each projection head is an MLP over ``projection_dims`` with
standardize+relu between layers and a raw linear final layer.

The standardization is load-bearing for stability, not a stylistic
choice.  The batch losses are sums, so at the fixed learning rate
gradient magnitudes scale with batch size; in an unnormalized network
feature magnitudes and classifier gradients amplify each other until the
run diverges.  Standardizing pins every hidden activation scale
regardless of weight growth, and gradients through the normalizer shrink
as weights grow, which turns the runaway into negative feedback.  Being
per-sample, it keeps each output independent of batch composition.  One
consequence: for every standardized layer, the components of the bias
gradient sum to zero (the normalizer removes a common shift, so shifting
all features together has no effect), though individual components still
train.
The classifier is a single affine map d -> K plus softmax applied to the
elementwise product of the two branch features.  The discriminator is one
MLP over ``discriminator_dims`` (last width 2) plus softmax, applied with
the *same* parameters to both branch features.

Parameters are initialized uniformly in ``[-1/sqrt(fan_in), +1/sqrt(fan_in)]``
(weights and biases alike), drawn in a fixed catalog order from a stream
keyed on ``init_seed``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses
from ._util import atomic_write_bytes, canonical_json, seeded_rng

BACKBONE_KINDS = ("compact3d", "hybrid", "plain2d")

_CKPT_MAGIC = b"HSIDCKPT"
_CKPT_VERSION = 1
_INIT_STREAM = 301
_NORM_EPS = 1e-8

_OFFS3 = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
_OFFS2 = [(i, j) for i in range(3) for j in range(3)]


class DivergenceError(RuntimeError):
    """An activation, loss, or gradient went non-finite (or degenerate)."""


@dataclass(frozen=True)
class NetworkSpec:
    """Static architecture description; fixes every parameter shape."""

    num_classes: int
    bands: int
    patch_size: int = 5
    backbone_kind: str = "compact3d"
    feature_dim: int = 128
    projection_dims: tuple[int, ...] = (128, 64, 64)
    discriminator_dims: tuple[int, ...] = (128, 64, 2)
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "projection_dims", tuple(int(v) for v in self.projection_dims))
        object.__setattr__(self, "discriminator_dims", tuple(int(v) for v in self.discriminator_dims))
        if self.num_classes < 2:
            raise ValueError(f"need at least two classes, got {self.num_classes}")
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 1, got {self.patch_size}")
        if self.backbone_kind not in BACKBONE_KINDS:
            raise ValueError(f"backbone_kind must be one of {BACKBONE_KINDS}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        for name, dims in (
            ("projection_dims", self.projection_dims),
            ("discriminator_dims", self.discriminator_dims),
        ):
            if len(dims) < 2 or min(dims) < 1:
                raise ValueError(f"{name} needs >= 2 positive widths, got {dims}")
            if dims[0] != self.feature_dim:
                raise ValueError(f"{name} must start at feature_dim={self.feature_dim}")
        if self.discriminator_dims[-1] != 2:
            raise ValueError("discriminator output width must be 2")


def _trunk_flat_dim(spec: NetworkSpec) -> int:
    s, b = spec.patch_size, spec.bands
    if spec.backbone_kind == "compact3d":
        return 8 * s * s * b
    if spec.backbone_kind == "hybrid":
        return 8 * s * s
    return 16 * s * s


def _param_specs(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...], float]]:
    """Fixed catalog of (name, shape, init bound); init draw order."""
    d, b = spec.feature_dim, spec.bands
    entries: list[tuple[str, tuple[int, ...], float]] = []

    def _layer(name: str, shape: tuple[int, ...], fan_in: int):
        bound = 1.0 / float(np.sqrt(fan_in))
        entries.append((f"{name}.weight", shape, bound))
        entries.append((f"{name}.bias", (shape[-1],) if len(shape) == 2 else (shape[0],), bound))

    if spec.backbone_kind == "compact3d":
        _layer("backbone.conv1", (4, 1, 3, 3, 3), 1 * 27)
        _layer("backbone.conv2", (8, 4, 3, 3, 3), 4 * 27)
    elif spec.backbone_kind == "hybrid":
        _layer("backbone.conv1", (4, 1, 3, 3, 3), 1 * 27)
        _layer("backbone.conv2", (8, 4 * b, 3, 3), 4 * b * 9)
    else:
        _layer("backbone.conv1", (8, b, 3, 3), b * 9)
        _layer("backbone.conv2", (16, 8, 3, 3), 8 * 9)
    flat = _trunk_flat_dim(spec)
    _layer("backbone.fc", (flat, 2 * d), flat)
    _layer("branch_env", (d, d), d)
    _layer("branch_cat", (d, d), d)
    for prefix in ("proj_env", "proj_cat"):
        dims = spec.projection_dims
        for i in range(1, len(dims)):
            _layer(f"{prefix}.fc{i}", (dims[i - 1], dims[i]), dims[i - 1])
    _layer("classifier", (d, spec.num_classes), d)
    dims = spec.discriminator_dims
    for i in range(1, len(dims)):
        _layer(f"disc.fc{i}", (dims[i - 1], dims[i]), dims[i - 1])
    return entries


def parameter_count(spec: NetworkSpec) -> int:
    return int(sum(np.prod(shape) for _, shape, _ in _param_specs(spec)))


@dataclass
class ModelState:
    """Architecture plus the current float64 parameter values.

    The trainer updates ``params`` in place; nothing mutates a model
    concurrently with reading it.
    """

    spec: NetworkSpec
    params: dict[str, np.ndarray]

    def validate(self) -> None:
        catalog = {name: shape for name, shape, _ in _param_specs(self.spec)}
        if set(self.params) != set(catalog):
            missing = sorted(set(catalog) - set(self.params))
            extra = sorted(set(self.params) - set(catalog))
            raise ValueError(f"parameter names mismatch: missing={missing}, extra={extra}")
        for name, arr in self.params.items():
            if arr.shape != catalog[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {catalog[name]}")
            if arr.dtype != np.float64:
                raise ValueError(f"{name} must be float64, got {arr.dtype}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} holds non-finite values")

    def copy(self) -> "ModelState":
        return ModelState(spec=self.spec, params={k: v.copy() for k, v in self.params.items()})


@dataclass(frozen=True)
class ForwardOutputs:
    """Everything downstream of one batch: branch features f_env/f_cat,
    their projections, the fused product, and the three softmax heads."""

    env_features: np.ndarray
    cat_features: np.ndarray
    env_proj: np.ndarray
    cat_proj: np.ndarray
    fused: np.ndarray
    class_probs: np.ndarray
    disc_probs_env: np.ndarray
    disc_probs_cat: np.ndarray


def init_model(spec: NetworkSpec) -> ModelState:
    """Draw fresh parameters; same spec (incl. seed) gives identical bits."""
    rng = seeded_rng(spec.init_seed, _INIT_STREAM)
    params = {
        name: rng.uniform(-bound, bound, size=shape)
        for name, shape, bound in _param_specs(spec)
    }
    return ModelState(spec=spec, params=params)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fuse_features(env_features: np.ndarray, cat_features: np.ndarray) -> np.ndarray:
    """Elementwise (Hadamard) product of the two branch feature matrices."""
    env = np.asarray(env_features, dtype=np.float64)
    cat = np.asarray(cat_features, dtype=np.float64)
    if env.shape != cat.shape or env.ndim != 2:
        raise ValueError(f"branch features must be equal (m, d) arrays, got {env.shape} and {cat.shape}")
    return env * cat


# ---------------------------------------------------------------------------
# layer primitives (forward caches what backward needs; backward pops it)

def _conv3d_fw(cache: dict, tag: str, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, cin, h, wd, dp = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.stack(
        [xp[:, :, i:i + h, j:j + wd, k:k + dp] for i, j, k in _OFFS3], axis=2
    )
    cols2 = np.ascontiguousarray(cols.transpose(0, 3, 4, 5, 1, 2)).reshape(-1, cin * 27)
    y2 = cols2 @ w.reshape(cout, -1).T + b
    cache[tag + ".cols"] = cols2
    cache[tag + ".dims"] = (m, cin, h, wd, dp)
    return np.ascontiguousarray(y2.reshape(m, h, wd, dp, cout).transpose(0, 4, 1, 2, 3))


def _conv3d_bw(
    cache: dict, tag: str, params: dict, grads: dict, layer: str, dy: np.ndarray, need_dx: bool
) -> np.ndarray | None:
    m, cin, h, wd, dp = cache.pop(tag + ".dims")
    cols2 = cache.pop(tag + ".cols")
    w = params[layer + ".weight"]
    cout = w.shape[0]
    dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
    grads[layer + ".weight"] += (cols2.T @ dy2).T.reshape(w.shape)
    grads[layer + ".bias"] += dy2.sum(axis=0)
    if not need_dx:
        return None
    dcols = (dy2 @ w.reshape(cout, -1)).reshape(m, h, wd, dp, cin, 27).transpose(0, 4, 5, 1, 2, 3)
    dxp = np.zeros((m, cin, h + 2, wd + 2, dp + 2))
    for idx, (i, j, k) in enumerate(_OFFS3):
        dxp[:, :, i:i + h, j:j + wd, k:k + dp] += dcols[:, :, idx]
    return dxp[:, :, 1:-1, 1:-1, 1:-1]


def _conv2d_fw(cache: dict, tag: str, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, :, i:i + h, j:j + wd] for i, j in _OFFS2], axis=2)
    cols2 = np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(-1, cin * 9)
    y2 = cols2 @ w.reshape(cout, -1).T + b
    cache[tag + ".cols"] = cols2
    cache[tag + ".dims"] = (m, cin, h, wd)
    return np.ascontiguousarray(y2.reshape(m, h, wd, cout).transpose(0, 3, 1, 2))


def _conv2d_bw(
    cache: dict, tag: str, params: dict, grads: dict, layer: str, dy: np.ndarray, need_dx: bool
) -> np.ndarray | None:
    m, cin, h, wd = cache.pop(tag + ".dims")
    cols2 = cache.pop(tag + ".cols")
    w = params[layer + ".weight"]
    cout = w.shape[0]
    dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, cout)
    grads[layer + ".weight"] += (cols2.T @ dy2).T.reshape(w.shape)
    grads[layer + ".bias"] += dy2.sum(axis=0)
    if not need_dx:
        return None
    dcols = (dy2 @ w.reshape(cout, -1)).reshape(m, h, wd, cin, 9).transpose(0, 3, 4, 1, 2)
    dxp = np.zeros((m, cin, h + 2, wd + 2))
    for idx, (i, j) in enumerate(_OFFS2):
        dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, idx]
    return dxp[:, :, 1:-1, 1:-1]


def _std_fw(cache: dict, tag: str, z: np.ndarray) -> np.ndarray:
    """Standardize each row to zero mean / unit variance (no parameters).

    Width-1 rows pass through unchanged (their variance is identically 0).
    """
    if z.shape[1] < 2:
        cache[tag + ".inv"] = None
        return z
    inv = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + _NORM_EPS)
    zhat = (z - z.mean(axis=1, keepdims=True)) * inv
    cache[tag + ".inv"] = inv
    cache[tag + ".zhat"] = zhat
    return zhat


def _std_bw(cache: dict, tag: str, dzhat: np.ndarray) -> np.ndarray:
    inv = cache.pop(tag + ".inv")
    if inv is None:
        return dzhat
    zhat = cache.pop(tag + ".zhat")
    # remove the mean and the zhat-aligned component, then rescale
    return inv * (
        dzhat
        - dzhat.mean(axis=1, keepdims=True)
        - zhat * (dzhat * zhat).mean(axis=1, keepdims=True)
    )


def _mlp_fw(cache: dict, params: dict, prefix: str, tag: str, x: np.ndarray, n_layers: int) -> np.ndarray:
    h = x
    for i in range(1, n_layers + 1):
        cache[f"{tag}.fc{i}.x"] = h
        z = h @ params[f"{prefix}.fc{i}.weight"] + params[f"{prefix}.fc{i}.bias"]
        if i < n_layers:
            zhat = _std_fw(cache, f"{tag}.fc{i}", z)
            cache[f"{tag}.fc{i}.zh"] = zhat
            h = np.maximum(zhat, 0.0)
        else:
            h = z
    return h


def _mlp_bw(cache: dict, params: dict, grads: dict, prefix: str, tag: str, dy: np.ndarray, n_layers: int) -> np.ndarray:
    for i in range(n_layers, 0, -1):
        if i < n_layers:
            dy = dy * (cache.pop(f"{tag}.fc{i}.zh") > 0)
            dy = _std_bw(cache, f"{tag}.fc{i}", dy)
        x = cache.pop(f"{tag}.fc{i}.x")
        grads[f"{prefix}.fc{i}.weight"] += x.T @ dy
        grads[f"{prefix}.fc{i}.bias"] += dy.sum(axis=0)
        dy = dy @ params[f"{prefix}.fc{i}.weight"].T
    return dy


# ---------------------------------------------------------------------------
# full passes

def _forward_cached(model: ModelState, batch: np.ndarray) -> tuple[ForwardOutputs, dict]:
    spec = model.spec
    p = model.params
    x = np.ascontiguousarray(batch, dtype=np.float64)
    s, b, d = spec.patch_size, spec.bands, spec.feature_dim
    if x.ndim != 4 or x.shape[1:] != (s, s, b):
        raise ValueError(f"batch must be (m, {s}, {s}, {b}), got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("batch must hold at least one sample")
    if not np.isfinite(x).all():
        raise DivergenceError("non-finite values in the input batch")
    m = x.shape[0]
    cache: dict = {}

    if spec.backbone_kind == "compact3d":
        z1 = _conv3d_fw(cache, "bb1", x[:, None], p["backbone.conv1.weight"], p["backbone.conv1.bias"])
        cache["bb1.z"] = z1
        z2 = _conv3d_fw(cache, "bb2", np.maximum(z1, 0.0), p["backbone.conv2.weight"], p["backbone.conv2.bias"])
        cache["bb2.z"] = z2
        flat = np.maximum(z2, 0.0).reshape(m, -1)
    elif spec.backbone_kind == "hybrid":
        z1 = _conv3d_fw(cache, "bb1", x[:, None], p["backbone.conv1.weight"], p["backbone.conv1.bias"])
        cache["bb1.z"] = z1
        a1 = np.maximum(z1, 0.0)
        regrouped = np.ascontiguousarray(a1.transpose(0, 1, 4, 2, 3)).reshape(m, 4 * b, s, s)
        z2 = _conv2d_fw(cache, "bb2", regrouped, p["backbone.conv2.weight"], p["backbone.conv2.bias"])
        cache["bb2.z"] = z2
        flat = np.maximum(z2, 0.0).reshape(m, -1)
    else:
        x2 = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
        z1 = _conv2d_fw(cache, "bb1", x2, p["backbone.conv1.weight"], p["backbone.conv1.bias"])
        cache["bb1.z"] = z1
        z2 = _conv2d_fw(cache, "bb2", np.maximum(z1, 0.0), p["backbone.conv2.weight"], p["backbone.conv2.bias"])
        cache["bb2.z"] = z2
        flat = np.maximum(z2, 0.0).reshape(m, -1)

    cache["fc.x"] = flat
    z_trunk = flat @ p["backbone.fc.weight"] + p["backbone.fc.bias"]
    trunk = np.tanh(_std_fw(cache, "fc", z_trunk))
    cache["fc.t"] = trunk
    t_env, t_cat = trunk[:, :d], trunk[:, d:]

    cache["branch_env.x"] = t_env
    z_env = _std_fw(cache, "branch_env", t_env @ p["branch_env.weight"] + p["branch_env.bias"])
    cache["branch_env.zh"] = z_env
    f_env = np.maximum(z_env, 0.0)

    cache["branch_cat.x"] = t_cat
    z_cat = _std_fw(cache, "branch_cat", t_cat @ p["branch_cat.weight"] + p["branch_cat.bias"])
    cache["branch_cat.zh"] = z_cat
    f_cat = np.maximum(z_cat, 0.0)

    n_proj = len(spec.projection_dims) - 1
    n_disc = len(spec.discriminator_dims) - 1
    env_proj = _mlp_fw(cache, p, "proj_env", "proj_env", f_env, n_proj)
    cat_proj = _mlp_fw(cache, p, "proj_cat", "proj_cat", f_cat, n_proj)
    fused = f_env * f_cat
    class_logits = fused @ p["classifier.weight"] + p["classifier.bias"]
    disc_env_logits = _mlp_fw(cache, p, "disc", "disc@env", f_env, n_disc)
    disc_cat_logits = _mlp_fw(cache, p, "disc", "disc@cat", f_cat, n_disc)

    for name, arr in (
        ("trunk output", z_trunk),
        ("environmental projection", env_proj),
        ("categorical projection", cat_proj),
        ("class logits", class_logits),
        ("discriminator logits (env)", disc_env_logits),
        ("discriminator logits (cat)", disc_cat_logits),
    ):
        if not np.isfinite(arr).all():
            raise DivergenceError(f"non-finite {name}")

    outputs = ForwardOutputs(
        env_features=f_env,
        cat_features=f_cat,
        env_proj=env_proj,
        cat_proj=cat_proj,
        fused=fused,
        class_probs=_softmax(class_logits),
        disc_probs_env=_softmax(disc_env_logits),
        disc_probs_cat=_softmax(disc_cat_logits),
    )
    return outputs, cache


def forward(model: ModelState, batch: np.ndarray, mode: str = "eval") -> ForwardOutputs:
    """Run one batch through the network.

    There are no stochastic layers, so ``train`` and ``eval`` behave
    identically; the mode argument exists for interface parity and is
    validated.  Raises :class:`DivergenceError` when any activation goes
    non-finite.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    outputs, _ = _forward_cached(model, batch)
    return outputs


def _embedding_grad(vectors: np.ndarray, labels: np.ndarray, margin: float) -> np.ndarray:
    """Gradient of the ordered-pair cosine embedding sum w.r.t. each row."""
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise DivergenceError("zero-norm projection row (cosine gradient undefined)")
    unit = vectors / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    same = labels[:, None] == labels[None, :]
    # dl/dcos per pair: -1 for like pairs, +1 for unlike pairs past the
    # margin, 0 otherwise; self-pairs contribute exactly nothing.
    coef = np.where(same, -1.0, (cos > margin).astype(np.float64))
    np.fill_diagonal(coef, 0.0)
    row_mix = coef @ unit
    diag = (coef * cos).sum(axis=1)
    # Each unordered pair appears twice in the ordered sum, hence factor 2.
    return 2.0 * (row_mix - diag[:, None] * unit) / norms[:, None]


def loss_and_gradient(
    model: ModelState,
    batch: np.ndarray,
    pseudo_labels: np.ndarray,
    labels: np.ndarray,
    cfg: losses.LossConfig,
) -> tuple[losses.LossBreakdown, dict[str, np.ndarray]]:
    """Loss components plus d(total)/d(param) for every parameter.

    The returned dict has exactly the model's parameter names and shapes.
    Component weights of zero contribute zero gradient (their value is
    still reported in the breakdown).  Raises :class:`DivergenceError`
    when activations, the loss, or the gradients go non-finite.
    """
    spec = model.spec
    p = model.params
    pseudo = np.asarray(pseudo_labels).reshape(-1)
    lab = np.asarray(labels).reshape(-1)
    m = len(np.asarray(batch))
    if len(pseudo) != m or len(lab) != m:
        raise ValueError(f"batch of {m} needs {m} pseudo-labels and {m} labels")
    if m and (lab.min() < 1 or lab.max() > spec.num_classes):
        raise ValueError(f"labels must lie in 1..{spec.num_classes}")
    if m and pseudo.min() < 1:
        raise ValueError("pseudo-labels must be >= 1")

    outputs, cache = _forward_cached(model, batch)
    try:
        breakdown = losses.total_loss(outputs, pseudo, lab, cfg)
    except ValueError as exc:
        raise DivergenceError(f"loss undefined: {exc}") from exc

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    n_proj = len(spec.projection_dims) - 1
    n_disc = len(spec.discriminator_dims) - 1
    f_env, f_cat = outputs.env_features, outputs.cat_features

    # classification head: d(sum CE)/d(logits) = probs - onehot
    dlogits = outputs.class_probs.copy()
    dlogits[np.arange(m), lab - 1] -= 1.0
    grads["classifier.weight"] += outputs.fused.T @ dlogits
    grads["classifier.bias"] += dlogits.sum(axis=0)
    dfused = dlogits @ p["classifier.weight"].T
    df_env = dfused * f_cat
    df_cat = dfused * f_env

    if cfg.gamma != 0.0:
        denv = outputs.disc_probs_env.copy()
        denv[:, 0] -= 1.0
        dcat = outputs.disc_probs_cat.copy()
        dcat[:, 1] -= 1.0
        df_env += _mlp_bw(cache, p, grads, "disc", "disc@env", cfg.gamma * denv, n_disc)
        df_cat += _mlp_bw(cache, p, grads, "disc", "disc@cat", cfg.gamma * dcat, n_disc)
    if cfg.alpha != 0.0:
        dproj = cfg.alpha * _embedding_grad(outputs.env_proj, pseudo, cfg.margin)
        df_env += _mlp_bw(cache, p, grads, "proj_env", "proj_env", dproj, n_proj)
    if cfg.beta != 0.0:
        dproj = cfg.beta * _embedding_grad(outputs.cat_proj, lab, cfg.margin)
        df_cat += _mlp_bw(cache, p, grads, "proj_cat", "proj_cat", dproj, n_proj)

    dz_env = _std_bw(cache, "branch_env", df_env * (cache.pop("branch_env.zh") > 0))
    grads["branch_env.weight"] += cache.pop("branch_env.x").T @ dz_env
    grads["branch_env.bias"] += dz_env.sum(axis=0)
    dt_env = dz_env @ p["branch_env.weight"].T

    dz_cat = _std_bw(cache, "branch_cat", df_cat * (cache.pop("branch_cat.zh") > 0))
    grads["branch_cat.weight"] += cache.pop("branch_cat.x").T @ dz_cat
    grads["branch_cat.bias"] += dz_cat.sum(axis=0)
    dt_cat = dz_cat @ p["branch_cat.weight"].T

    dtrunk = np.concatenate([dt_env, dt_cat], axis=1)
    t = cache.pop("fc.t")
    dz_trunk = _std_bw(cache, "fc", dtrunk * (1.0 - t * t))
    flat = cache.pop("fc.x")
    grads["backbone.fc.weight"] += flat.T @ dz_trunk
    grads["backbone.fc.bias"] += dz_trunk.sum(axis=0)
    dflat = dz_trunk @ p["backbone.fc.weight"].T

    s, b = spec.patch_size, spec.bands
    if spec.backbone_kind == "compact3d":
        z2 = cache.pop("bb2.z")
        da2 = dflat.reshape(z2.shape) * (z2 > 0)
        da1 = _conv3d_bw(cache, "bb2", p, grads, "backbone.conv2", da2, need_dx=True)
        dz1 = da1 * (cache.pop("bb1.z") > 0)
        _conv3d_bw(cache, "bb1", p, grads, "backbone.conv1", dz1, need_dx=False)
    elif spec.backbone_kind == "hybrid":
        z2 = cache.pop("bb2.z")
        da2 = dflat.reshape(z2.shape) * (z2 > 0)
        dregrouped = _conv2d_bw(cache, "bb2", p, grads, "backbone.conv2", da2, need_dx=True)
        da1 = dregrouped.reshape(m, 4, b, s, s).transpose(0, 1, 3, 4, 2)
        dz1 = da1 * (cache.pop("bb1.z") > 0)
        _conv3d_bw(cache, "bb1", p, grads, "backbone.conv1", dz1, need_dx=False)
    else:
        z2 = cache.pop("bb2.z")
        da2 = dflat.reshape(z2.shape) * (z2 > 0)
        da1 = _conv2d_bw(cache, "bb2", p, grads, "backbone.conv2", da2, need_dx=True)
        dz1 = da1 * (cache.pop("bb1.z") > 0)
        _conv2d_bw(cache, "bb1", p, grads, "backbone.conv1", dz1, need_dx=False)

    for name, arr in grads.items():
        if not np.isfinite(arr).all():
            raise DivergenceError(f"non-finite gradient for {name}")
    return breakdown, grads


def gradient(
    model: ModelState,
    batch: np.ndarray,
    pseudo_labels: np.ndarray,
    labels: np.ndarray,
    cfg: losses.LossConfig,
) -> dict[str, np.ndarray]:
    """Just the parameter gradients from :func:`loss_and_gradient`."""
    return loss_and_gradient(model, batch, pseudo_labels, labels, cfg)[1]


# ---------------------------------------------------------------------------
# checkpoints: versioned little-endian container of named float64 arrays

def _spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "num_classes": spec.num_classes,
        "bands": spec.bands,
        "patch_size": spec.patch_size,
        "backbone_kind": spec.backbone_kind,
        "feature_dim": spec.feature_dim,
        "projection_dims": list(spec.projection_dims),
        "discriminator_dims": list(spec.discriminator_dims),
        "init_seed": spec.init_seed,
    }


def _spec_from_dict(payload: dict) -> NetworkSpec:
    try:
        return NetworkSpec(
            num_classes=int(payload["num_classes"]),
            bands=int(payload["bands"]),
            patch_size=int(payload["patch_size"]),
            backbone_kind=str(payload["backbone_kind"]),
            feature_dim=int(payload["feature_dim"]),
            projection_dims=tuple(payload["projection_dims"]),
            discriminator_dims=tuple(payload["discriminator_dims"]),
            init_seed=int(payload["init_seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed architecture description: {exc}") from exc


def save_checkpoint(model: ModelState, path: Path | str, *, train_seed: int | None = None) -> None:
    """Serialize the model (plus the training seed, for provenance).

    The byte stream is fully determined by the parameter values, the
    architecture, and ``train_seed``; equal models saved twice are
    byte-identical.  Note the meta block carries no step counter, so a
    model whose parameters never changed produces the same bytes at any
    point of training.
    """
    model.validate()
    meta = {
        "format": _CKPT_VERSION,
        "spec": _spec_to_dict(model.spec),
        "train_seed": None if train_seed is None else int(train_seed),
    }
    blob = io.BytesIO()
    blob.write(_CKPT_MAGIC)
    blob.write(struct.pack("<I", _CKPT_VERSION))
    meta_bytes = canonical_json(meta).encode("utf-8")
    blob.write(struct.pack("<I", len(meta_bytes)))
    blob.write(meta_bytes)
    names = sorted(model.params)
    blob.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        blob.write(struct.pack("<H", len(encoded)))
        blob.write(encoded)
        blob.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            blob.write(struct.pack("<Q", dim))
        blob.write(arr.tobytes())
    atomic_write_bytes(path, blob.getvalue())


def checkpoint_meta(path: Path | str) -> dict:
    """Read just the checkpoint's meta block (architecture + train seed)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 8 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version} in {path}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + meta_len > len(raw):
        raise ValueError(f"truncated checkpoint {path}")
    return json.loads(raw[off:off + meta_len].decode("utf-8"))


def load_checkpoint(path: Path | str) -> ModelState:
    """Rebuild a model from :func:`save_checkpoint` output, bit-exact."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 8 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version} in {path}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + meta_len > len(raw):
        raise ValueError(f"truncated checkpoint {path}")
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    spec = _spec_from_dict(meta.get("spec", {}))
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            end = off + 8 * size
            if end > len(raw):
                raise ValueError(f"truncated checkpoint {path}")
            params[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
            off += 8 * size
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint {path}: {exc}") from exc
    model = ModelState(spec=spec, params=params)
    model.validate()
    return model
