"""Parallel spherical-convolution branches with VLAD pooling.

Each static attribute gets its own branch:

    grid channels -> [analyse -> per-degree channel mixing -> synthesise
    -> + bias -> ReLU] x layers -> valid-cell features -> VLAD -> projection

The three branch outputs are concatenated and L2-normalised.  Every stage is
differentiated by hand; :func:`forward_with_gradients` returns exact
parameter gradients for any upstream sensitivity on the descriptor.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from . import harmonics as H
from .errors import InvalidConfig, ShapeMismatch

NORM_EPS = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EmbedConfig:
    n: int = 64
    bandwidths: tuple = (32, 16)
    channels: tuple = (2, 8, 16)
    clusters: int = 8
    branch_dim: int = 64
    max_range: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(int(b) for b in self.bandwidths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def validate(self):
        if self.clusters < 1:
            raise InvalidConfig("need at least one VLAD cluster")
        if len(self.channels) != len(self.bandwidths) + 1 or self.channels[0] != 2:
            raise InvalidConfig("channels must be (2, c1, ..., cL) with one bandwidth per layer")
        if any(c < 1 for c in self.channels) or self.branch_dim < 1:
            raise InvalidConfig("channel counts and branch_dim must be positive")
        if any(b < 1 for b in self.bandwidths):
            raise InvalidConfig("bandwidths must be positive")
        if any(b2 > b1 for b1, b2 in zip(self.bandwidths, self.bandwidths[1:])):
            raise InvalidConfig("layer bandwidths must be non-increasing")
        if 2 * self.bandwidths[0] > self.n:
            raise InvalidConfig(f"bandwidth {self.bandwidths[0]} too high for n={self.n}")
        if self.max_range <= 0:
            raise InvalidConfig("max_range must be positive")
        return self

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def descriptor_dim(self):
        return 3 * self.branch_dim


TINY_CONFIG = EmbedConfig(n=8, bandwidths=(4, 4), channels=(2, 3, 4), clusters=2, branch_dim=5)


@dataclass(frozen=True, eq=False)
class BranchModel:
    conv_h: tuple  # per layer (c_in, c_out, B)
    conv_bias: tuple  # per layer (c_out,)
    centers: np.ndarray  # (K, D)
    assign_w: np.ndarray  # (K, D)
    assign_b: np.ndarray  # (K,)
    proj: np.ndarray  # (branch_dim, K * D)

    def tensors(self):
        out = []
        for i, (h, b) in enumerate(zip(self.conv_h, self.conv_bias)):
            out += [(f"conv{i}.h", h), (f"conv{i}.bias", b)]
        out += [
            ("vlad.centers", self.centers),
            ("vlad.w", self.assign_w),
            ("vlad.b", self.assign_b),
            ("proj", self.proj),
        ]
        return out

    @classmethod
    def from_tensors(cls, named, layers):
        return cls(
            tuple(named[f"conv{i}.h"] for i in range(layers)),
            tuple(named[f"conv{i}.bias"] for i in range(layers)),
            named["vlad.centers"],
            named["vlad.w"],
            named["vlad.b"],
            named["proj"],
        )


@dataclass(frozen=True, eq=False)
class ModelParams:
    config: EmbedConfig
    branches: tuple
    seed: int = 0

    def named_tensors(self):
        """Ordered ``(name, array)`` pairs, e.g. ``b0.conv1.h``."""
        return [
            (f"b{a}.{name}", arr)
            for a, br in enumerate(self.branches)
            for name, arr in br.tensors()
        ]

    def with_tensors(self, named):
        layers = len(self.config.bandwidths)
        branches = []
        for a in range(3):
            sub = {k[len(f"b{a}."):]: v for k, v in named.items() if k.startswith(f"b{a}.")}
            branches.append(BranchModel.from_tensors(sub, layers))
        return ModelParams(self.config, tuple(branches), self.seed)

    def to_vector(self):
        return np.concatenate([a.ravel() for _, a in self.named_tensors()])

    def from_vector(self, vec):
        named, pos = {}, 0
        for name, arr in self.named_tensors():
            named[name] = np.asarray(vec[pos : pos + arr.size], dtype=np.float64).reshape(arr.shape)
            pos += arr.size
        return self.with_tensors(named)

    def groups(self):
        """Parameter group of each tensor name (branch prefix stripped)."""
        return {name: name.split(".", 1)[1] for name, _ in self.named_tensors()}


def model_init(config, seed=0):
    """Deterministic initial parameters for ``config``."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    K, D = config.clusters, config.feature_dim
    branches = []
    for _ in range(3):
        hs, bs = [], []
        for cin, cout, B in zip(config.channels, config.channels[1:], config.bandwidths):
            scale = np.sqrt(3.0 / cin) / H.degree_norm(B)
            hs.append(rng.uniform(-1.0, 1.0, size=(cin, cout, B)) * scale[None, None, :])
            bs.append(np.zeros(cout))
        centers = rng.normal(size=(K, D))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        branches.append(
            BranchModel(
                tuple(hs),
                tuple(bs),
                centers,
                rng.normal(scale=0.01, size=(K, D)),
                np.zeros(K),
                rng.normal(size=(config.branch_dim, K * D)) / np.sqrt(K * D),
            )
        )
    return ModelParams(config, tuple(branches), seed)


def init_vlad_from_data(model, stacks, sharpness=10.0, max_features=20000):
    """Set each branch's VLAD centres by k-means over features of ``stacks``.

    Assignment weights follow the nearest-centre form
    ``w_k = 2 alpha c_k``, ``b_k = -alpha |c_k|^2`` with ``alpha`` scaled so the
    typical squared feature-to-centre distance maps to ``sharpness``.
    """
    cfg = model.config
    rng = np.random.default_rng(np.random.SeedSequence([model.seed, 9]))
    branches = []
    for a, br in enumerate(model.branches):
        feats = [branch_forward(s.layers[a], br, cfg).features for s in stacks]
        X = np.concatenate([f for f in feats if len(f)] or [np.zeros((0, cfg.feature_dim))])
        if len(X) < cfg.clusters:
            branches.append(br)
            continue
        if len(X) > max_features:
            X = X[rng.choice(len(X), max_features, replace=False)]
        centers, labels = kmeans2(X, cfg.clusters, minit="++", seed=rng)
        spread = float(np.mean(np.sum((X - centers[labels]) ** 2, axis=1)))
        alpha = sharpness / max(spread, NORM_EPS)
        branches.append(
            BranchModel(
                br.conv_h,
                br.conv_bias,
                centers,
                2.0 * alpha * centers,
                -alpha * np.sum(centers**2, axis=1),
                br.proj,
            )
        )
    return ModelParams(cfg, tuple(branches), model.seed)


@dataclass(frozen=True, eq=False)
class PlaceDescriptor:
    vector: np.ndarray
    branch_dim: int
    valid: bool = True
    empty_branches: tuple = ()

    def branch(self, a):
        return self.vector[a * self.branch_dim : (a + 1) * self.branch_dim]

    def __len__(self):
        return len(self.vector)


@dataclass
class FeatureMap:
    """Local descriptors at the valid cells, ``features`` shape (N, D)."""

    features: np.ndarray
    cells: np.ndarray  # flat indices of the valid cells
    empty: bool = False
    cache: dict = field(default_factory=dict, repr=False)


def _safe_norm(v, axis=None, keepdims=False):
    return np.sqrt(np.sum(v * v, axis=axis, keepdims=keepdims) + NORM_EPS**2)


def _input_channels(image, config):
    d = np.clip(image.distance / config.max_range, 0.0, 1.0)
    x = np.stack([d, image.sine])
    return np.where(image.valid[None], x, 0.0)


def branch_forward(image, branch, config):
    """Convolution stack on one attribute image, restricted to valid cells."""
    if image.n != config.n:
        raise ShapeMismatch(f"image resolution {image.n} != model resolution {config.n}")
    x = _input_channels(image, config)
    cache = {"inputs": [], "coeffs": [], "pre": []}
    for h, bias, B in zip(branch.conv_h, branch.conv_bias, config.bandwidths):
        a = H.analyze_real(x, B)
        z = np.einsum("ilm,iol->olm", a, h * H.degree_norm(B))
        y = H.synthesize_real(z, config.n) + bias[:, None, None]
        cache["inputs"].append(x)
        cache["coeffs"].append(a)
        cache["pre"].append(y)
        x = np.maximum(y, 0.0)
    cells = np.flatnonzero(image.valid.ravel())
    feats = x.reshape(x.shape[0], -1)[:, cells].T
    return FeatureMap(np.ascontiguousarray(feats), cells, empty=len(cells) == 0, cache=cache)


def _branch_backward(fmap, branch, config, dfeat):
    n = config.n
    D = config.feature_dim
    dx = np.zeros((D, n * n))
    dx[:, fmap.cells] = dfeat.T
    dx = dx.reshape(D, n, n)
    q = H.quadrature_weights(n)[None, None, :]
    dh, dbias = [None] * len(branch.conv_h), [None] * len(branch.conv_h)
    for i in reversed(range(len(branch.conv_h))):
        B = config.bandwidths[i]
        nu = H.degree_norm(B)
        dy = dx * (fmap.cache["pre"][i] > 0.0)
        dbias[i] = dy.sum(axis=(1, 2))
        u = H.analyze_real(dy / q, B)  # (c_out, B, B)
        a = fmap.cache["coeffs"][i]  # (c_in, B, B)
        prod = np.einsum("olm,ilm->iolm", np.conj(u), a).real
        dh[i] = (2.0 * prod.sum(axis=-1) - prod[..., 0]) * nu
        if i > 0:
            back = np.einsum("olm,iol->ilm", u, branch.conv_h[i] * nu)
            dx = q * H.synthesize_real(back, n)
    return dh, dbias


def vlad_aggregate(fmap, branch):
    """Soft-assigned residual sum, intra-normalised then globally normalised.

    Returns the flattened ``(K * D,)`` vector; zero for an empty feature set.
    Raw and intermediate values are left in ``fmap.cache`` for the backward pass.
    """
    X = fmap.features
    K, D = branch.centers.shape
    if len(X) == 0:
        fmap.cache["vlad"] = None
        return np.zeros(K * D)
    s = X @ branch.assign_w.T + branch.assign_b
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=1, keepdims=True)
    V = a.T @ X - a.sum(axis=0)[:, None] * branch.centers
    nk = _safe_norm(V, axis=1, keepdims=True)
    Vn = V / nk
    v = Vn.ravel()
    nv = _safe_norm(v)
    fmap.cache["vlad"] = (a, V, nk, v, nv)
    return v / nv


def vlad_raw(features, branch):
    """Unnormalised ``V(j, k)`` as a (K, D) array (for inspection and tests)."""
    X = np.asarray(features, dtype=np.float64)
    s = X @ branch.assign_w.T + branch.assign_b
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    return a.T @ X - a.sum(axis=0)[:, None] * branch.centers


def _vlad_backward(fmap, branch, dg):
    """Gradients of the normalised VLAD output w.r.t. features and VLAD parameters."""
    X = fmap.features
    a, V, nk, v, nv = fmap.cache["vlad"]
    dv = dg / nv - v * (v @ dg) / nv**3
    dVn = dv.reshape(V.shape)
    dV = dVn / nk - V * np.sum(V * dVn, axis=1, keepdims=True) / nk**3
    dX = a @ dV
    da = X @ dV.T - np.sum(dV * branch.centers, axis=1)[None, :]
    dC = -a.sum(axis=0)[:, None] * dV
    ds = a * (da - np.sum(a * da, axis=1, keepdims=True))
    dW = ds.T @ X
    db = ds.sum(axis=0)
    dX += ds @ branch.assign_w
    return dX, dC, dW, db


@dataclass
class EmbedCache:
    fmaps: list
    vlads: list
    proj: list
    fused: np.ndarray
    fused_norm: float


def embed_forward(stack, model):
    """Forward pass keeping everything the backward pass needs."""
    cfg = model.config
    if stack.n != cfg.n:
        raise ShapeMismatch(f"stack resolution {stack.n} != model resolution {cfg.n}")
    fmaps, vlads, projs = [], [], []
    for image, br in zip(stack.layers, model.branches):
        fm = branch_forward(image, br, cfg)
        g = vlad_aggregate(fm, br)
        fmaps.append(fm)
        vlads.append(g)
        projs.append(br.proj @ g)
    u = np.concatenate(projs)
    nu = float(_safe_norm(u))
    empty = tuple(a for a, fm in enumerate(fmaps) if fm.empty)
    desc = PlaceDescriptor(u / nu, cfg.branch_dim, valid=len(empty) < 3, empty_branches=empty)
    return desc, EmbedCache(fmaps, vlads, projs, u, nu)


def embed_place(stack, model):
    return embed_forward(stack, model)[0]


def embed_backward(cache, model, upstream):
    """Parameter gradients for ``sum(upstream * descriptor)``, as a name->array dict."""
    cfg = model.config
    upstream = np.asarray(upstream, dtype=np.float64)
    u, nu = cache.fused, cache.fused_norm
    du = upstream / nu - u * (u @ upstream) / nu**3
    grads = {}
    for a, br in enumerate(model.branches):
        dp = du[a * cfg.branch_dim : (a + 1) * cfg.branch_dim]
        g = cache.vlads[a]
        grads[f"b{a}.proj"] = np.outer(dp, g)
        fm = cache.fmaps[a]
        layers = len(br.conv_h)
        if fm.empty or not np.any(dp):
            zero = {name: np.zeros_like(arr) for name, arr in br.tensors()}
            for name, arr in zero.items():
                if name != "proj":
                    grads[f"b{a}.{name}"] = arr
            continue
        dg = br.proj.T @ dp
        dX, dC, dW, db = _vlad_backward(fm, br, dg)
        dh, dbias = _branch_backward(fm, br, cfg, dX)
        for i in range(layers):
            grads[f"b{a}.conv{i}.h"] = dh[i]
            grads[f"b{a}.conv{i}.bias"] = dbias[i]
        grads[f"b{a}.vlad.centers"] = dC
        grads[f"b{a}.vlad.w"] = dW
        grads[f"b{a}.vlad.b"] = db
    return grads


def forward_with_gradients(stack, model, upstream):
    desc, cache = embed_forward(stack, model)
    return desc, embed_backward(cache, model, upstream)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian float64 blob


def save_checkpoint(model, path):
    """Write ``path`` (manifest) and ``path`` with suffix ``.bin`` (values)."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    tensors = model.named_tensors()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "config": asdict(model.config),
        "blob": blob.name,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    blob.write_bytes(model.to_vector().astype("<f8").tobytes())


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidConfig(f"unsupported checkpoint version {manifest.get('format_version')}")
    cfg = manifest["config"]
    config = EmbedConfig(**cfg).validate()
    template = model_init(config, manifest["seed"])
    expected = [(n, list(a.shape)) for n, a in template.named_tensors()]
    found = [(t["name"], list(t["shape"])) for t in manifest["tensors"]]
    if expected != found:
        raise ShapeMismatch("checkpoint tensors do not match the configured architecture")
    vec = np.frombuffer(path.with_name(manifest["blob"]).read_bytes(), dtype="<f8")
    if vec.size != template.to_vector().size:
        raise ShapeMismatch("checkpoint blob has the wrong length")
    return template.from_vector(vec.astype(np.float64))
