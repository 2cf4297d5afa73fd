"""Two-layer multityped stack.

One typed RBM per view is trained on its own feature block; their hidden
posteriors are concatenated (in view declaration order) and a binary RBM is
trained on top. The deterministic map from views to the top layer is

    f = sigmoid(b2 + concat_s(sigmoid(b1_s + v_s @ W1_s)) @ W2)

Posterior probabilities, never samples, feed the upper layer both when
training it and at inference.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .heads import TaskHead
from .rbm import (
    RbmParams,
    SparseCdConfig,
    UnitType,
    check_visible,
    hidden_posterior,
    params_from_bytes,
    params_to_bytes,
    train_rbm,
)

__all__ = [
    "ViewSpec",
    "DeepNet",
    "pretrain_views",
    "pretrain_joint",
    "pretrain",
    "forward",
    "embed_corpus",
    "net_to_bytes",
    "net_from_bytes",
    "save_net",
    "load_net",
]

NET_MAGIC = b"MTDBN1-NET"
NET_VERSION = 1


@dataclass(frozen=True)
class ViewSpec:
    name: str
    unit_type: UnitType
    dim: int
    hidden: int

    def __post_init__(self):
        object.__setattr__(self, "unit_type", UnitType(self.unit_type))
        if not self.name:
            raise ContractError("view names must be non-empty")
        if self.dim < 1 or self.hidden < 1:
            raise ContractError(f"view {self.name!r}: dimensions must be positive")


@dataclass
class DeepNet:
    views: list  # [(ViewSpec, RbmParams)] in declaration order
    joint: RbmParams
    heads: list = field(default_factory=list)
    preprocess: dict = field(default_factory=dict)
    pretrained: bool = True

    def __post_init__(self):
        names = [spec.name for spec, _ in self.views]
        if not names or len(set(names)) != len(names):
            raise ContractError("a net needs at least one view and unique view names")
        for spec, p in self.views:
            if p.unit_type is not spec.unit_type or p.W.shape != (spec.dim, spec.hidden):
                raise ContractError(f"view {spec.name!r}: parameters do not match its spec")
        if self.joint.unit_type is not UnitType.BINARY:
            raise ContractError("the joint layer must be a binary RBM")
        if self.joint.n_visible != sum(spec.hidden for spec, _ in self.views):
            raise ContractError("joint input size must equal the sum of view hidden sizes")
        head_names = [h.name for h in self.heads]
        if len(set(head_names)) != len(head_names):
            raise ContractError("duplicate head names")
        for h in self.heads:
            if h.n_features != self.n_top:
                raise ContractError(f"head {h.name!r} expects {h.n_features} features, net has {self.n_top}")

    @property
    def specs(self) -> list:
        return [spec for spec, _ in self.views]

    @property
    def view_names(self) -> list:
        return [spec.name for spec, _ in self.views]

    @property
    def n_top(self) -> int:
        return self.joint.n_hidden

    def head(self, name: str) -> TaskHead:
        for h in self.heads:
            if h.name == name:
                return h
        raise ContractError(f"net has no head named {name!r}")

    def copy(self) -> "DeepNet":
        return DeepNet([(spec, p.copy()) for spec, p in self.views], self.joint.copy(),
                       [h.copy() for h in self.heads], json.loads(json.dumps(self.preprocess)),
                       self.pretrained)

    @classmethod
    def random(cls, specs, n_top, rng, scale=0.1) -> "DeepNet":
        """Randomly initialized (not pretrained) net, e.g. for cold starts."""
        views = []
        for spec in specs:
            views.append((spec, RbmParams(spec.unit_type,
                                          rng.normal(0, scale, (spec.dim, spec.hidden)),
                                          np.zeros(spec.dim), np.zeros(spec.hidden))))
        n_in = sum(s.hidden for s in specs)
        joint = RbmParams(UnitType.BINARY, rng.normal(0, scale, (n_in, n_top)),
                          np.zeros(n_in), np.zeros(n_top))
        return cls(views, joint, pretrained=False)


def _view_matrix(data, spec: ViewSpec, n_rows=None) -> np.ndarray:
    if spec.name not in data:
        raise DataError(f"missing view {spec.name!r}")
    x = np.asarray(data[spec.name], dtype=np.float64)
    x = x.reshape(1, -1) if x.ndim == 1 else x
    if x.ndim != 2 or x.shape[1] != spec.dim:
        raise DataError(f"view {spec.name!r} has shape {x.shape}, expected (*, {spec.dim})")
    if n_rows is not None and x.shape[0] != n_rows:
        raise DataError(f"view {spec.name!r} has {x.shape[0]} rows, expected {n_rows}")
    try:
        check_visible(spec.unit_type, x)
    except ContractError as exc:
        raise DataError(f"view {spec.name!r}: {exc}") from None
    return x


def _aligned_views(data, specs):
    mats, n_rows = [], None
    for spec in specs:
        x = _view_matrix(data, spec, n_rows)
        n_rows = x.shape[0]
        mats.append(x)
    return mats


def pretrain_views(data, specs, configs):
    """Train one typed RBM per view, independently.

    ``configs`` maps view name to SparseCdConfig (or is a single config for
    all views). Returns ``(params, posteriors, traces)`` lists in view order.
    """
    mats = _aligned_views(data, specs)
    params, posteriors, traces = [], [], []
    for spec, x in zip(specs, mats):
        cfg = configs if isinstance(configs, SparseCdConfig) else configs[spec.name]
        p, trace = train_rbm(x, spec.hidden, cfg, spec.unit_type)
        params.append(p)
        posteriors.append(hidden_posterior(p, x))
        traces.append(trace)
    return params, posteriors, traces


def pretrain_joint(view_posteriors, n_hidden: int, cfg: SparseCdConfig):
    """Train the binary joint RBM on row-wise concatenated view posteriors."""
    if not view_posteriors:
        raise ContractError("need at least one posterior matrix")
    rows = {np.shape(p)[0] for p in view_posteriors}
    if len(rows) != 1:
        raise ContractError(f"posterior matrices disagree on row count: {sorted(rows)}")
    v2 = np.hstack([np.asarray(p, dtype=np.float64) for p in view_posteriors])
    return train_rbm(v2, n_hidden, cfg, UnitType.BINARY)


def pretrain(data, specs, n_top: int, view_configs, joint_config: SparseCdConfig,
             preprocess=None):
    """Greedy layerwise construction of a DeepNet; returns ``(net, traces)``.

    ``traces`` maps each view name, plus ``"joint"``, to its
    reconstruction-error trace.
    """
    params, posts, traces = pretrain_views(data, specs, view_configs)
    joint, jtrace = pretrain_joint(posts, n_top, joint_config)
    net = DeepNet(list(zip(specs, params)), joint, preprocess=dict(preprocess or {}))
    out = {spec.name: t for spec, t in zip(specs, traces)}
    out["joint"] = jtrace
    return net, out


def forward(net: DeepNet, instance) -> np.ndarray:
    """Top-level features for one instance (1-D views) or a batch (2-D views)."""
    single = all(np.ndim(instance.get(spec.name, [])) == 1 for spec in net.specs)
    mats = _aligned_views(instance, net.specs)
    hidden = [hidden_posterior(p, x) for (spec, p), x in zip(net.views, mats)]
    f = hidden_posterior(net.joint, np.hstack(hidden))
    return f[0] if single else f


def embed_corpus(net: DeepNet, data) -> np.ndarray:
    specs = net.specs
    n = np.shape(data[specs[0].name])[0] if specs[0].name in data else None
    if n == 0:
        return np.zeros((0, net.n_top))
    return np.atleast_2d(forward(net, {k: np.atleast_2d(v) for k, v in data.items()}))


# -- container ----------------------------------------------------------------
# "MTDBN1-NET" | uint32 version | uint64 manifest length | manifest JSON |
# data section. Manifest offsets are relative to the data section. RBM blocks
# use the flat RBM format; head blocks are V (row-major) then bias, float64 LE.

_NET_HEADER = struct.Struct("<10sIQ")


def net_to_bytes(net: DeepNet) -> bytes:
    chunks, offset = [], 0

    def add(blob: bytes) -> dict:
        nonlocal offset
        chunks.append(blob)
        entry = {"offset": offset, "length": len(blob)}
        offset += len(blob)
        return entry

    views = []
    for spec, p in net.views:
        entry = {"name": spec.name, "unit_type": spec.unit_type.value,
                 "dim": spec.dim, "hidden": spec.hidden}
        entry.update(add(params_to_bytes(p)))
        views.append(entry)
    joint = add(params_to_bytes(net.joint))
    heads = []
    for h in net.heads:
        entry = {"name": h.name, "kind": h.kind, "labels": h.label_names,
                 "threshold": h.threshold, "weight": h.weight, "auxiliary": h.auxiliary,
                 "rows": h.V.shape[0], "cols": h.V.shape[1]}
        blob = np.ascontiguousarray(h.V, "<f8").tobytes() + np.ascontiguousarray(h.bias, "<f8").tobytes()
        entry.update(add(blob))
        heads.append(entry)
    manifest = {"format": "mtdbn/1", "views": views, "joint": joint, "heads": heads,
                "preprocess": net.preprocess, "pretrained": net.pretrained}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _NET_HEADER.pack(NET_MAGIC, NET_VERSION, len(mbytes)) + mbytes + b"".join(chunks)


def net_from_bytes(buf: bytes) -> DeepNet:
    if len(buf) < _NET_HEADER.size:
        raise ContractError("truncated net container")
    magic, version, mlen = _NET_HEADER.unpack_from(buf, 0)
    if magic != NET_MAGIC:
        raise ContractError(f"not a net container (magic {magic!r})")
    if version != NET_VERSION:
        raise ContractError(f"unsupported net container version {version}")
    start = _NET_HEADER.size
    manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
    data = buf[start + mlen:]

    def block(entry):
        lo = entry["offset"]
        hi = lo + entry["length"]
        if hi > len(data):
            raise ContractError("net container is truncated")
        return data[lo:hi]

    views = []
    for e in manifest["views"]:
        spec = ViewSpec(e["name"], e["unit_type"], e["dim"], e["hidden"])
        views.append((spec, params_from_bytes(block(e))))
    joint = params_from_bytes(block(manifest["joint"]))
    heads = []
    for e in manifest["heads"]:
        flat = np.frombuffer(block(e), dtype="<f8").astype(np.float64)
        r, c = e["rows"], e["cols"]
        heads.append(TaskHead(e["name"], e["kind"], flat[:r * c].reshape(r, c), flat[r * c:],
                              e["labels"], e["threshold"], e["weight"], e["auxiliary"]))
    return DeepNet(views, joint, heads, manifest.get("preprocess", {}),
                   manifest.get("pretrained", True))


def save_net(net: DeepNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(net_to_bytes(net))


def load_net(path) -> DeepNet:
    with open(path, "rb") as fh:
        return net_from_bytes(fh.read())
