"""Detector parameters and the forward/backward passes of its three stages."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from godet import numerics as nx
from godet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from godet.geometry import AnchorConfig, LabelSet
from godet.detector.roi import RoiConfig, extract, extract_backward


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "pool"
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0


def _conv(c, k, s, p=None):
    return LayerSpec("conv", c, k, s, k // 2 if p is None else p)


BACKBONE_PRESETS = {
    # 4 convs, total stride 16; the first is an 8x8 patch embedding
    "tiny": (_conv(24, 8, 8, 0), _conv(48, 3, 2), _conv(48, 3, 1), _conv(48, 3, 1)),
    # 8 convs + 2 pools, total stride 16
    "small": (
        _conv(16, 4, 4, 0), _conv(16, 3, 1), LayerSpec("pool", kernel=2, stride=2),
        _conv(32, 3, 1), _conv(32, 3, 1), LayerSpec("pool", kernel=2, stride=2),
        _conv(48, 3, 1), _conv(48, 3, 1), _conv(48, 3, 1), _conv(48, 3, 1),
    ),
    # gradient-check scale: stride 4
    "toy": (_conv(4, 3, 2), _conv(4, 3, 2)),
}


@dataclass(frozen=True)
class BackboneConfig:
    preset: str = "tiny"
    layers: tuple = None

    def __post_init__(self):
        if self.layers is None:
            if self.preset not in BACKBONE_PRESETS:
                raise ValueError(f"unknown backbone preset {self.preset!r}; known: {sorted(BACKBONE_PRESETS)}")
            object.__setattr__(self, "layers", BACKBONE_PRESETS[self.preset])
        if self.layers[-1].kind != "conv":
            raise ValueError("backbone must end in a conv layer")

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    @property
    def out_channels(self) -> int:
        return [l for l in self.layers if l.kind == "conv"][-1].out_channels

    def feature_size(self, size: int) -> int:
        for layer in self.layers:
            if layer.kind == "conv":
                size = nx.conv_output_size(size, layer.kernel, layer.stride, layer.padding)
            else:
                size = (size - layer.kernel) // layer.stride + 1
            if size < 1:
                raise ValueError("input too small for backbone")
        return size


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    labels: tuple = ("table", "figure", "equation")
    rpn_channels: int = 48
    head_hidden: int = 256
    input_size: int = 600

    def __post_init__(self):
        if self.anchors.stride != self.backbone.total_stride:
            raise ValueError(
                f"anchor stride {self.anchors.stride} != backbone stride {self.backbone.total_stride}"
            )

    def to_dict(self) -> dict:
        return {
            "backbone": {"preset": self.backbone.preset, "layers": [asdict(l) for l in self.backbone.layers]},
            "anchors": {"scales": list(self.anchors.scales), "ratios": list(self.anchors.ratios),
                        "stride": self.anchors.stride},
            "roi": {"mode": self.roi.mode, "output_size": list(self.roi.output_size),
                    "samples_per_bin": self.roi.samples_per_bin},
            "labels": list(self.labels),
            "rpn_channels": self.rpn_channels,
            "head_hidden": self.head_hidden,
            "input_size": self.input_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d["backbone"]
        return cls(
            backbone=BackboneConfig(bb["preset"], tuple(LayerSpec(**l) for l in bb["layers"])),
            anchors=AnchorConfig(tuple(d["anchors"]["scales"]), tuple(d["anchors"]["ratios"]),
                                 int(d["anchors"]["stride"])),
            roi=RoiConfig(d["roi"]["mode"], tuple(d["roi"]["output_size"]), int(d["roi"]["samples_per_bin"])),
            labels=tuple(d["labels"]),
            rpn_channels=int(d["rpn_channels"]),
            head_hidden=int(d["head_hidden"]),
            input_size=int(d["input_size"]),
        )


def toy_config(**overrides) -> ModelConfig:
    kw = dict(
        backbone=BackboneConfig("toy"),
        anchors=AnchorConfig(scales=(4.0, 8.0), ratios=(1.0, 0.5), stride=4),
        roi=RoiConfig("align", (2, 2), 2),
        rpn_channels=4,
        head_hidden=8,
        input_size=8,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


class DetectorModel:
    """Backbone + RPN head + detection head parameters."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.labels = LabelSet(self.config.labels)
        self.params: dict[str, nx.Parameter] = {}
        rng = np.random.default_rng(seed)
        cin = 3
        for i, layer in enumerate(self.config.backbone.layers):
            if layer.kind != "conv":
                continue
            fan_in = cin * layer.kernel ** 2
            self._add(f"backbone.{i}.weight", nx.he_normal(rng, (layer.out_channels, cin, layer.kernel, layer.kernel), fan_in))
            self._add(f"backbone.{i}.bias", np.zeros(layer.out_channels))
            cin = layer.out_channels
        k = self.config.anchors.k
        rc = self.config.rpn_channels
        self._add("rpn.conv.weight", nx.he_normal(rng, (rc, cin, 3, 3), cin * 9))
        self._add("rpn.conv.bias", np.zeros(rc))
        self._add("rpn.cls.weight", rng.standard_normal((2 * k, rc, 1, 1)) * 0.01)
        self._add("rpn.cls.bias", np.zeros(2 * k))
        self._add("rpn.reg.weight", rng.standard_normal((4 * k, rc, 1, 1)) * 0.01)
        self._add("rpn.reg.bias", np.zeros(4 * k))
        oh, ow = self.config.roi.output_size
        flat = cin * oh * ow
        hidden = self.config.head_hidden
        self._add("head.fc1.weight", nx.he_normal(rng, (hidden, flat), flat))
        self._add("head.fc1.bias", np.zeros(hidden))
        self.init_class_layers(rng)

    def _add(self, name, value):
        self.params[name] = nx.Parameter(name, np.asarray(value, dtype=np.float64))

    def init_class_layers(self, rng: np.random.Generator):
        """(Re)initialize the label-dependent head layers."""
        hidden = self.config.head_hidden
        n = len(self.labels)
        self._add("head.cls.weight", rng.standard_normal((n + 1, hidden)) * 0.01)
        self._add("head.cls.bias", np.zeros(n + 1))
        self._add("head.reg.weight", rng.standard_normal((4 * n, hidden)) * 0.001)
        self._add("head.reg.bias", np.zeros(4 * n))

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name].value

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].value).tobytes())
        return h.hexdigest()

    def save(self, path, extra_meta: dict | None = None):
        meta = {"model": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, {n: p.value for n, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "DetectorModel":
        meta, tensors = load_checkpoint(path)
        if "model" not in meta:
            raise CheckpointError(f"{path}: metadata has no model configuration")
        model = cls(ModelConfig.from_dict(meta["model"]))
        model.load_tensors(tensors, path)
        return model

    def load_tensors(self, tensors: dict, source="<tensors>", skip=()):
        for name, p in self.params.items():
            if name in skip:
                continue
            if name not in tensors:
                raise CheckpointError(f"{source}: missing tensor {name!r}")
            if tensors[name].shape != p.value.shape:
                raise CheckpointError(
                    f"{source}: tensor {name!r} has shape {tensors[name].shape}, model expects {p.value.shape}"
                )
            p.value = tensors[name].copy()
            p.grad = np.zeros_like(p.value)
            p.velocity = None


# -- backbone ----------------------------------------------------------------

def backbone_forward(model: DetectorModel, image: np.ndarray):
    """``image`` is 3xHxW in [0, 1]; returns (C, h, w) features and a cache."""
    # ink-positive input: blank page background maps to 0
    x = (1.0 - image)[None]
    caches = []
    for i, layer in enumerate(model.config.backbone.layers):
        if layer.kind == "conv":
            x, cc = nx.conv2d(x, model[f"backbone.{i}.weight"], model[f"backbone.{i}.bias"],
                              layer.stride, layer.padding)
            x, mask = nx.relu(x)
            caches.append((i, "conv", (cc, mask)))
        else:
            x, pc = nx.max_pool2d(x, layer.kernel, layer.stride)
            caches.append((i, "pool", pc))
    return x[0], caches


def backbone_backward(model: DetectorModel, dfeat: np.ndarray, caches):
    """Accumulates parameter grads; the image gradient is not computed."""
    d = dfeat[None]
    for n, (i, kind, cache) in enumerate(reversed(caches)):
        first = n == len(caches) - 1
        if kind == "conv":
            cc, mask = cache
            d = nx.relu_backward(d, mask)
            dx, dw, db = nx.conv2d_backward(d, cc, need_dx=not first)
            model.params[f"backbone.{i}.weight"].grad += dw
            model.params[f"backbone.{i}.bias"].grad += db
            d = dx
        else:
            d = nx.max_pool2d_backward(d, cache)


# -- RPN ---------------------------------------------------------------------

def rpn_forward(model: DetectorModel, features: np.ndarray, periodic: bool = False):
    """3x3 conv + ReLU, then 1x1 objectness (2 per anchor) and delta (4 per anchor) maps.

    Returns ``(scores (k, H, W, 2), deltas (k, H, W, 4), cache)``. With
    ``periodic`` the 3x3 window wraps around the map edges.
    """
    k = model.config.anchors.k
    x = features[None]
    if periodic:
        x = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
        h, hc = nx.conv2d(x, model["rpn.conv.weight"], model["rpn.conv.bias"], 1, 0)
    else:
        h, hc = nx.conv2d(x, model["rpn.conv.weight"], model["rpn.conv.bias"], 1, 1)
    h, mask = nx.relu(h)
    s, sc = nx.conv2d(h, model["rpn.cls.weight"], model["rpn.cls.bias"], 1, 0)
    d, dc = nx.conv2d(h, model["rpn.reg.weight"], model["rpn.reg.bias"], 1, 0)
    _, _, hh, ww = s.shape
    scores = s[0].reshape(k, 2, hh, ww).transpose(0, 2, 3, 1)
    deltas = d[0].reshape(k, 4, hh, ww).transpose(0, 2, 3, 1)
    return scores, deltas, (hc, mask, sc, dc, periodic)


def rpn_backward(model: DetectorModel, dscores: np.ndarray, ddeltas: np.ndarray, cache) -> np.ndarray:
    hc, mask, sc, dc, periodic = cache
    k, hh, ww, _ = dscores.shape
    ds = dscores.transpose(0, 3, 1, 2).reshape(1, 2 * k, hh, ww)
    dd = ddeltas.transpose(0, 3, 1, 2).reshape(1, 4 * k, hh, ww)
    dh1, dw, db = nx.conv2d_backward(ds, sc)
    model.params["rpn.cls.weight"].grad += dw
    model.params["rpn.cls.bias"].grad += db
    dh2, dw, db = nx.conv2d_backward(dd, dc)
    model.params["rpn.reg.weight"].grad += dw
    model.params["rpn.reg.bias"].grad += db
    dh = nx.relu_backward(dh1 + dh2, mask)
    dx, dw, db = nx.conv2d_backward(dh, hc)
    model.params["rpn.conv.weight"].grad += dw
    model.params["rpn.conv.bias"].grad += db
    if periodic:
        _, c, hp, wp = dx.shape
        rows = (np.arange(hp) - 1) % (hp - 2)
        cols = (np.arange(wp) - 1) % (wp - 2)
        folded = np.zeros((c, hp - 2, wp))
        np.add.at(folded, (slice(None), rows), dx[0])
        out = np.zeros((c, hp - 2, wp - 2))
        np.add.at(out, (slice(None), slice(None), cols), folded)
        return out
    return dx[0]


# -- detection head ----------------------------------------------------------

def roi_features(model: DetectorModel, features: np.ndarray, rois_image: np.ndarray):
    """Extract fixed-size features for RoIs given in input-image pixels."""
    rois = np.asarray(rois_image, dtype=np.float64).reshape(-1, 4) / model.config.anchors.stride
    return extract(features, rois, model.config.roi)


def roi_features_backward(model: DetectorModel, dout: np.ndarray, cache) -> np.ndarray:
    return extract_backward(dout, cache, model.config.roi)


def detection_head(model: DetectorModel, roi_feats: np.ndarray):
    """Returns ``(class_logits (R, n+1), deltas (R, n, 4), cache)``; softmax is left to the caller."""
    r = roi_feats.shape[0]
    expected = model["head.fc1.weight"].shape[1]
    flat = roi_feats.reshape(r, -1)
    if flat.shape[1] != expected:
        raise ValueError(f"detection head expects {expected} features per RoI, got {flat.shape[1]}")
    h, c1 = nx.linear(flat, model["head.fc1.weight"], model["head.fc1.bias"])
    h, mask = nx.relu(h)
    logits, c2 = nx.linear(h, model["head.cls.weight"], model["head.cls.bias"])
    deltas, c3 = nx.linear(h, model["head.reg.weight"], model["head.reg.bias"])
    return logits, deltas.reshape(r, -1, 4), (roi_feats.shape, c1, mask, c2, c3)


def detection_head_backward(model: DetectorModel, dlogits: np.ndarray, ddeltas: np.ndarray, cache) -> np.ndarray:
    shape, c1, mask, c2, c3 = cache
    r = shape[0]
    dh_a, dw, db = nx.linear_backward(dlogits, c2)
    model.params["head.cls.weight"].grad += dw
    model.params["head.cls.bias"].grad += db
    dh_b, dw, db = nx.linear_backward(ddeltas.reshape(r, -1), c3)
    model.params["head.reg.weight"].grad += dw
    model.params["head.reg.bias"].grad += db
    dh = nx.relu_backward(dh_a + dh_b, mask)
    dflat, dw, db = nx.linear_backward(dh, c1)
    model.params["head.fc1.weight"].grad += dw
    model.params["head.fc1.bias"].grad += db
    return dflat.reshape(shape)
