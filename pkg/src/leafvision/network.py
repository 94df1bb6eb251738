"""Layer composition, forward passes with full activation caching,
backpropagation, SGD with per-layer learning-rate multipliers, and binary
checkpoints.

Parameters live in a plain dict keyed by layer name: each conv/fc layer owns
``{"weights": ..., "bias": ...}``. All training-facing functions are pure:
they return fresh parameter dicts instead of mutating their inputs.
"""

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    SwitchMap,
    conv2d_backward,
    conv2d_forward,
    fc_forward,
    maxpool_forward,
    read_tensor,
    relu,
    softmax,
    unpool,
    write_tensor,
)

LAYER_KINDS = ("conv", "relu", "maxpool", "fc", "softmax", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the architecture, with its SGD rate multipliers.

    Geometry fields are meaningful per kind: conv uses out_channels/kernel/
    stride/pad/groups, maxpool uses window/stride, fc uses units, dropout
    uses rate. The multipliers scale the base learning rate for this layer's
    weights and biases respectively.
    """

    kind: str
    name: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    groups: int = 1
    window: int = 0
    units: int = 0
    rate: float = 0.0
    lr_mult_weights: float = 1.0
    lr_mult_bias: float = 1.0

    def has_params(self):
        return self.kind in ("conv", "fc")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_extent: tuple
    class_count: int


@dataclass
class ForwardTrace:
    """Everything one forward pass produced: per-layer outputs, pooling
    switches, dropout masks, and the input image itself."""

    image: np.ndarray
    outputs: list
    switches: dict
    dropout_masks: dict


def infer_shapes(net):
    """Output shape of every layer, validating that consecutive layers compose.

    Raises ValueError naming the offending layer on any mismatch; also
    enforces positive learning-rate multipliers and that the final trainable
    layer emits ``class_count`` values.
    """
    shapes = []
    shape = tuple(net.input_extent)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"input extent must be (channels, height, width), got {shape}")
    last_trainable_width = None
    for spec in net.layers:
        if spec.kind not in LAYER_KINDS:
            raise ValueError(f"layer {spec.name!r}: unknown kind {spec.kind!r}")
        if spec.lr_mult_weights <= 0 or spec.lr_mult_bias <= 0:
            raise ValueError(f"layer {spec.name!r}: learning-rate multipliers must be positive")
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {spec.name!r}: conv needs a (C,H,W) input, got {shape}")
            c, h, w = shape
            if c % spec.groups or spec.out_channels % spec.groups:
                raise ValueError(f"layer {spec.name!r}: groups={spec.groups} must divide "
                                 f"channels {c} and kernel count {spec.out_channels}")
            out_h = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            out_w = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if out_h < 1 or out_w < 1:
                raise ValueError(f"layer {spec.name!r}: kernel {spec.kernel} stride {spec.stride} "
                                 f"pad {spec.pad} does not fit input {h}x{w}")
            shape = (spec.out_channels, out_h, out_w)
            last_trainable_width = None
        elif spec.kind == "maxpool":
            if len(shape) != 3:
                raise ValueError(f"layer {spec.name!r}: maxpool needs a (C,H,W) input, got {shape}")
            c, h, w = shape
            if spec.window > h or spec.window > w:
                raise ValueError(f"layer {spec.name!r}: window {spec.window} exceeds input {h}x{w}")
            shape = (c, (h - spec.window) // spec.stride + 1, (w - spec.window) // spec.stride + 1)
        elif spec.kind == "fc":
            if spec.units < 1:
                raise ValueError(f"layer {spec.name!r}: fc needs a positive unit count")
            shape = (spec.units,)
            last_trainable_width = spec.units
        elif spec.kind == "softmax":
            if len(shape) != 1:
                raise ValueError(f"layer {spec.name!r}: softmax needs a vector input, got {shape}")
        elif spec.kind == "dropout":
            if not 0.0 <= spec.rate < 1.0:
                raise ValueError(f"layer {spec.name!r}: dropout rate must be in [0,1)")
        shapes.append(shape)
    if last_trainable_width is not None and last_trainable_width != net.class_count:
        raise ValueError(f"final trainable layer emits {last_trainable_width} values, "
                         f"expected class_count={net.class_count}")
    return shapes


def _layer_input_shapes(net):
    shapes = infer_shapes(net)
    return [tuple(net.input_extent)] + shapes[:-1]


def init_params(net, rng, scheme="he"):
    """Fresh parameters for every conv/fc layer.

    Schemes: "he" (zero-mean Gaussian scaled by fan-in, the trainable
    default), "gaussian01" (std 0.01, the fine-tuning convention for fresh
    heads), "zero".
    """
    if scheme not in ("he", "gaussian01", "zero"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    params = {}
    in_shapes = _layer_input_shapes(net)
    for spec, in_shape in zip(net.layers, in_shapes):
        if spec.kind == "conv":
            c_in = in_shape[0]
            w_shape = (spec.out_channels, c_in // spec.groups, spec.kernel, spec.kernel)
            fan_in = (c_in // spec.groups) * spec.kernel * spec.kernel
            units = spec.out_channels
        elif spec.kind == "fc":
            fan_in = int(np.prod(in_shape))
            w_shape = (spec.units, fan_in)
            units = spec.units
        else:
            continue
        if scheme == "zero":
            weights = np.zeros(w_shape, dtype=np.float32)
        else:
            std = np.sqrt(2.0 / fan_in) if scheme == "he" else 0.01
            weights = (rng.standard_normal(w_shape) * std).astype(np.float32)
        params[spec.name] = {"weights": weights, "bias": np.zeros(units, dtype=np.float32)}
    return params


def forward(net, params, image, rng=None):
    """Run the network, caching every layer output and pooling switch map.

    ``rng`` enables dropout layers (training mode, inverted scaling); without
    it they pass activations through unchanged.
    """
    image = np.asarray(image)
    if tuple(image.shape) != tuple(net.input_extent):
        raise ValueError(f"image shape {image.shape} != network input extent {net.input_extent}")
    outputs, switches, masks = [], {}, {}
    x = image
    for i, spec in enumerate(net.layers):
        if spec.kind == "conv":
            p = params[spec.name]
            x = conv2d_forward(x, p["weights"], p["bias"], spec.stride, spec.pad, spec.groups)
        elif spec.kind == "relu":
            x = relu(x)
        elif spec.kind == "maxpool":
            x, switches[i] = maxpool_forward(x, spec.window, spec.stride)
        elif spec.kind == "fc":
            p = params[spec.name]
            x = fc_forward(x.ravel(), p["weights"], p["bias"])
        elif spec.kind == "softmax":
            x = softmax(x)
        elif spec.kind == "dropout":
            if rng is not None and spec.rate > 0.0:
                keep = (rng.random(x.shape) >= spec.rate).astype(x.dtype)
                masks[i] = keep / np.asarray(1.0 - spec.rate, dtype=x.dtype)
                x = x * masks[i]
        outputs.append(x)
    return ForwardTrace(image=image, outputs=outputs, switches=switches, dropout_masks=masks)


def cross_entropy(probs, label):
    """-log p[label] with a floor to keep saturated predictions finite."""
    return -float(np.log(max(float(probs[label]), 1e-12)))


def backward(net, params, trace, true_label):
    """Gradient of the cross-entropy loss w.r.t. every weight and bias.

    ``true_label`` is the zero-based class index. The trace must come from
    ``forward`` on the same network and parameters.
    """
    if not 0 <= true_label < net.class_count:
        raise ValueError(f"label {true_label} outside class range 0..{net.class_count - 1}")
    if len(trace.outputs) != len(net.layers):
        raise ValueError(f"trace has {len(trace.outputs)} entries for {len(net.layers)} layers")
    if net.layers[-1].kind != "softmax":
        raise ValueError("backward requires a softmax output layer")

    grads = {}
    probs = trace.outputs[-1]
    g = probs.astype(np.float64)
    g[true_label] -= 1.0
    for i in range(len(net.layers) - 2, -1, -1):
        spec = net.layers[i]
        inp = trace.outputs[i - 1] if i > 0 else trace.image
        if spec.kind == "conv":
            p = params[spec.name]
            dk, db, g = conv2d_backward(inp, g.reshape(trace.outputs[i].shape),
                                        p["weights"], spec.stride, spec.pad, spec.groups)
            grads[spec.name] = {"weights": dk.astype(p["weights"].dtype),
                                "bias": db.astype(p["bias"].dtype)}
        elif spec.kind == "relu":
            g = g * (inp > 0)
        elif spec.kind == "maxpool":
            g = unpool(np.asarray(g, dtype=np.float64), trace.switches[i], inp.shape)
        elif spec.kind == "fc":
            p = params[spec.name]
            flat = inp.ravel().astype(np.float64)
            grads[spec.name] = {"weights": np.outer(g, flat).astype(p["weights"].dtype),
                                "bias": g.astype(p["bias"].dtype)}
            g = (p["weights"].astype(np.float64).T @ g).reshape(inp.shape)
        elif spec.kind == "dropout":
            if i in trace.dropout_masks:
                g = g * trace.dropout_masks[i]
        elif spec.kind == "softmax":
            raise ValueError("softmax may only appear as the final layer")
    return grads


def sgd_step(params, grads, base_lr, net):
    """One SGD update: weights step by base_lr * lr_mult_weights * grad,
    biases by base_lr * lr_mult_bias * grad. Returns new parameters."""
    new_params = {}
    for spec in net.layers:
        if not spec.has_params():
            continue
        p, g = params[spec.name], grads[spec.name]
        if not (np.isfinite(g["weights"]).all() and np.isfinite(g["bias"]).all()):
            raise RuntimeError(f"non-finite gradient in layer {spec.name!r}; SGD step aborted")
        new_params[spec.name] = {
            "weights": p["weights"] - (base_lr * spec.lr_mult_weights) * g["weights"],
            "bias": p["bias"] - (base_lr * spec.lr_mult_bias) * g["bias"],
        }
    return new_params


def replace_head(net, params, new_class_count, rng, scheme="gaussian01"):
    """Swap the final fc layer for a freshly initialized one of a new width.

    Every non-head parameter is carried over bit-exactly; the network must
    end in fc + softmax.
    """
    if new_class_count < 2:
        raise ValueError(f"class count must be at least 2, got {new_class_count}")
    if len(net.layers) < 2 or net.layers[-1].kind != "softmax" or net.layers[-2].kind != "fc":
        raise ValueError("replace_head requires a network ending in fc + softmax")
    head = replace(net.layers[-2], units=new_class_count)
    new_net = NetworkSpec(layers=net.layers[:-2] + (head, net.layers[-1]),
                          input_extent=net.input_extent, class_count=new_class_count)
    in_shapes = _layer_input_shapes(new_net)
    fan_in = int(np.prod(in_shapes[len(net.layers) - 2]))
    new_params = {name: {k: v.copy() for k, v in group.items()}
                  for name, group in params.items() if name != head.name}
    std = np.sqrt(2.0 / fan_in) if scheme == "he" else 0.01
    new_params[head.name] = {
        "weights": (rng.standard_normal((new_class_count, fan_in)) * std).astype(np.float32),
        "bias": np.zeros(new_class_count, dtype=np.float32),
    }
    infer_shapes(new_net)
    return new_net, new_params


# ---------------------------------------------------------------------------
# Presets

def build_paper_network(class_count=44):
    """The full leaf-identification architecture: five conv blocks (three of
    them grouped), three overlapping poolings, and a 4096/4096/head stack.

    The head carries the 10x/20x learning-rate multipliers used when only a
    fresh final layer has to adapt quickly.
    """
    layers = (
        LayerSpec("conv", "conv1", out_channels=96, kernel=11, stride=4, pad=0),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", window=3, stride=2),
        LayerSpec("conv", "conv2", out_channels=256, kernel=5, stride=1, pad=2, groups=2),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2", window=3, stride=2),
        LayerSpec("conv", "conv3", out_channels=384, kernel=3, stride=1, pad=1),
        LayerSpec("relu", "relu3"),
        LayerSpec("conv", "conv4", out_channels=384, kernel=3, stride=1, pad=1, groups=2),
        LayerSpec("relu", "relu4"),
        LayerSpec("conv", "conv5", out_channels=256, kernel=3, stride=1, pad=1, groups=2),
        LayerSpec("relu", "relu5"),
        LayerSpec("maxpool", "pool5", window=3, stride=2),
        LayerSpec("fc", "fc6", units=4096),
        LayerSpec("relu", "relu6"),
        LayerSpec("fc", "fc7", units=4096),
        LayerSpec("relu", "relu7"),
        LayerSpec("fc", "fc8", units=class_count, lr_mult_weights=10.0, lr_mult_bias=20.0),
        LayerSpec("softmax", "prob"),
    )
    net = NetworkSpec(layers=layers, input_extent=(3, 227, 227), class_count=class_count)
    infer_shapes(net)
    return net


def build_desk_network(class_count=8, input_side=64):
    """Small three-conv + one-fc variant for fast CPU experiments."""
    layers = (
        LayerSpec("conv", "conv1", out_channels=12, kernel=5, stride=2, pad=2),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", window=2, stride=2),
        LayerSpec("conv", "conv2", out_channels=24, kernel=3, stride=1, pad=1),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2", window=2, stride=2),
        LayerSpec("conv", "conv3", out_channels=32, kernel=3, stride=1, pad=1),
        LayerSpec("relu", "relu3"),
        LayerSpec("maxpool", "pool3", window=2, stride=2),
        LayerSpec("fc", "fc4", units=class_count),
        LayerSpec("softmax", "prob"),
    )
    net = NetworkSpec(layers=layers, input_extent=(3, input_side, input_side),
                      class_count=class_count)
    infer_shapes(net)
    return net


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, length-prefixed architecture JSON, then
# parameter tensors in layer declaration order.

CHECKPOINT_MAGIC = b"LVCK"
CHECKPOINT_VERSION = 1

_LAYER_FIELDS = ("kind", "name", "out_channels", "kernel", "stride", "pad", "groups",
                 "window", "units", "rate", "lr_mult_weights", "lr_mult_bias")


def net_to_dict(net):
    return {
        "input_extent": list(net.input_extent),
        "class_count": net.class_count,
        "layers": [{f: getattr(spec, f) for f in _LAYER_FIELDS} for spec in net.layers],
    }


def net_from_dict(data):
    layers = tuple(LayerSpec(**{f: layer[f] for f in _LAYER_FIELDS}) for layer in data["layers"])
    net = NetworkSpec(layers=layers, input_extent=tuple(data["input_extent"]),
                      class_count=data["class_count"])
    infer_shapes(net)
    return net


def save_checkpoint(net, params, path):
    arch = json.dumps(net_to_dict(net), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(arch)))
        fh.write(arch)
        for spec in net.layers:
            if spec.has_params():
                write_tensor(fh, params[spec.name]["weights"])
                write_tensor(fh, params[spec.name]["bias"])


def load_checkpoint(path):
    """Read a checkpoint back into (net, params); bit-identical to what was
    saved. Truncation, version skew, or trailing bytes raise with the file
    offset rather than returning a partial network."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint: bad magic {magic!r} at offset 0")
        header = fh.read(6)
        if len(header) != 6:
            raise ValueError(f"truncated checkpoint header at offset {4 + len(header)}")
        version, arch_len = struct.unpack("<HI", header)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} at offset 4")
        arch_raw = fh.read(arch_len)
        if len(arch_raw) != arch_len:
            raise ValueError(f"truncated architecture block at offset {10 + len(arch_raw)}")
        try:
            net = net_from_dict(json.loads(arch_raw))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"corrupt architecture block at offset 10: {exc}") from exc
        params = {}
        in_shapes = _layer_input_shapes(net)
        for spec, in_shape in zip(net.layers, in_shapes):
            if not spec.has_params():
                continue
            weights = read_tensor(fh)
            bias = read_tensor(fh)
            if spec.kind == "conv":
                expect = (spec.out_channels, in_shape[0] // spec.groups, spec.kernel, spec.kernel)
            else:
                expect = (spec.units, int(np.prod(in_shape)))
            if tuple(weights.shape) != expect:
                raise ValueError(f"layer {spec.name!r}: stored weights {weights.shape} "
                                 f"!= expected {expect}")
            params[spec.name] = {"weights": weights, "bias": bias}
        if fh.read(1):
            raise ValueError(f"trailing bytes after parameters at offset {fh.tell() - 1}")
    return net, params


# ---------------------------------------------------------------------------
# Training loop

def predict(net, params, image):
    trace = forward(net, params, image)
    return int(np.argmax(trace.outputs[-1]))


def accuracy(net, params, images, labels):
    hits = sum(predict(net, params, img) == int(lab) for img, lab in zip(images, labels))
    return hits / len(labels)


def train_network(net, params, images, labels, *, epochs, base_lr, batch_size=16,
                  seed=0, eval_images=None, eval_labels=None, log=None,
                  checkpoint_every=0, checkpoint_dir=None):
    """Mini-batch SGD over (images, labels) with zero-based labels.

    Examples inside a batch are processed in a fixed order and their
    gradients averaged, so a given seed reproduces the run bit for bit.
    Returns (params, history) where history holds one dict per epoch.
    """
    rng = np.random.default_rng(seed)
    n = len(labels)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            acc_grads = None
            for idx in batch:
                trace = forward(net, params, images[idx])
                losses.append(cross_entropy(trace.outputs[-1], int(labels[idx])))
                grads = backward(net, params, trace, int(labels[idx]))
                if acc_grads is None:
                    acc_grads = grads
                else:
                    for name, group in grads.items():
                        acc_grads[name]["weights"] += group["weights"]
                        acc_grads[name]["bias"] += group["bias"]
            scale = np.float32(1.0 / len(batch))
            for group in acc_grads.values():
                group["weights"] *= scale
                group["bias"] *= scale
            params = sgd_step(params, acc_grads, base_lr, net)
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if eval_images is not None:
            entry["test_accuracy"] = accuracy(net, params, eval_images, eval_labels)
        history.append(entry)
        if log is not None:
            log(entry)
        if checkpoint_every and checkpoint_dir is not None and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(net, params, f"{checkpoint_dir}/epoch_{epoch + 1:04d}.lvck")
    return params, history
