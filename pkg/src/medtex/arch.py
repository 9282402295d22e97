"""Network construction from declarative layer lists.

Four model families are built here:

* teacher  — 4 conv blocks (default widths 32/64/128/256), max pools between
  blocks, a 2x2 adaptive average pool, then a dense layer and softmax,
* student  — same topology at widths 2/4/8/16,
* explainer — an encoder/decoder with skip concatenations whose decoder ends
  in a 1-channel sigmoid map ("spatial" head) and whose bottleneck feeds a
  pooled dense sigmoid layer ("channel" head),
* channel-matching adapters ("mu" networks) — 1x1 conv / ReLU / 1x1 conv
  stacks that lift student feature maps to teacher channel widths.

A model is an ``ArchitectureSpec`` plus named parameter tensors; the forward
pass interprets the layer list, so shapes and parameter counts follow from
the spec alone.  The dense layer always sees a pooled 2x2 spatial input,
which makes its size independent of image resolution.
"""

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .errors import ValidationError

TEACHER_WIDTHS = (32, 64, 128, 256)
STUDENT_WIDTHS = (2, 4, 8, 16)
MU_MID_WIDTHS = (16, 32, 64, 128)

_KINDS = ("conv", "relu", "maxpool", "adaptive_pool", "fully_connected",
          "softmax", "sigmoid", "batch_norm", "upsample_nearest", "concat")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    ``input_tag`` redirects the layer input to an earlier tagged activation
    (used for the channel head), ``concat_with`` names the skip partner of a
    concat layer; both are empty for plain sequential layers.
    """
    kind: str
    kernel: int = 0         # conv kernel size, 0 if n/a
    out_channels: int = 0
    padding: int = 0
    pool_size: int = 0      # pool/upsample factor, or adaptive-pool output size
    tag: str = ""
    input_tag: str = ""
    concat_with: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError("arch", "LayerSpec", f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.kernel not in (1, 3):
            raise ValidationError("arch", "LayerSpec",
                                  f"conv kernel must be 1 or 3, got {self.kernel}")
        if self.kind in ("maxpool", "upsample_nearest") and self.pool_size != 2:
            raise ValidationError("arch", "LayerSpec",
                                  f"{self.kind} requires pool_size 2, got {self.pool_size}")


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple          # (C, H, W)
    layers: tuple
    tap_tags: tuple = ()

    def __post_init__(self):
        tags = [l.tag for l in self.layers if l.tag]
        if len(tags) != len(set(tags)):
            raise ValidationError("arch", "ArchitectureSpec", f"duplicate tags in {self.name}")
        missing = set(self.tap_tags) - set(tags)
        if missing:
            raise ValidationError("arch", "ArchitectureSpec",
                                  f"tap tags {sorted(missing)} not defined in {self.name}")


@dataclass
class FeatureTaps:
    """Tapped activations plus the final class-probability vector."""
    taps: dict
    probs: np.ndarray


@dataclass
class ParameterizedModel:
    spec: ArchitectureSpec
    params: dict                 # name -> engine.Tensor
    buffers: dict                # batch-norm running stats, name -> {"mean","var"}
    config: dict                 # builder args, serialized into checkpoints
    trainable: bool = True
    _shapes: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.spec.name

    def set_trainable(self, flag):
        self.trainable = flag
        for p in self.params.values():
            p.requires_grad = flag

    def forward(self, x, training=False):
        """Run the layer list on a batched input tensor.

        Returns a dict of tagged activations; the last layer's output is
        additionally stored under "out".
        """
        if not isinstance(x, E.Tensor):
            x = E.as_tensor(x)
        expect = self.spec.input_shape
        if tuple(x.data.shape[1:]) != tuple(expect):
            raise ValidationError("arch", "forward",
                                  f"{self.name}: input shape {tuple(x.data.shape[1:])} != spec {tuple(expect)}")
        streams = {}
        cur = x
        for i, layer in enumerate(self.spec.layers):
            if layer.input_tag:
                cur = streams[layer.input_tag]
            name = layer.tag or f"L{i:02d}"
            k = layer.kind
            if k == "conv":
                cur = E.conv2d(cur, self.params[name + ".w"], self.params[name + ".b"],
                               layer.padding)
            elif k == "relu":
                cur = E.relu(cur)
            elif k == "sigmoid":
                cur = E.sigmoid(cur)
            elif k == "softmax":
                cur = E.softmax(cur)
            elif k == "maxpool":
                cur = E.maxpool2x2(cur)
            elif k == "adaptive_pool":
                cur = E.adaptive_avgpool(cur, layer.pool_size)
            elif k == "upsample_nearest":
                cur = E.upsample_nearest2x(cur)
            elif k == "batch_norm":
                cur = E.batchnorm2d(cur, self.params[name + ".gamma"],
                                    self.params[name + ".beta"],
                                    self.buffers[name], training=training)
            elif k == "fully_connected":
                n = cur.data.shape[0]
                flat = E.reshape(cur, (n, -1))
                cur = E.linear(flat, self.params[name + ".w"], self.params[name + ".b"])
            elif k == "concat":
                cur = E.concat_channels(cur, streams[layer.concat_with])
            if layer.tag:
                streams[layer.tag] = cur
        streams["out"] = cur
        return streams

    def predict(self, images):
        """Class probabilities for a batch of images (no gradients)."""
        with E.no_grad():
            return self.forward(E.as_tensor(images), training=False)["out"].data


def count_parameters(model):
    """Exact number of scalar parameters (biases and BN affine included)."""
    return int(sum(p.data.size for p in model.params.values()))


def forward_with_taps(model, image):
    """Tapped activations and output probabilities, without gradients.

    Accepts a single (C, H, W) image or an (N, C, H, W) batch; tap arrays
    match the input's batching.
    """
    arr = np.asarray(image)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    with E.no_grad():
        streams = model.forward(E.as_tensor(arr), training=False)
    taps = {t: streams[t].data[0] if single else streams[t].data
            for t in model.spec.tap_tags}
    probs = streams["out"].data[0] if single else streams["out"].data
    return FeatureTaps(taps=taps, probs=probs)


# ---------------------------------------------------------------------------
# construction helpers

def _param_rng(seed, name):
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))


def _alloc_params(spec, seed, dtype):
    """Walk the layer list, infer shapes, allocate fan-in-scaled parameters."""
    params = {}
    buffers = {}
    shapes = {}
    tag_shape = {}
    cur = ("map",) + tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if layer.input_tag:
            cur = tag_shape[layer.input_tag]
        name = layer.tag or f"L{i:02d}"
        k = layer.kind
        if k == "conv":
            _, c, h, w = cur
            kk, f = layer.kernel, layer.out_channels
            fan_in = c * kk * kk
            # sqrt(6/fan_in) keeps activation variance flat through relu
            # stacks; plain 1/sqrt(fan_in) decays ~6x per layer and stalls
            bound = np.sqrt(6.0 / fan_in)
            rng = _param_rng(seed, f"{spec.name}/{name}")
            params[name + ".w"] = E.parameter(
                rng.uniform(-bound, bound, size=(f, c, kk, kk)).astype(dtype))
            params[name + ".b"] = E.parameter(
                rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in),
                            size=(f,)).astype(dtype))
            oh = h + 2 * layer.padding - kk + 1
            ow = w + 2 * layer.padding - kk + 1
            cur = ("map", f, oh, ow)
        elif k == "batch_norm":
            c = cur[1]
            params[name + ".gamma"] = E.parameter(np.ones(c, dtype=dtype))
            params[name + ".beta"] = E.parameter(np.zeros(c, dtype=dtype))
            buffers[name] = {"mean": np.zeros(c, dtype=dtype),
                             "var": np.ones(c, dtype=dtype)}
        elif k == "maxpool":
            _, c, h, w = cur
            if h % 2 or w % 2:
                raise ValidationError("arch", "build",
                                      f"{spec.name}: odd spatial dims ({h},{w}) reach a 2x2 pool")
            cur = ("map", c, h // 2, w // 2)
        elif k == "adaptive_pool":
            _, c, h, w = cur
            if h % layer.pool_size or w % layer.pool_size:
                raise ValidationError("arch", "build",
                                      f"{spec.name}: dims ({h},{w}) not divisible by adaptive pool {layer.pool_size}")
            cur = ("map", c, layer.pool_size, layer.pool_size)
        elif k == "upsample_nearest":
            _, c, h, w = cur
            cur = ("map", c, 2 * h, 2 * w)
        elif k == "fully_connected":
            d = int(np.prod(cur[1:]))
            f = layer.out_channels
            rng = _param_rng(seed, f"{spec.name}/{name}")
            params[name + ".w"] = E.parameter(
                rng.uniform(-np.sqrt(6.0 / d), np.sqrt(6.0 / d), size=(d, f)).astype(dtype))
            params[name + ".b"] = E.parameter(
                rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(f,)).astype(dtype))
            cur = ("vec", f)
        elif k == "concat":
            _, c, h, w = cur
            other = tag_shape[layer.concat_with]
            if other[2:] != (h, w):
                raise ValidationError("arch", "build",
                                      f"{spec.name}: concat {layer.concat_with} spatial mismatch")
            cur = ("map", c + other[1], h, w)
        # relu / sigmoid / softmax keep shape
        if layer.tag:
            tag_shape[layer.tag] = cur
        shapes[name] = cur
    return params, buffers, shapes


def _build(spec, config, seed, dtype):
    params, buffers, shapes = _alloc_params(spec, seed, dtype)
    return ParameterizedModel(spec=spec, params=params, buffers=buffers,
                              config=config, _shapes=shapes)


def _classifier_layers(widths, num_classes):
    layers = []
    for i, w in enumerate(widths, start=1):
        layers.append(LayerSpec("conv", kernel=3, out_channels=w, padding=1))
        layers.append(LayerSpec("relu", tag=f"b{i}"))
        if i < len(widths):
            layers.append(LayerSpec("maxpool", pool_size=2))
    layers.append(LayerSpec("adaptive_pool", pool_size=2))
    layers.append(LayerSpec("fully_connected", out_channels=num_classes))
    layers.append(LayerSpec("softmax", tag="probs"))
    return tuple(layers)


def _check_classifier_input(op, input_shape, num_classes):
    c, h, w = input_shape
    if h % 16 or w % 16:
        raise ValidationError("arch", op,
                              f"input dims ({h},{w}) must be divisible by 16")
    if num_classes < 2:
        raise ValidationError("arch", op, f"num_classes must be >= 2, got {num_classes}")


def build_teacher(input_shape, num_classes, widths=TEACHER_WIDTHS, seed=0, dtype=np.float32):
    _check_classifier_input("build_teacher", input_shape, num_classes)
    spec = ArchitectureSpec(
        name="teacher", input_shape=tuple(input_shape),
        layers=_classifier_layers(widths, num_classes),
        tap_tags=("b1", "b2", "b3", "b4"))
    config = {"arch": "teacher", "input_shape": _fmt_ints(input_shape),
              "num_classes": str(num_classes), "widths": _fmt_ints(widths)}
    return _build(spec, config, seed, dtype)


def build_student(input_shape, num_classes, widths=STUDENT_WIDTHS, seed=0, dtype=np.float32):
    _check_classifier_input("build_student", input_shape, num_classes)
    spec = ArchitectureSpec(
        name="student", input_shape=tuple(input_shape),
        layers=_classifier_layers(widths, num_classes),
        tap_tags=("b1", "b2", "b3", "b4"))
    config = {"arch": "student", "input_shape": _fmt_ints(input_shape),
              "num_classes": str(num_classes), "widths": _fmt_ints(widths)}
    return _build(spec, config, seed, dtype)


_ENC_WIDTHS = (32, 64, 128, 256, 512, 512)
_DEC_WIDTHS = (512, 256, 128, 128, 64)


def _double_conv(width, tag):
    out = []
    for j in range(2):
        out.append(LayerSpec("conv", kernel=3, out_channels=width, padding=1))
        out.append(LayerSpec("batch_norm"))
        out.append(LayerSpec("relu", tag=tag if j == 1 else ""))
    return out


def build_explainer(input_shape, seed=0, dtype=np.float32):
    """Encoder/decoder with skip concatenations and two sigmoid heads.

    The spatial head is the decoder output through a 1x1 conv to one channel;
    the channel head pools the bottleneck activation and maps it to one value
    per input channel.  Input dims must be divisible by 32 (five pools).
    """
    c, h, w = input_shape
    if h % 32 or w % 32:
        raise ValidationError("arch", "build_explainer",
                              f"input dims ({h},{w}) must be divisible by 32")
    layers = []
    for i, width in enumerate(_ENC_WIDTHS):
        if i > 0:
            layers.append(LayerSpec("maxpool", pool_size=2))
        layers.extend(_double_conv(width, f"e{i}"))
    # decoder: d4 comes straight off e5; each later stage concats its skip
    layers.append(LayerSpec("upsample_nearest", pool_size=2))
    layers.extend(_double_conv(_DEC_WIDTHS[0], "d4"))
    for j, width in enumerate(_DEC_WIDTHS[1:], start=1):
        skip = f"e{5 - j}"
        layers.append(LayerSpec("concat", concat_with=skip))
        layers.append(LayerSpec("upsample_nearest", pool_size=2))
        layers.extend(_double_conv(width, f"d{4 - j}"))
    layers.append(LayerSpec("conv", kernel=1, out_channels=1, padding=0))
    layers.append(LayerSpec("sigmoid", tag="spatial"))
    # channel head: pooled bottleneck -> dense -> sigmoid, one score per channel
    layers.append(LayerSpec("adaptive_pool", pool_size=1, input_tag="e5"))
    layers.append(LayerSpec("fully_connected", out_channels=c))
    layers.append(LayerSpec("sigmoid", tag="channel"))
    spec = ArchitectureSpec(name="explainer", input_shape=tuple(input_shape),
                            layers=tuple(layers), tap_tags=("spatial", "channel"))
    config = {"arch": "explainer", "input_shape": _fmt_ints(input_shape)}
    return _build(spec, config, seed, dtype)


def build_mu_subnetwork(layer_index, in_channels=None, mid_channels=None,
                        out_channels=None, seed=0, dtype=np.float32):
    """1x1 conv adapter lifting student channels to teacher channels."""
    if layer_index not in (1, 2, 3, 4):
        raise ValidationError("arch", "build_mu_subnetwork",
                              f"layer_index must be in 1..4, got {layer_index}")
    i = layer_index - 1
    cin = STUDENT_WIDTHS[i] if in_channels is None else in_channels
    cmid = MU_MID_WIDTHS[i] if mid_channels is None else mid_channels
    cout = TEACHER_WIDTHS[i] if out_channels is None else out_channels
    layers = (
        LayerSpec("conv", kernel=1, out_channels=cmid, padding=0),
        LayerSpec("relu"),
        LayerSpec("conv", kernel=1, out_channels=cout, padding=0, tag="lift"),
    )
    # spatial extent is free for 1x1 convs; use a placeholder of 1x1
    spec = ArchitectureSpec(name=f"mu{layer_index}", input_shape=(cin, 1, 1),
                            layers=layers, tap_tags=())
    config = {"arch": "mu", "layer_index": str(layer_index),
              "in_channels": str(cin), "mid_channels": str(cmid),
              "out_channels": str(cout)}
    model = _build(spec, config, seed, dtype)
    return model


def mu_forward(mu_model, student_tap):
    """Apply an adapter to a batched (N, C, H, W) student tap tensor."""
    x = student_tap if isinstance(student_tap, E.Tensor) else E.as_tensor(student_tap)
    cur = x
    for i, layer in enumerate(mu_model.spec.layers):
        name = layer.tag or f"L{i:02d}"
        if layer.kind == "conv":
            cur = E.conv2d(cur, mu_model.params[name + ".w"],
                           mu_model.params[name + ".b"], layer.padding)
        elif layer.kind == "relu":
            cur = E.relu(cur)
    return cur


# ---------------------------------------------------------------------------
# config blocks (embedded in checkpoints)

def _fmt_ints(xs):
    return ",".join(str(int(v)) for v in xs)


def _parse_ints(s):
    return tuple(int(v) for v in s.split(","))


def config_block(model):
    """Human-readable, order-stable description of a model's architecture."""
    return "".join(f"{k} = {v}\n" for k, v in sorted(model.config.items()))


def parse_config_block(text):
    cfg = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        cfg[key.strip()] = val.strip()
    return cfg


def build_from_config(cfg, seed=0, dtype=np.float32):
    """Rebuild a model (with fresh init) from a parsed config block."""
    kind = cfg.get("arch")
    if kind == "teacher":
        return build_teacher(_parse_ints(cfg["input_shape"]), int(cfg["num_classes"]),
                             widths=_parse_ints(cfg["widths"]), seed=seed, dtype=dtype)
    if kind == "student":
        return build_student(_parse_ints(cfg["input_shape"]), int(cfg["num_classes"]),
                             widths=_parse_ints(cfg["widths"]), seed=seed, dtype=dtype)
    if kind == "explainer":
        return build_explainer(_parse_ints(cfg["input_shape"]), seed=seed, dtype=dtype)
    if kind == "mu":
        return build_mu_subnetwork(int(cfg["layer_index"]),
                                   in_channels=int(cfg["in_channels"]),
                                   mid_channels=int(cfg["mid_channels"]),
                                   out_channels=int(cfg["out_channels"]),
                                   seed=seed, dtype=dtype)
    raise ValidationError("arch", "build_from_config", f"unknown arch kind {kind!r}")
