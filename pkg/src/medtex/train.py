"""Training: teacher pretraining, joint distillation, checkpointing.

Distillation runs in three modes:

* ``med_tex``      — output loss plus the four intermediate feature losses;
  trains student, explainer, channel adapters and variance parameters.
* ``med_ex``       — output loss only; trains student and explainer.
* ``student_only`` — no explainer; the student consumes the raw image.

The teacher stays frozen in every mode (asserted by hashing its parameters
before and after), and the distillation API only accepts an
``ImagesOnlyView``: ground-truth labels are structurally out of reach, all
supervision comes from the teacher's outputs.

Reproducibility: parameter init derives from (seed, component name), batch
order from (seed, epoch), so runs are bit-identical given a config and
checkpoints can resume mid-run.  Checkpoint files are a small JSON header
plus raw little-endian arrays, written atomically; identical state produces
identical bytes.
"""

import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arch
from . import engine as E
from . import losses as L
from .data import Dataset
from .errors import DivergenceError, FormatError, ValidationError
from .explainer import compose_selection

CHECKPOINT_MAGIC = b"MTCK"
CHECKPOINT_VERSION = 1
MODES = ("med_tex", "med_ex", "student_only")

# emitted selection maps are re-checked against their factors this often
_THETA_CHECK_EVERY = 50

# cache teacher outputs for the whole training set up to this many bytes
_TEACHER_CACHE_BYTES = 1536 * 1024 * 1024


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16          # reference setting is 64; 16 is the desk-scale default
    lam: float = L.DEFAULT_LAMBDA
    epochs: int = 30
    seed: int = 0
    mode: str = "med_tex"
    epsilon: float = L.DEFAULT_EPSILON
    image_size: int = 64
    num_classes: int = 2
    patience: int = 10            # plateau early stop; <= 0 disables
    min_delta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cache_teacher: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("train", "TrainConfig", "learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("train", "TrainConfig", "batch_size must be >= 1")
        if self.lam < 0:
            raise ValidationError("train", "TrainConfig", "lambda must be >= 0")
        if self.mode not in MODES:
            raise ValidationError("train", "TrainConfig", f"mode must be one of {MODES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ImagesOnlyView:
    """Label-blind view of a dataset: images are all a consumer can reach."""

    def __init__(self, images):
        if isinstance(images, Dataset):
            images = images.images()
        self._images = np.ascontiguousarray(np.asarray(images, dtype=np.float32))
        if self._images.ndim != 4 or self._images.shape[1] != 3:
            raise ValidationError("train", "ImagesOnlyView",
                                  f"expected (N, 3, H, W) images, got {self._images.shape}")

    def __len__(self):
        return self._images.shape[0]

    @property
    def image_shape(self):
        return tuple(self._images.shape[1:])

    def batch(self, idx):
        return self._images[idx]


class Adam:
    """Adaptive-moment optimizer over named parameter tensors."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def state_arrays(self):
        out = {}
        for name, _ in self.named_params:
            out[f"adam/{name}/m"] = self.m[name]
            out[f"adam/{name}/v"] = self.v[name]
        out["adam/t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        for name, _ in self.named_params:
            self.m[name] = arrays[f"adam/{name}/m"].copy()
            self.v[name] = arrays[f"adam/{name}/v"].copy()
        self.t = int(arrays["adam/t"][0])


# ---------------------------------------------------------------------------
# model bundles

@dataclass
class Bundle:
    """All trainable pieces of one distillation run."""
    mode: str
    student: arch.ParameterizedModel
    explainer: arch.ParameterizedModel = None
    mus: list = field(default_factory=list)
    variances: L.VarianceParams = None

    def models(self):
        out = {"student": self.student}
        if self.explainer is not None:
            out["explainer"] = self.explainer
        for i, mu in enumerate(self.mus, start=1):
            out[f"mu{i}"] = mu
        return out

    def named_params(self):
        for model_name, model in self.models().items():
            for pname, p in model.params.items():
                yield f"{model_name}/{pname}", p
        if self.variances is not None:
            for i, lv in enumerate(self.variances.layers, start=1):
                yield f"alpha/{i}", lv.alpha


def _component_seed(seed, name):
    return int(np.random.SeedSequence((int(seed), zlib.crc32(name.encode())))
               .generate_state(1)[0])


def make_bundle(config, dtype=np.float32):
    shape = (3, config.image_size, config.image_size)
    student = arch.build_student(shape, config.num_classes,
                                 seed=_component_seed(config.seed, "student"), dtype=dtype)
    if config.mode == "student_only":
        return Bundle(mode=config.mode, student=student)
    explainer = arch.build_explainer(shape,
                                     seed=_component_seed(config.seed, "explainer"),
                                     dtype=dtype)
    if config.mode == "med_ex":
        return Bundle(mode=config.mode, student=student, explainer=explainer)
    mus = [arch.build_mu_subnetwork(i, seed=_component_seed(config.seed, f"mu{i}"),
                                    dtype=dtype)
           for i in (1, 2, 3, 4)]
    variances = L.VarianceParams.create(arch.TEACHER_WIDTHS, epsilon=config.epsilon,
                                        dtype=dtype)
    return Bundle(mode=config.mode, student=student, explainer=explainer,
                  mus=mus, variances=variances)


def _selection_tensors(explainer, x, training):
    """Explainer heads -> (theta, spatial, channel) engine tensors."""
    streams = explainer.forward(x, training=training)
    spatial = streams["spatial"]                    # (N, 1, H, W)
    channel = streams["channel"]                    # (N, C)
    n, c = channel.data.shape
    theta = E.mul(E.reshape(channel, (n, c, 1, 1)), spatial)
    return theta, spatial, channel


class StudentPipeline:
    """Frozen distilled pipeline: selection + simplified input + student."""

    def __init__(self, bundle):
        self.mode = bundle.mode
        self.student = bundle.student
        self.explainer = bundle.explainer

    def predict(self, images, batch_size=32):
        images = np.asarray(images, dtype=np.float32)
        out = []
        with E.no_grad():
            for s in range(0, len(images), batch_size):
                x = E.as_tensor(images[s:s + batch_size])
                if self.explainer is None:
                    probs = self.student.forward(x, training=False)["out"]
                else:
                    theta, _, _ = _selection_tensors(self.explainer, x, training=False)
                    probs = self.student.forward(E.mul(theta, x), training=False)["out"]
                out.append(probs.data)
        return np.concatenate(out, axis=0)

    def selection_map(self, image):
        """SelectionMap for one (3, H, W) image (inference-mode explainer)."""
        if self.explainer is None:
            raise ValidationError("train", "selection_map",
                                  "student_only mode has no explainer")
        x = np.asarray(image, dtype=np.float32)[None]
        with E.no_grad():
            _, spatial, channel = _selection_tensors(self.explainer, E.as_tensor(x),
                                                     training=False)
        return compose_selection(spatial.data[0].astype(np.float64),
                                 channel.data[0].astype(np.float64))


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    kind: str                  # "teacher" or "distill"
    config: TrainConfig
    arch_configs: dict         # model name -> builder config dict
    arrays: dict               # flat name -> ndarray (params, buffers, adam)
    counters: dict
    metrics_offset: int = 0
    extra: dict = field(default_factory=dict)


def _collect_arrays(models, variances=None, adam=None):
    arrays = {}
    for model_name, model in models.items():
        for pname, p in model.params.items():
            arrays[f"param/{model_name}/{pname}"] = p.data
        for bname, state in model.buffers.items():
            arrays[f"buffer/{model_name}/{bname}/mean"] = state["mean"]
            arrays[f"buffer/{model_name}/{bname}/var"] = state["var"]
    if variances is not None:
        for i, lv in enumerate(variances.layers, start=1):
            arrays[f"param/alpha/{i}"] = lv.alpha.data
    if adam is not None:
        arrays.update(adam.state_arrays())
    return arrays


def save_checkpoint(ckpt, path):
    """Serialize atomically; identical checkpoints produce identical bytes."""
    names = sorted(ckpt.arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "train_config": ckpt.config.to_dict(),
        "arch_configs": ckpt.arch_configs,
        "counters": ckpt.counters,
        "metrics_offset": ckpt.metrics_offset,
        "extra": ckpt.extra,
        "arrays": [[n, str(ckpt.arrays[n].dtype), list(ckpt.arrays[n].shape)]
                   for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(ckpt.arrays[n]).astype(
                ckpt.arrays[n].dtype.newbyteorder("<"), copy=False).tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_kind=None):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError("train", "load_checkpoint", f"cannot read {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("train", "load_checkpoint", f"{path} is not a checkpoint file")
    version = int(np.frombuffer(raw[4:8], dtype=np.uint32)[0])
    if version != CHECKPOINT_VERSION:
        raise FormatError("train", "load_checkpoint",
                          f"checkpoint format version {version} != {CHECKPOINT_VERSION}")
    hlen = int(np.frombuffer(raw[8:16], dtype=np.uint64)[0])
    if len(raw) < 16 + hlen:
        raise FormatError("train", "load_checkpoint", f"{path} is truncated")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    arrays = {}
    off = 16 + hlen
    for name, dtype_str, shape in header["arrays"]:
        dt = np.dtype(dtype_str)
        count = int(np.prod(shape)) if shape else 1
        nbytes = dt.itemsize * count
        if off + nbytes > len(raw):
            raise FormatError("train", "load_checkpoint", f"{path} is truncated at {name}")
        arrays[name] = np.frombuffer(raw, dtype=dt.newbyteorder("<"), count=count,
                                     offset=off).astype(dt, copy=True).reshape(shape)
        off += nbytes
    if off != len(raw):
        raise FormatError("train", "load_checkpoint", f"{path} has trailing bytes")
    ckpt = Checkpoint(kind=header["kind"],
                      config=TrainConfig.from_dict(header["train_config"]),
                      arch_configs=header["arch_configs"], arrays=arrays,
                      counters=header["counters"],
                      metrics_offset=header["metrics_offset"], extra=header["extra"])
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise FormatError("train", "load_checkpoint",
                          f"expected a {expect_kind!r} checkpoint, found {ckpt.kind!r} "
                          f"holding archs {sorted(ckpt.arch_configs)}")
    return ckpt


def _load_model_arrays(model, model_name, arrays):
    for pname, p in model.params.items():
        key = f"param/{model_name}/{pname}"
        if key not in arrays:
            raise FormatError("train", "load_checkpoint", f"missing array {key}")
        if arrays[key].shape != p.data.shape:
            raise FormatError("train", "load_checkpoint",
                              f"{key}: shape {arrays[key].shape} != expected {p.data.shape}")
        p.data = arrays[key].astype(p.data.dtype, copy=True)
    for bname, state in model.buffers.items():
        state["mean"] = arrays[f"buffer/{model_name}/{bname}/mean"].astype(
            state["mean"].dtype, copy=True)
        state["var"] = arrays[f"buffer/{model_name}/{bname}/var"].astype(
            state["var"].dtype, copy=True)


def _config_diff(stored, requested):
    lines = []
    for key in sorted(set(stored) | set(requested)):
        a, b = stored.get(key, "<absent>"), requested.get(key, "<absent>")
        if a != b:
            lines.append(f"  {key}: checkpoint={a!r} requested={b!r}")
    return "\n".join(lines)


def teacher_from_checkpoint(ckpt, dtype=np.float32):
    if "teacher" not in ckpt.arch_configs:
        raise FormatError("train", "teacher_from_checkpoint",
                          f"checkpoint holds {sorted(ckpt.arch_configs)} architectures, "
                          "not a teacher")
    model = arch.build_from_config(ckpt.arch_configs["teacher"], dtype=dtype)
    _load_model_arrays(model, "teacher", ckpt.arrays)
    model.set_trainable(False)
    return model


def bundle_from_checkpoint(ckpt, dtype=np.float32):
    config = ckpt.config
    bundle = make_bundle(config, dtype=dtype)
    for model_name, model in bundle.models().items():
        stored = ckpt.arch_configs.get(model_name)
        if stored is None:
            raise FormatError("train", "bundle_from_checkpoint",
                              f"checkpoint has no {model_name!r} architecture "
                              f"(found {sorted(ckpt.arch_configs)})")
        if stored != model.config:
            raise FormatError("train", "bundle_from_checkpoint",
                              f"architecture mismatch for {model_name} "
                              f"(checkpoint arch {stored.get('arch')!r} vs requested "
                              f"{model.config.get('arch')!r}):\n"
                              + _config_diff(stored, model.config))
        _load_model_arrays(model, model_name, ckpt.arrays)
    if bundle.variances is not None:
        for i, lv in enumerate(bundle.variances.layers, start=1):
            lv.alpha.data = ckpt.arrays[f"param/alpha/{i}"].astype(lv.alpha.data.dtype,
                                                                   copy=True)
    return bundle


def parameter_digest(model):
    """Stable hash of all parameter bytes, for frozen-model assertions."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# shared loop machinery

def _epoch_perm(seed, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 2000 + int(epoch))))
    return rng.permutation(n)


class _MetricsLog:
    """Step-level loss log: one tab-separated line per step."""

    def __init__(self, path, start_offset=0):
        self.path = Path(path) if path else None
        self.lines = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists() and start_offset:
                with open(self.path, "r+", encoding="utf-8") as f:
                    f.truncate(start_offset)
            elif not self.path.exists() or start_offset == 0:
                self.path.write_text("", encoding="utf-8")
            self._fh = open(self.path, "a", encoding="utf-8")
        else:
            self._fh = None

    def write(self, line):
        self.lines.append(line)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()

    @property
    def offset(self):
        if self._fh is not None:
            return self._fh.tell()
        return sum(len(l) + 1 for l in self.lines)

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _one_hot(labels, num_classes, dtype=np.float32):
    return np.eye(num_classes, dtype=dtype)[np.asarray(labels)]


def pretrain_teacher(train_set, config, test_set=None, out_dir=None, max_steps=0):
    """Train the teacher on ground-truth labels; returns a frozen checkpoint.

    If ``test_set`` is given, held-out accuracy/precision/recall/F1 are
    stored under ``extra["test_metrics"]``.  ``max_steps`` caps the total
    number of optimizer steps (0 = no cap).
    """
    from .evaluation import confusion_metrics  # local import: eval depends on arch only

    images = train_set.images()
    labels = train_set.labels()
    shape = (3, config.image_size, config.image_size)
    if tuple(images.shape[1:]) != shape:
        raise ValidationError("train", "pretrain_teacher",
                              f"dataset images {images.shape[1:]} != config {shape}")
    teacher = arch.build_teacher(shape, config.num_classes,
                                 seed=_component_seed(config.seed, "teacher"))
    opt = Adam([(f"teacher/{n}", p) for n, p in teacher.params.items()],
               lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2,
               eps=config.adam_eps)
    log = _MetricsLog(Path(out_dir) / "metrics.tsv" if out_dir else None)
    onehot = _one_hot(labels, config.num_classes)

    n = len(images)
    global_step = 0
    best = np.inf
    stale = 0
    for epoch in range(config.epochs):
        perm = _epoch_perm(config.seed, epoch, n)
        epoch_losses = []
        for bi in range(0, n, config.batch_size):
            idx = perm[bi:bi + config.batch_size]
            x = E.as_tensor(images[idx])
            probs = teacher.forward(x, training=True)["out"]
            loss = L.output_distill_loss(onehot[idx], probs)
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError("train", "pretrain_teacher",
                                      f"non-finite loss at step {global_step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            global_step += 1
            epoch_losses.append(val)
            log.write(L.DistillLossTerms(val, [], config.lam, val).metrics_line(global_step))
            if max_steps and global_step >= max_steps:
                break
        if max_steps and global_step >= max_steps:
            break
        mean_loss = float(np.mean(epoch_losses))
        if best - mean_loss > config.min_delta:
            best = mean_loss
            stale = 0
        else:
            stale += 1
            if config.patience > 0 and stale >= config.patience:
                break

    extra = {}
    if test_set is not None:
        preds = teacher.predict(test_set.images()).argmax(axis=1)
        extra["test_metrics"] = confusion_metrics(test_set.labels(), preds)
    teacher.set_trainable(False)
    ckpt = Checkpoint(kind="teacher", config=config,
                      arch_configs={"teacher": teacher.config},
                      arrays=_collect_arrays({"teacher": teacher}, adam=opt),
                      counters={"epoch": epoch, "global_step": global_step},
                      metrics_offset=log.offset, extra=extra)
    log.close()
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "teacher.ckpt")
    return ckpt


def _teacher_outputs(teacher, images_batch):
    """Frozen-teacher probabilities and taps for one image batch."""
    with E.no_grad():
        streams = teacher.forward(E.as_tensor(images_batch), training=False)
        probs = streams["out"].data
        taps = [streams[t].data for t in ("b1", "b2", "b3", "b4")]
    return probs, taps


def distill(teacher, images, config, out_dir=None, resume=None, max_steps=0):
    """Distill the frozen teacher into the mode's student-side models.

    ``teacher`` is a teacher checkpoint or model; ``images`` must be an
    ImagesOnlyView (or something convertible), which keeps ground-truth
    labels structurally out of reach.  ``max_steps`` caps the optimizer
    steps of this call (0 = no cap), e.g. to stop mid-run and resume later.
    Returns a distill checkpoint.
    """
    if isinstance(teacher, Checkpoint):
        teacher = teacher_from_checkpoint(teacher)
    teacher.set_trainable(False)
    if not isinstance(images, ImagesOnlyView):
        images = ImagesOnlyView(images)
    shape = (3, config.image_size, config.image_size)
    if images.image_shape != shape:
        raise ValidationError("train", "distill",
                              f"images {images.image_shape} != config {shape}")
    if tuple(teacher.spec.input_shape) != shape:
        raise ValidationError("train", "distill",
                              f"teacher expects {teacher.spec.input_shape}, config says {shape}")
    teacher_digest = parameter_digest(teacher)

    if resume is not None:
        bundle = bundle_from_checkpoint(resume)
        if resume.config.to_dict() != config.to_dict():
            raise ValidationError("train", "distill",
                                  "resume checkpoint was produced with a different config")
    else:
        bundle = make_bundle(config)
    opt = Adam(list(bundle.named_params()), lr=config.learning_rate,
               beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)

    n = len(images)
    counters = {"epoch": 0, "batch_index": 0, "global_step": 0,
                "best_epoch_loss": np.inf, "stale_epochs": 0}
    metrics_offset = 0
    if resume is not None:
        counters.update(resume.counters)
        opt.load_state_arrays(resume.arrays)
        metrics_offset = resume.metrics_offset
    log = _MetricsLog(Path(out_dir) / "metrics.tsv" if out_dir else None,
                      start_offset=metrics_offset)

    # frozen teacher outputs are constant: precompute once when they fit
    cache = None
    probe_probs, probe_taps = _teacher_outputs(teacher, images.batch(np.array([0])))
    per_image = (probe_probs[0].size + sum(t[0].size for t in probe_taps)) * 4
    if config.cache_teacher and per_image * n <= _TEACHER_CACHE_BYTES:
        all_probs = []
        all_taps = [[] for _ in range(4)]
        for s in range(0, n, 32):
            p, taps = _teacher_outputs(teacher, images.batch(np.arange(s, min(s + 32, n))))
            all_probs.append(p)
            for i in range(4):
                all_taps[i].append(taps[i])
        cache = (np.concatenate(all_probs),
                 [np.concatenate(t) for t in all_taps])

    need_intermediate = config.mode == "med_tex"
    epoch = counters["epoch"]
    global_step = counters["global_step"]
    best = float(counters["best_epoch_loss"])
    stale = int(counters["stale_epochs"])
    batch_start = counters["batch_index"]
    stop = False
    last_terms = None

    while epoch < config.epochs and not stop:
        perm = _epoch_perm(config.seed, epoch, n)
        batch_indices = [perm[s:s + config.batch_size]
                         for s in range(0, n, config.batch_size)]
        epoch_losses = []
        for bi in range(batch_start, len(batch_indices)):
            idx = batch_indices[bi]
            x_np = images.batch(idx)
            if cache is not None:
                t_probs = cache[0][idx]
                t_taps = [cache[1][i][idx] for i in range(4)]
            else:
                t_probs, t_taps = _teacher_outputs(teacher, x_np)
            x = E.as_tensor(x_np)
            if bundle.explainer is not None:
                theta, spatial, channel = _selection_tensors(bundle.explainer, x,
                                                             training=True)
                student_in = E.mul(theta, x)
            else:
                theta = spatial = channel = None
                student_in = x
            streams = bundle.student.forward(student_in, training=True)
            l_out = L.output_distill_loss(t_probs, streams["out"])
            l_inter = []
            if need_intermediate:
                for i in range(4):
                    l_inter.append(L.intermediate_loss(
                        t_taps[i], streams[f"b{i + 1}"], bundle.mus[i],
                        bundle.variances.layers[i]))
            total = L.total_loss(l_out, l_inter, config.lam)
            total_val = total.item()
            if not np.isfinite(total_val):
                raise DivergenceError("train", "distill",
                                      f"non-finite loss at step {global_step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            global_step += 1
            epoch_losses.append(total_val)
            last_terms = L.DistillLossTerms(l_out.item(),
                                            [t.item() for t in l_inter],
                                            config.lam, total_val)
            log.write(last_terms.metrics_line(global_step))
            if theta is not None and global_step % _THETA_CHECK_EVERY == 0:
                _check_theta(theta, spatial, channel)
            if max_steps and global_step >= max_steps:
                stop = True
                counters = {"epoch": epoch, "batch_index": bi + 1,
                            "global_step": global_step, "best_epoch_loss": best,
                            "stale_epochs": stale}
                break
        batch_start = 0
        if stop:
            break
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else np.inf
        if best - mean_loss > config.min_delta:
            best = mean_loss
            stale = 0
        else:
            stale += 1
        epoch += 1
        counters = {"epoch": epoch, "batch_index": 0, "global_step": global_step,
                    "best_epoch_loss": best, "stale_epochs": stale}
        if config.patience > 0 and stale >= config.patience:
            break

    if parameter_digest(teacher) != teacher_digest:
        raise ValidationError("train", "distill", "teacher parameters changed during distillation")

    counters["best_epoch_loss"] = float(counters["best_epoch_loss"])
    extra = {"teacher_digest": teacher_digest}
    if last_terms is not None:
        extra["final_loss"] = {"l_output": last_terms.l_output,
                               "l_intermediate": last_terms.l_intermediate,
                               "lambda": last_terms.lam, "total": last_terms.total}
    ckpt = Checkpoint(kind="distill", config=config,
                      arch_configs={n_: m.config for n_, m in bundle.models().items()},
                      arrays=_collect_arrays(bundle.models(), bundle.variances, opt),
                      counters=counters, metrics_offset=log.offset, extra=extra)
    log.close()
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "distill.ckpt")
    return ckpt


def _check_theta(theta, spatial, channel):
    """Runtime invariant: emitted maps stay in [0,1] and exactly rank-1."""
    got = theta.data[0]
    m = compose_selection(spatial.data[0], channel.data[0])
    if not np.array_equal(m.values, got):
        raise ValidationError("train", "distill",
                              "selection map is not the exact product of its factors")
