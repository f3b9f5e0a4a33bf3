"""Small embedding MLPs with manual forward/backward, the composite
classification + distillation training step, and binary checkpoints."""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import kdloss, marginloss
from .marginloss import CosineHead

CHECKPOINT_MAGIC = b"GKD1"
CHECKPOINT_VERSION = 1


@dataclass
class MLPSpec:
    input_dim: int
    hidden_dims: list
    embedding_dim: int
    activation: str = "relu"

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        if len(self.hidden_dims) < 1:
            raise ValueError("at least one hidden layer required")
        if any(d < 1 for d in dims):
            raise ValueError("all dims must be >= 1")
        if self.activation != "relu":
            raise ValueError("only relu is supported")

    @property
    def layer_dims(self):
        dims = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelBundle:
    spec: MLPSpec
    layers: list  # [(W (out, in), b (out,)), ...]
    head: CosineHead
    frozen: bool = False
    rng_seed: int = 0

    def param_dict(self):
        params = {}
        for i, (W, b) in enumerate(self.layers):
            params[f"W{i}"] = W
            params[f"b{i}"] = b
        params["head_W"] = self.head.weights
        return params


def init(spec, num_classes, seed, head_kind="arcface", scale=64.0, margin=0.5):
    """Glorot-uniform weights, zero biases, random unit-vector prototypes."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_dims:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    proto = rng.normal(size=(num_classes, spec.embedding_dim))
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)
    head = CosineHead(weights=proto, scale=scale, margin=margin, kind=head_kind)
    return ModelBundle(spec=spec, layers=layers, head=head, rng_seed=seed)


def batch_forward(m, X):
    """Affine + relu chain; final embedding layer is linear."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != m.spec.input_dim:
        raise ValueError(f"input dim {X.shape[-1]} != {m.spec.input_dim}")
    h = X
    cache = {"inputs": [], "pre": []}
    last = len(m.layers) - 1
    for i, (W, b) in enumerate(m.layers):
        cache["inputs"].append(h)
        z = h @ W.T + b
        cache["pre"].append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def forward(m, x):
    emb, cache = batch_forward(m, np.asarray(x)[None, :])
    return emb[0], cache


def batch_backward(m, cache, grad_embedding):
    """Reverse-mode gradients of the layer parameters; input grads discarded."""
    if m.frozen:
        raise ValueError("backward on frozen model")
    g = np.asarray(grad_embedding, dtype=np.float64)
    grads = {}
    last = len(m.layers) - 1
    for i in range(last, -1, -1):
        W, _ = m.layers[i]
        if i != last:
            g = g * (cache["pre"][i] > 0)
        grads[f"W{i}"] = g.T @ cache["inputs"][i]
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = g @ W
    return grads


def backward(m, cache, grad_embedding):
    return batch_backward(m, cache, np.asarray(grad_embedding)[None, :])


def kd_logits(bundle, X, labels=None, kd_logits_source="pre_margin"):
    """Scaled-cosine distillation logits of a bundle for a batch."""
    emb, _ = batch_forward(bundle, np.asarray(X, dtype=np.float64))
    cos, _ = marginloss.batch_cosine_logits(emb, bundle.head)
    if kd_logits_source == "post_margin":
        return marginloss.batch_apply_margin(cos, labels, bundle.head)
    return bundle.head.scale * cos


def composite_step(student, X, labels, teacher_logits, cfg,
                   variant="primary_binary", kd_logits_source="pre_margin"):
    """Batch-mean classification + distillation loss and student gradients.

    teacher_logits is a precomputed (B, C) array from kd_logits, or
    None for classification-only training.  The distillation path compares
    scaled cosine logits; by default margins are left out of it (they are
    label-dependent train-time perturbations), per kd_logits_source.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    B = X.shape[0]

    emb_s, net_cache = batch_forward(student, X)
    cos_s, cos_cache = marginloss.batch_cosine_logits(emb_s, student.head)
    cls_losses, dcos = marginloss.batch_margin_ce_grad(cos_s, labels, student.head)

    terms = {
        "loss_cls": float(cls_losses.mean()),
        "loss_kd": 0.0, "primary": 0.0, "secondary": 0.0, "binary": 0.0,
        "full_kd": 0.0, "mean_k": 0.0, "mean_p_phi_t": 0.0, "residual": 0.0,
    }
    if teacher_logits is not None and variant != "scratch":
        if kd_logits_source == "pre_margin":
            z_s = student.head.scale * cos_s
            dz_to_dcos = student.head.scale * np.ones_like(cos_s)
        elif kd_logits_source == "post_margin":
            z_s = marginloss.batch_apply_margin(cos_s, labels, student.head)
            dz_to_dcos = student.head.scale * np.ones_like(cos_s)
            rows = np.arange(B)
            dz_to_dcos[rows, labels] *= marginloss._margin_target_deriv(
                cos_s[rows, labels], student.head
            )
        else:
            raise ValueError(f"unknown kd_logits_source {kd_logits_source!r}")
        kd = kdloss.batch_kd(variant, teacher_logits, z_s, cfg)
        dcos = dcos + kd["grad"] * dz_to_dcos
        terms.update(
            loss_kd=float(kd["loss"].mean()),
            primary=float(kd["primary"].mean()),
            secondary=float(kd["secondary"].mean()),
            binary=float(kd["binary"].mean()),
            full_kd=float(kd["full_kd"].mean()),
            mean_k=float(kd["k"].mean()),
            mean_p_phi_t=float(kd["p_phi_t"].mean()),
            residual=float(kd["residual"].mean()),
        )

    grad_e, grad_head = marginloss.batch_cosine_backward(cos_cache, dcos / B)
    grads = batch_backward(student, net_cache, grad_e)
    grads["head_W"] = grad_head
    terms["loss"] = terms["loss_cls"] + terms["loss_kd"]
    return terms, grads


def total_loss_step(teacher, student, batch, cfg, variant="primary_binary",
                    kd_logits_source="pre_margin"):
    """Composite loss step with the teacher evaluated on the fly."""
    X, labels = batch
    if not teacher.frozen:
        raise ValueError("teacher must be frozen")
    if teacher.head.num_classes != student.head.num_classes:
        raise ValueError("teacher/student class counts differ")
    z_t = kd_logits(teacher, X, labels, kd_logits_source)
    return composite_step(student, X, labels, z_t, cfg, variant, kd_logits_source)


# --- checkpoints -------------------------------------------------------------

def save(m, path):
    """Little-endian binary: magic, version, length-prefixed JSON header,
    then raw float64 tensors in header order.  Round trip is bit exact."""
    tensors = []
    for i, (W, b) in enumerate(m.layers):
        tensors.append((f"W{i}", W))
        tensors.append((f"b{i}", b))
    tensors.append(("head_W", m.head.weights))
    header = {
        "spec": {
            "input_dim": m.spec.input_dim,
            "hidden_dims": list(m.spec.hidden_dims),
            "embedding_dim": m.spec.embedding_dim,
            "activation": m.spec.activation,
        },
        "head": {
            "scale": m.head.scale,
            "margin": m.head.margin,
            "kind": m.head.kind,
            "num_classes": m.head.num_classes,
        },
        "frozen": m.frozen,
        "rng_seed": m.rng_seed,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return path


def load(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(data):
            raise ValueError("truncated checkpoint")
        arrays[entry["name"]] = np.frombuffer(
            data[offset:end], dtype="<f8"
        ).reshape(shape).copy()
        offset = end
    spec = MLPSpec(**header["spec"])
    layers = []
    for i in range(len(spec.hidden_dims) + 1):
        layers.append((arrays[f"W{i}"], arrays[f"b{i}"]))
    h = header["head"]
    expected = (h["num_classes"], spec.embedding_dim)
    if arrays["head_W"].shape != expected:
        raise ValueError(f"head shape {arrays['head_W'].shape} != {expected}")
    head = CosineHead(weights=arrays["head_W"], scale=h["scale"],
                      margin=h["margin"], kind=h["kind"])
    if header["frozen"]:
        for W, b in layers:
            W.flags.writeable = False
            b.flags.writeable = False
        head.weights.flags.writeable = False
    return ModelBundle(spec=spec, layers=layers, head=head,
                       frozen=header["frozen"], rng_seed=header["rng_seed"])
