"""Twin verification network: shared encoder/decoder stores, distance head, losses.

Both samples of a pair run through the *same* encoder object (and, when the
generative path is active, the same decoder object), so weight sharing is
structural rather than copied. The model exposes:

- a discriminative path: embeddings -> pairwise distance -> pair probability
  ``p = 1 - tanh(d)`` -> cross-entropy over labeled pairs;
- a generative path: embeddings -> reconstructions -> un-squared per-sample
  Euclidean reconstruction error over *all* pairs;
- an l2 parameter penalty.

Per batch of m pairs the objective is

    total = disc_sum/m + alpha * gen_sum/m + beta * reg

so the weights are independent of batch size. Variant dispatch: ``disseven``
pins alpha to 0 and skips the decoder entirely; ``genseven`` drops the
discriminative term and ignores labels.
"""

import json
import os
import struct

import numpy as np

from . import config
from .arch import ArchSpec
from .config import HyperParams, derive_rng
from .errors import CheckpointError, ConfigError, DataFormatError, SevenError, ShapeMismatchError, TrainingDivergedError
from .layers import EVAL, TRAIN, build_stack, run_backward, run_forward
from .tensor import tensor_from_bytes, tensor_to_bytes

POS = 1
NEG = -1
UNL = 0

CHECKPOINT_MAGIC = b"SEVN-CKPT"
CHECKPOINT_VERSION = 1


class PairBatch:
    """A batch of sample pairs with per-pair relation codes.

    ``rel`` is int8: +1 same-class, -1 different-class, 0 unlabeled.
    """

    def __init__(self, x1, x2, rel):
        self.x1 = np.asarray(x1)
        self.x2 = np.asarray(x2)
        self.rel = np.asarray(rel, dtype=np.int8)
        if self.x1.shape != self.x2.shape:
            raise ShapeMismatchError(
                f"pair branches must have equal shapes, got {self.x1.shape} and {self.x2.shape}")
        if self.rel.ndim != 1 or len(self.rel) != len(self.x1):
            raise ShapeMismatchError(
                f"need one relation per pair: {len(self.x1)} pairs, rel shape {self.rel.shape}")
        bad = set(np.unique(self.rel).tolist()) - {POS, NEG, UNL}
        if bad:
            raise SevenError(f"relation codes must be -1, 0, or +1; got {sorted(bad)}")

    def __len__(self):
        return len(self.rel)

    @property
    def labeled_mask(self):
        return self.rel != UNL


class LossReport:
    """Loss breakdown for one batch; data terms are per-pair means."""

    def __init__(self, total, discriminative, generative, regularization, distances):
        self.total = float(total)
        self.discriminative = float(discriminative)
        self.generative = float(generative)
        self.regularization = float(regularization)
        self.distances = np.asarray(distances, dtype=np.float64)

    def as_dict(self):
        return {
            "total": self.total,
            "discriminative": self.discriminative,
            "generative": self.generative,
            "regularization": self.regularization,
        }

    def __repr__(self):
        return ("LossReport(total={:.6g}, discriminative={:.6g}, generative={:.6g}, "
                "regularization={:.6g})").format(
                    self.total, self.discriminative, self.generative, self.regularization)


def pair_probability(d):
    """Map distances to same-class probability: p = 1 - tanh(d), in (0, 1]."""
    arr = np.asarray(d, dtype=np.float64)
    if np.any(arr < 0):
        raise SevenError("pair probability is defined for non-negative distances only")
    p = 1.0 - np.tanh(arr)
    return float(p) if np.ndim(d) == 0 else p


def _clamped_probability(d):
    p = 1.0 - np.tanh(np.asarray(d, dtype=np.float64))
    eps = config.PROB_CLAMP
    return np.clip(p, eps, 1.0 - eps)


def discriminative_loss(d, rel):
    """Cross-entropy over labeled pairs: -log p for same-class, -log(1-p) otherwise.

    Unlabeled pairs contribute nothing. Probabilities are clamped away from
    {0, 1} so a mislabeled pair at an extreme distance stays finite.
    """
    d = np.asarray(d, dtype=np.float64)
    rel = np.asarray(rel, dtype=np.int8)
    if d.shape != rel.shape:
        raise ShapeMismatchError(f"distances {d.shape} and relations {rel.shape} must align")
    p = _clamped_probability(d)
    loss = -np.log(p) * (rel == POS) - np.log(1.0 - p) * (rel == NEG)
    return float(loss.sum())


def discriminative_loss_kl(d, rel):
    """Same quantity by the Kullback-Leibler route.

    Each labeled pair has a deterministic target distribution over
    {same, different} — (1, 0) or (0, 1) — and the model's is (p, 1-p);
    the loss is the sum of KL(target || model) over labeled pairs, computed
    literally with the 0*log(0) = 0 convention.
    """
    d = np.asarray(d, dtype=np.float64)
    rel = np.asarray(rel, dtype=np.int8)
    if d.shape != rel.shape:
        raise ShapeMismatchError(f"distances {d.shape} and relations {rel.shape} must align")
    p = _clamped_probability(d)
    q = np.stack([p, 1.0 - p], axis=-1)
    target = np.stack([rel == POS, rel == NEG], axis=-1).astype(np.float64)
    contrib = np.zeros_like(q)
    hot = target > 0
    contrib[hot] = target[hot] * (np.log(target[hot]) - np.log(q[hot]))
    return float(contrib[rel != UNL].sum())


def _disc_grad_wrt_distance(d, rel):
    """d(loss)/d(distance) per pair; zero for unlabeled pairs and inside the clamp."""
    d = np.asarray(d, dtype=np.float64)
    rel = np.asarray(rel, dtype=np.int8)
    t = np.tanh(d)
    p = 1.0 - t
    sech2 = 1.0 - t * t
    eps = config.PROB_CLAMP
    active = (p > eps) & (p < 1.0 - eps)
    pc = np.clip(p, eps, 1.0 - eps)
    grad = np.zeros_like(d)
    pos = (rel == POS) & active
    neg = (rel == NEG) & active
    grad[pos] = sech2[pos] / pc[pos]
    grad[neg] = -sech2[neg] / (1.0 - pc[neg])
    return grad


def generative_loss(x1, x2, xhat1, xhat2):
    """Sum over pairs of the per-sample Euclidean reconstruction error (un-squared)."""
    total = 0.0
    for x, xhat in ((x1, xhat1), (x2, xhat2)):
        x = np.asarray(x)
        xhat = np.asarray(xhat)
        if x.shape != xhat.shape:
            raise ShapeMismatchError(
                f"reconstruction shape {xhat.shape} must match input shape {x.shape}")
        r = (xhat - x).reshape(len(x), -1).astype(np.float64)
        total += np.sqrt(np.einsum("ij,ij->i", r, r)).sum()
    return float(total)


def _recon_grad(x, xhat, scale, dtype):
    """Gradient of scale * ||xhat - x||_2 per sample, guarded at perfect reconstruction."""
    r = (xhat - x).reshape(len(x), -1).astype(np.float64)
    denom = np.sqrt(np.einsum("ij,ij->i", r, r) + config.NORM_GUARD)
    grad = (scale / denom)[:, None] * r
    return grad.reshape(x.shape).astype(dtype)


class SevenModel:
    """Weight-shared twin encoder/decoder network."""

    def __init__(self, arch: ArchSpec, hp: HyperParams):
        self.arch = arch
        self.hp = hp
        self.dtype = hp.dtype
        enc_rng = derive_rng(hp.seed, "init", "encoder")
        dec_rng = derive_rng(hp.seed, "init", "decoder")
        self.encoder, enc_out = build_stack(arch.encoder, arch.input_shape, enc_rng, self.dtype)
        if enc_out != (arch.embed_dim,):
            raise ConfigError(
                f"encoder must end in a flat {arch.embed_dim}-wide embedding, got {enc_out}")
        self.decoder, dec_out = build_stack(arch.decoder, (arch.embed_dim,), dec_rng, self.dtype)
        if tuple(dec_out) != tuple(arch.input_shape):
            raise ConfigError(
                f"decoder output shape {dec_out} must equal encoder input shape {arch.input_shape}")

    # ---------------------------------------------------------------- variant dispatch

    @property
    def discriminative_active(self):
        return self.hp.variant != "genseven"

    @property
    def generative_active(self):
        if self.hp.variant == "genseven":
            return True
        if self.hp.variant == "disseven":
            return False
        return self.hp.effective_alpha > 0

    # ---------------------------------------------------------------- parameter access

    def _components(self, trainable_only=False):
        comps = [("enc", self.encoder)]
        if not trainable_only or self.generative_active:
            comps.append(("dec", self.decoder))
        return comps

    def named_params(self, trainable_only=False):
        out = {}
        for prefix, layers in self._components(trainable_only):
            for i, layer in enumerate(layers):
                for name, value in layer.params.items():
                    out[f"{prefix}.{i}.{name}"] = value
        return out

    def named_grads(self, trainable_only=False):
        out = {}
        for prefix, layers in self._components(trainable_only):
            for i, layer in enumerate(layers):
                for name, value in layer.grads.items():
                    out[f"{prefix}.{i}.{name}"] = value
        return out

    def named_buffers(self):
        out = {}
        for prefix, layers in self._components():
            for i, layer in enumerate(layers):
                for name, value in layer.buffers.items():
                    out[f"{prefix}.{i}.{name}"] = value
        return out

    def _locate(self, name):
        try:
            prefix, index, key = name.split(".")
            layers = {"enc": self.encoder, "dec": self.decoder}[prefix]
            return layers[int(index)], key
        except (ValueError, KeyError, IndexError):
            raise CheckpointError(f"unknown tensor name {name!r}") from None

    def set_param(self, name, value):
        layer, key = self._locate(name)
        if key not in layer.params:
            raise CheckpointError(f"layer has no parameter {name!r}")
        if layer.params[key].shape != value.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: model {layer.params[key].shape}, file {value.shape}")
        layer.params[key] = value.astype(self.dtype)
        layer.grads[key] = np.zeros_like(layer.params[key])

    def set_buffer(self, name, value):
        layer, key = self._locate(name)
        if key not in layer.buffers:
            raise CheckpointError(f"layer has no buffer {name!r}")
        if layer.buffers[key].shape != value.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: model {layer.buffers[key].shape}, file {value.shape}")
        layer.buffers[key] = value.astype(self.dtype)

    # ---------------------------------------------------------------- forward pieces

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != self.arch.input_shape:
            raise ShapeMismatchError(
                f"expected input (batch, {', '.join(map(str, self.arch.input_shape))}), "
                f"got {x.shape}")
        return x

    def embed(self, x, mode=EVAL, rng=None):
        """Encode a batch of samples to flat embeddings."""
        y, _ = run_forward(self.encoder, self._check_input(x), mode, rng)
        return y

    @staticmethod
    def distance(e1, e2):
        """Per-pair Euclidean distance between embedding batches."""
        e1 = np.asarray(e1)
        e2 = np.asarray(e2)
        if e1.shape != e2.shape:
            raise ShapeMismatchError(
                f"embedding shapes must match, got {e1.shape} and {e2.shape}")
        diff = (e1 - e2).astype(np.float64)
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def verify(self, x1, x2, tau=None):
        """Decide same-class (True) vs different-class per pair: d <= tau."""
        tau = self.hp.tau if tau is None else tau
        if tau < 0:
            raise ConfigError(f"tau must be >= 0, got {tau}")
        d = self.distance(self.embed(x1), self.embed(x2))
        return d <= tau

    def _pair_forward(self, batch, mode, rng):
        """Run both branches (encoder always, decoder when active) in canonical order."""
        x1 = self._check_input(batch.x1)
        x2 = self._check_input(batch.x2)
        e1, enc_c1 = run_forward(self.encoder, x1, mode, rng)
        e2, enc_c2 = run_forward(self.encoder, x2, mode, rng)
        out = {"x1": x1, "x2": x2, "e1": e1, "e2": e2,
               "enc_c1": enc_c1, "enc_c2": enc_c2,
               "d": self.distance(e1, e2)}
        if self.generative_active:
            xh1, dec_c1 = run_forward(self.decoder, e1, mode, rng)
            xh2, dec_c2 = run_forward(self.decoder, e2, mode, rng)
            out.update(xh1=xh1, xh2=xh2, dec_c1=dec_c1, dec_c2=dec_c2)
        return out

    def _compose_report(self, fwd, m, rel):
        hp = self.hp
        disc_sum = discriminative_loss(fwd["d"], rel) if self.discriminative_active else 0.0
        gen_sum = (generative_loss(fwd["x1"], fwd["x2"], fwd["xh1"], fwd["xh2"])
                   if self.generative_active else 0.0)
        reg = self.regularization_value()
        disc = disc_sum / m
        gen = gen_sum / m
        total = disc + hp.effective_alpha * gen + hp.beta * reg
        return LossReport(total, disc, gen, reg, fwd["d"])

    def total_loss(self, batch, mode=TRAIN, rng=None):
        """Forward both branches and report the loss breakdown (no gradients)."""
        fwd = self._pair_forward(batch, mode, rng)
        return self._compose_report(fwd, len(batch), batch.rel)

    # ---------------------------------------------------------------- regularization

    def _reg_groups(self):
        """Weight matrices per component; biases and norm gain/shift are exempt."""
        groups = []
        for prefix, layers in self._components(trainable_only=True):
            ws = [(f"{prefix}.{i}.W", layer) for i, layer in enumerate(layers) if "W" in layer.params]
            groups.append(ws)
        return groups

    def regularization_value(self):
        if self.hp.reg_norm == "squared":
            return float(sum(
                float(np.vdot(layer.params["W"], layer.params["W"]))
                for group in self._reg_groups() for _, layer in group))
        value = 0.0
        for group in self._reg_groups():
            sq = sum(float(np.vdot(layer.params["W"], layer.params["W"])) for _, layer in group)
            value += np.sqrt(sq)
        return float(value)

    def _apply_reg_gradient(self):
        beta = self.hp.beta
        if beta == 0:
            return
        if self.hp.reg_norm == "squared":
            for group in self._reg_groups():
                for _, layer in group:
                    layer.grads["W"] += (2.0 * beta) * layer.params["W"]
            return
        for group in self._reg_groups():
            sq = sum(float(np.vdot(layer.params["W"], layer.params["W"])) for _, layer in group)
            norm = max(np.sqrt(sq), config.DIST_GUARD)
            for _, layer in group:
                layer.grads["W"] += (beta / norm) * layer.params["W"]

    # ---------------------------------------------------------------- training step

    def forward_backward(self, batch, rng=None):
        """One full train-mode pass: forward both branches, accumulate all gradients.

        Returns the batch LossReport. Gradients add onto whatever is already
        in the accumulators; the optimizer zeroes them after its step.
        """
        hp = self.hp
        m = len(batch)
        fwd = self._pair_forward(batch, TRAIN, rng)
        report = self._compose_report(fwd, m, batch.rel)
        if not np.isfinite(report.total):
            raise TrainingDivergedError(
                f"non-finite loss: total={report.total}, "
                f"discriminative={report.discriminative}, generative={report.generative}, "
                f"regularization={report.regularization}")

        e1, e2, d = fwd["e1"], fwd["e2"], fwd["d"]
        de1 = np.zeros_like(e1)
        de2 = np.zeros_like(e2)
        if self.discriminative_active:
            coeff = _disc_grad_wrt_distance(d, batch.rel) / (m * np.maximum(d, config.DIST_GUARD))
            diff = (e1 - e2).astype(np.float64)
            pull = (coeff[:, None] * diff).astype(self.dtype)
            de1 += pull
            de2 -= pull
        if self.generative_active:
            scale = hp.effective_alpha / m
            de1 += run_backward(self.decoder,
                                _recon_grad(fwd["x1"], fwd["xh1"], scale, self.dtype),
                                fwd["dec_c1"])
            de2 += run_backward(self.decoder,
                                _recon_grad(fwd["x2"], fwd["xh2"], scale, self.dtype),
                                fwd["dec_c2"])
        run_backward(self.encoder, de1, fwd["enc_c1"])
        run_backward(self.encoder, de2, fwd["enc_c2"])
        self._apply_reg_gradient()
        return report


# -------------------------------------------------------------------- checkpoints


def save_checkpoint(model: SevenModel, path, optimizer_state=None):
    """Write the model (and optionally optimizer accumulators) atomically."""
    params = model.named_params()
    buffers = model.named_buffers()
    opt = dict(optimizer_state) if optimizer_state else {}
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "hyperparams": model.hp.to_dict(),
        "params": list(params),
        "buffers": list(buffers),
        "optimizer": list(opt),
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<B", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(encoded))
    blob += encoded
    for name in header["params"]:
        blob += tensor_to_bytes(params[name])
    for name in header["buffers"]:
        blob += tensor_to_bytes(buffers[name])
    for name in header["optimizer"]:
        blob += tensor_to_bytes(opt[name])
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, optimizer_state_or_None).

    The whole file is validated before any model state is touched, so a
    truncated or corrupt file never yields a partial model.
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    base = len(CHECKPOINT_MAGIC)
    if raw[:base] != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {raw[:base]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < base + 9:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    version = raw[base]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", raw, base + 1)
    start = base + 9
    if start + hlen > len(raw):
        raise CheckpointError(f"{path}: header claims {hlen} bytes, file has {len(raw) - start}")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    missing = {"arch", "hyperparams", "params", "buffers", "optimizer"} - set(header)
    if missing:
        raise CheckpointError(f"{path}: header missing keys {sorted(missing)}")

    hp = HyperParams.from_dict(header["hyperparams"])
    arch = ArchSpec.from_dict(header["arch"])
    model = SevenModel(arch, hp)

    offset = start + hlen
    tensors = {}
    try:
        for name in header["params"] + header["buffers"] + header["optimizer"]:
            tensors[name], offset = tensor_from_bytes(raw, offset)
    except DataFormatError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")

    for name in header["params"]:
        model.set_param(name, tensors[name])
    for name in header["buffers"]:
        model.set_buffer(name, tensors[name])
    opt = {name: tensors[name].astype(model.dtype) for name in header["optimizer"]}
    return model, (opt or None)
