"""Built-in encoder/decoder topologies and their shape bookkeeping.

Each preset describes a pair of layer stacks: an encoder that maps an image
to a 128-wide embedding and a decoder that maps the embedding back to the
input shape. Decoders mirror their encoders so the reconstruction loss
compares like with like; every preset round-trips to the exact input shape.
"""

import numpy as np

from . import config
from .errors import ConfigError
from .layers import LayerSpec

DEFAULT_INPUT_SHAPES = {
    "mnist": (1, 28, 28),
    "usps": (1, 16, 16),
    "lfw": (1, 64, 48),
    "sonof": (1, 100, 100),
    "sonof80": (1, 80, 80),
    "mlp": (1, 28, 28),
}


class ArchSpec:
    """One model topology: input shape plus encoder and decoder layer lists."""

    def __init__(self, preset, input_shape, encoder, decoder, embed_dim=config.EMBED_DIM):
        self.preset = preset
        self.input_shape = tuple(int(v) for v in input_shape)
        self.encoder = list(encoder)
        self.decoder = list(decoder)
        self.embed_dim = int(embed_dim)
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (c, h, w), got {self.input_shape}")

    def to_dict(self):
        return {
            "preset": self.preset,
            "input_shape": list(self.input_shape),
            "embed_dim": self.embed_dim,
            "encoder": [s.to_dict() for s in self.encoder],
            "decoder": [s.to_dict() for s in self.decoder],
        }

    @classmethod
    def from_dict(cls, d):
        missing = {"preset", "input_shape", "embed_dim", "encoder", "decoder"} - set(d)
        if missing:
            raise ConfigError(f"arch description missing keys: {sorted(missing)}")
        return cls(
            d["preset"],
            tuple(d["input_shape"]),
            [LayerSpec.from_dict(s) for s in d["encoder"]],
            [LayerSpec.from_dict(s) for s in d["decoder"]],
            d["embed_dim"],
        )


def _pooled(extent, times):
    for _ in range(times):
        extent //= 2
    return extent


def _small_conv(preset, input_shape, rate, final_dropout):
    """Two conv blocks (8 channels, 3x3 then 5x5), each pooled 2x2; used by the
    28x28 and 16x16 presets."""
    c, h, w = input_shape
    h2, w2 = _pooled(h, 2), _pooled(w, 2)
    flat = 8 * h2 * w2
    encoder = [
        LayerSpec("Conv", kernel=(3, 3), out_channels=8),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool", factor=(2, 2)),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Conv", kernel=(5, 5), out_channels=8),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool", factor=(2, 2)),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Flatten"),
        LayerSpec("Dense", out_units=config.EMBED_DIM),
        LayerSpec("ReLU"),
    ]
    decoder = [
        LayerSpec("Dense", out_units=flat),
        LayerSpec("ReLU"),
        LayerSpec("Reshape", target=(8, h2, w2)),
        LayerSpec("Upsample", factor=(2, 2), target=(_pooled(h, 1), _pooled(w, 1))),
        LayerSpec("TransConv", kernel=(5, 5), out_channels=8),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Upsample", factor=(2, 2), target=(h, w)),
        LayerSpec("TransConv", kernel=(3, 3), out_channels=c),
        LayerSpec("Sigmoid"),
    ]
    if final_dropout:
        decoder.append(LayerSpec("Dropout", rate=rate))
    return ArchSpec(preset, input_shape, encoder, decoder)


def _large_conv(preset, input_shape, rate, final_dropout):
    """Three conv blocks (32/64/128 channels) with batch norm, pooled after the
    first two; used by the face/signature presets."""
    c, h, w = input_shape
    h2, w2 = _pooled(h, 2), _pooled(w, 2)
    flat = 128 * h2 * w2
    encoder = [
        LayerSpec("Conv", kernel=(4, 4), out_channels=32),
        LayerSpec("BatchNorm"),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("MaxPool", factor=(2, 2)),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Conv", kernel=(3, 3), out_channels=64),
        LayerSpec("BatchNorm"),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool", factor=(2, 2)),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Conv", kernel=(3, 3), out_channels=128),
        LayerSpec("BatchNorm"),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Flatten"),
        LayerSpec("Dense", out_units=config.EMBED_DIM),
        LayerSpec("ReLU"),
    ]
    decoder = [
        LayerSpec("Dense", out_units=flat),
        LayerSpec("ReLU"),
        LayerSpec("Reshape", target=(128, h2, w2)),
        LayerSpec("TransConv", kernel=(3, 3), out_channels=64),
        LayerSpec("BatchNorm"),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Upsample", factor=(2, 2), target=(_pooled(h, 1), _pooled(w, 1))),
        LayerSpec("TransConv", kernel=(3, 3), out_channels=32),
        LayerSpec("BatchNorm"),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Upsample", factor=(2, 2), target=(h, w)),
        LayerSpec("TransConv", kernel=(3, 3), out_channels=c),
        LayerSpec("BatchNorm"),
        LayerSpec("Sigmoid"),
    ]
    if final_dropout:
        decoder.append(LayerSpec("Dropout", rate=rate))
    return ArchSpec(preset, input_shape, encoder, decoder)


def _mlp(preset, input_shape, rate, final_dropout):
    """Fully connected twin: 512-wide hidden layer on each side of the embedding."""
    flat = int(np.prod(input_shape))
    encoder = [
        LayerSpec("Flatten"),
        LayerSpec("Dense", out_units=config.MLP_HIDDEN),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Dense", out_units=config.EMBED_DIM),
        LayerSpec("ReLU"),
    ]
    decoder = [
        LayerSpec("Dense", out_units=config.MLP_HIDDEN),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", rate=rate),
        LayerSpec("Dense", out_units=flat),
        LayerSpec("Sigmoid"),
        LayerSpec("Reshape", target=tuple(input_shape)),
    ]
    if final_dropout:
        decoder.append(LayerSpec("Dropout", rate=rate))
    return ArchSpec(preset, input_shape, encoder, decoder)


def build_arch(preset, variant="seven", input_shape=None, dropout=0.5,
               decoder_final_dropout=False):
    """Resolve (preset, variant) to a concrete ArchSpec.

    The fully-connected variant keeps the preset's input shape but swaps the
    conv stacks for dense ones. ``dropout`` overrides the rate everywhere;
    ``decoder_final_dropout`` appends the literal trailing dropout after the
    decoder's output activation (off by default — it corrupts the
    reconstruction target and exists for fidelity experiments).
    """
    preset = preset.lower()
    if preset == "custom":
        raise ConfigError("preset 'custom' requires an explicit arch description")
    if preset not in DEFAULT_INPUT_SHAPES:
        raise ConfigError(f"unknown preset {preset!r}")
    if input_shape is None:
        input_shape = DEFAULT_INPUT_SHAPES[preset]
    input_shape = tuple(int(v) for v in input_shape)
    if variant == "seven_mlp" or preset == "mlp":
        return _mlp(preset, input_shape, dropout, decoder_final_dropout)
    if preset in ("mnist", "usps"):
        return _small_conv(preset, input_shape, dropout, decoder_final_dropout)
    return _large_conv(preset, input_shape, dropout, decoder_final_dropout)


def tiny(seed_shape=(2, 4, 4), embed_dim=8, dropout=0.0):
    """Miniature conv autoencoder for fast gradient checks: 4x4 inputs,
    2-channel convs, 8-wide embedding."""
    c, h, w = seed_shape
    h2, w2 = h // 2, w // 2
    flat = 2 * h2 * w2
    encoder = [
        LayerSpec("Conv", kernel=(3, 3), out_channels=2),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool", factor=(2, 2)),
        LayerSpec("Flatten"),
        LayerSpec("Dense", out_units=embed_dim),
        LayerSpec("ReLU"),
    ]
    decoder = [
        LayerSpec("Dense", out_units=flat),
        LayerSpec("ReLU"),
        LayerSpec("Reshape", target=(2, h2, w2)),
        LayerSpec("Upsample", factor=(2, 2), target=(h, w)),
        LayerSpec("TransConv", kernel=(3, 3), out_channels=c),
        LayerSpec("Sigmoid"),
    ]
    if dropout > 0:
        encoder.insert(3, LayerSpec("Dropout", rate=dropout))
        decoder.insert(2, LayerSpec("Dropout", rate=dropout))
    return ArchSpec("custom", seed_shape, encoder, decoder, embed_dim)


def arch_from_config(hp, arch_cfg=None):
    """Build the run's ArchSpec from hyperparameters plus optional overrides.

    ``arch_cfg`` may carry ``input_shape`` (c, h, w), ``dropout`` (rate
    override), or a full ``custom`` arch description.
    """
    arch_cfg = arch_cfg or {}
    unknown = set(arch_cfg) - {"input_shape", "dropout", "custom"}
    if unknown:
        raise ConfigError(f"unknown arch config keys: {sorted(unknown)}")
    if arch_cfg.get("custom") is not None:
        return ArchSpec.from_dict(arch_cfg["custom"])
    return build_arch(
        hp.preset,
        variant=hp.variant,
        input_shape=arch_cfg.get("input_shape"),
        dropout=arch_cfg.get("dropout", 0.5),
        decoder_final_dropout=hp.decoder_final_dropout,
    )
