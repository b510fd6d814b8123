"""Finite-difference verification of every hand-written backward pass.

Each layer's input gradient and parameter gradients are compared against
central differences of its own forward pass (relative error < 1e-4 at
eps = 1e-5, float64). Inputs are re-drawn until the forward pass sits at
least KINK_MARGIN away from ReLU kinks and max-pool ties, so the numeric
derivative is taken where the function is smooth.

The module ends with end-to-end checks: the full twin-branch training
gradient (distance head + reconstruction + regularization) against finite
differences of the scalar total loss.

run_all_layer_checks / run_end_to_end_checks are also invoked by the
acceptance suite.
"""

import numpy as np
import pytest

from seven import HyperParams, PairBatch, SevenModel, tiny
from seven.layers import (
    TRAIN,
    BatchNorm,
    Conv,
    Dense,
    Dropout,
    Flatten,
    MaxPool,
    ReLU,
    Reshape,
    Sigmoid,
    Tanh,
    TransConv,
    Upsample,
    run_forward,
)
from fdcheck import (
    KINK_MARGIN,
    TOL,
    check_layer_input_grad,
    check_layer_param_grads,
    max_rel_err,
    pool_gap,
    stack_margin,
)

MAX_REDRAWS = 60


def _margin(layer, x):
    """Smoothness margin of x for this layer (inf where no kink exists)."""
    if isinstance(layer, ReLU):
        return float(np.min(np.abs(x)))
    if isinstance(layer, MaxPool):
        return pool_gap(x, layer.fh, layer.fw)
    return np.inf


def _draw(rng, shape, layer):
    for _ in range(MAX_REDRAWS):
        x = rng.normal(size=shape)
        if _margin(layer, x) >= KINK_MARGIN:
            return x
    raise AssertionError(f"no input clear of kinks after {MAX_REDRAWS} draws for {layer.kind}")


def _make(name, rng):
    """Build one named layer case: (layer, input shape, rng_factory or None)."""
    if name == "conv3":
        return Conv(3, 4, (3, 3)), (2, 3, 5, 6), None
    if name == "conv5":
        return Conv(2, 3, (5, 5)), (2, 2, 7, 7), None
    if name == "conv4_even":
        return Conv(1, 2, (4, 4)), (2, 1, 6, 6), None
    if name == "conv1x1":
        return Conv(3, 2, (1, 1)), (2, 3, 4, 4), None
    if name == "transconv3":
        return TransConv(3, 2, (3, 3)), (2, 3, 5, 5), None
    if name == "transconv5":
        return TransConv(2, 3, (5, 5)), (2, 2, 6, 6), None
    if name == "transconv4_even":
        return TransConv(2, 2, (4, 4)), (2, 2, 5, 5), None
    if name == "dense":
        return Dense(7, 4), (3, 7), None
    if name == "relu":
        return ReLU(), (3, 8), None
    if name == "sigmoid":
        return Sigmoid(), (3, 8), None
    if name == "tanh":
        return Tanh(), (3, 8), None
    if name == "bn4d":
        return BatchNorm(3), (4, 3, 4, 4), None
    if name == "bn2d":
        return BatchNorm(5), (6, 5), None
    if name == "maxpool":
        return MaxPool((2, 2)), (2, 2, 6, 6), None
    if name == "maxpool_remainder":
        return MaxPool((2, 2)), (2, 1, 5, 7), None
    if name == "upsample":
        return Upsample((2, 2)), (2, 2, 3, 3), None
    if name == "upsample_padded":
        return Upsample((2, 2), target=(7, 9)), (2, 2, 3, 4), None
    if name == "flatten":
        return Flatten(), (2, 3, 4, 4), None
    if name == "reshape":
        return Reshape((2, 8)), (3, 16), None
    if name == "dropout":
        seed = int(rng.integers(1 << 30))
        return Dropout(0.4), (4, 10), lambda: np.random.default_rng(seed)
    raise KeyError(name)


LAYER_CASES = (
    "conv3", "conv5", "conv4_even", "conv1x1",
    "transconv3", "transconv5", "transconv4_even",
    "dense", "relu", "sigmoid", "tanh",
    "bn4d", "bn2d",
    "maxpool", "maxpool_remainder",
    "upsample", "upsample_padded",
    "flatten", "reshape", "dropout",
)


def run_layer_check(name, seed):
    """FD-check one layer case; returns (input_err, param_err)."""
    rng = np.random.default_rng(seed)
    layer, shape, rng_factory = _make(name, rng)
    layer.init_params(rng)
    x = _draw(rng, shape, layer)
    in_err = check_layer_input_grad(layer, x, TRAIN, rng_factory)
    param_err = 0.0
    if layer.params:
        param_err = check_layer_param_grads(layer, x, TRAIN, rng_factory)
    return in_err, param_err


def run_all_layer_checks(seed=7):
    """Every layer case once; returns {case: (input_err, param_err)}."""
    return {name: run_layer_check(name, seed + i) for i, name in enumerate(LAYER_CASES)}


@pytest.mark.parametrize("name", LAYER_CASES)
def test_layer_gradients(name):
    for trial, seed in enumerate((101, 523)):  # two independent draws per layer
        in_err, param_err = run_layer_check(name, seed + hash(name) % 1000)
        assert in_err < TOL, f"{name} input grad rel err {in_err:.3e} (trial {trial})"
        assert param_err < TOL, f"{name} param grad rel err {param_err:.3e} (trial {trial})"


def test_conv_gradients_many_shapes():
    # Sweep odd/even kernels against odd/even extents: padding asymmetry on
    # even kernels is where an indexing slip would hide.
    rng = np.random.default_rng(77)
    for kernel in ((1, 3), (2, 2), (3, 2), (3, 3), (4, 4), (5, 5)):
        for h, w in ((4, 4), (5, 7)):
            conv = Conv(2, 2, kernel)
            conv.init_params(rng)
            x = rng.normal(size=(2, 2, h, w))
            assert check_layer_input_grad(conv, x) < TOL, (kernel, h, w)
            assert check_layer_param_grads(conv, x) < TOL, (kernel, h, w)


def test_transconv_gradients_many_shapes():
    rng = np.random.default_rng(78)
    for kernel in ((2, 2), (3, 3), (4, 3), (5, 5)):
        for h, w in ((4, 4), (5, 6)):
            tc = TransConv(2, 2, kernel)
            tc.init_params(rng)
            x = rng.normal(size=(2, 2, h, w))
            assert check_layer_input_grad(tc, x) < TOL, (kernel, h, w)
            assert check_layer_param_grads(tc, x) < TOL, (kernel, h, w)


def test_batchnorm_eval_mode_gradient():
    # Eval mode differentiates through frozen running stats: a plain affine map.
    rng = np.random.default_rng(79)
    bn = BatchNorm(3)
    bn.init_params(rng)
    bn.buffers["running_mean"][:] = rng.normal(size=3)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2.0, size=3)
    x = rng.normal(size=(4, 3, 3, 3))
    assert check_layer_input_grad(bn, x, mode="eval") < TOL
    assert check_layer_param_grads(bn, x, mode="eval") < TOL


def test_dropout_gradient_multiple_rates():
    for i, rate in enumerate((0.1, 0.5, 0.8)):
        layer = Dropout(rate)
        x = np.random.default_rng(200 + i).normal(size=(4, 12))
        factory = lambda: np.random.default_rng(900 + i)
        assert check_layer_input_grad(layer, x, TRAIN, factory) < TOL, rate


# ------------------------------------------------------------ end to end


def _end_to_end_err(rel, seed, variant="seven", alpha=0.7, beta=1e-3, reg_norm="squared"):
    """Worst FD error over all trainable parameters of the tiny twin model,
    or None if the drawn batch sits too close to a kink."""
    hp = HyperParams(preset="mnist", variant=variant, alpha=alpha, beta=beta,
                     reg_norm=reg_norm, epochs=1, seed=seed)
    model = SevenModel(tiny(), hp)
    rng = np.random.default_rng(seed + 1000)
    b = len(rel)
    batch = PairBatch(rng.uniform(0.05, 0.95, (b, 2, 4, 4)),
                      rng.uniform(0.05, 0.95, (b, 2, 4, 4)), rel)
    margin = min(stack_margin(model.encoder, batch.x1.astype(np.float64), TRAIN),
                 stack_margin(model.encoder, batch.x2.astype(np.float64), TRAIN))
    if margin < KINK_MARGIN:
        return None
    # the distance norm has a kink at d=0 (a fully-dead embedding also parks
    # the decoder's zero-init biases exactly on their ReLU kinks), and the
    # decoder stack has kinks of its own: screen both before trusting FD
    e1, _ = run_forward(model.encoder, batch.x1.astype(np.float64), TRAIN)
    e2, _ = run_forward(model.encoder, batch.x2.astype(np.float64), TRAIN)
    if model.distance(e1, e2).min() < KINK_MARGIN:
        return None
    if model.generative_active:
        dec_margin = min(stack_margin(model.decoder, e1, TRAIN),
                         stack_margin(model.decoder, e2, TRAIN))
        if dec_margin < KINK_MARGIN:
            return None
    for g in model.named_grads().values():
        g[...] = 0
    model.forward_backward(batch)
    analytic = {k: v.copy() for k, v in model.named_grads(trainable_only=True).items()}
    eps = 1e-5
    worst = 0.0
    for name, p in model.named_params(trainable_only=True).items():
        flat = p.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = model.total_loss(batch, mode=TRAIN).total
            flat[i] = keep - eps
            lo = model.total_loss(batch, mode=TRAIN).total
            flat[i] = keep
            numeric[i] = (hi - lo) / (2 * eps)
        worst = max(worst, max_rel_err(analytic[name].reshape(-1), numeric))
    return worst


def run_end_to_end_checks(base_seed=0):
    """FD-check the whole training gradient per variant; returns {case: err}."""
    cases = {
        "seven/labeled": ([1, -1, 1, -1], "seven", "squared"),
        "seven/unlabeled": ([0, 0, 0, 0], "seven", "squared"),
        "seven/mixed_plain_reg": ([1, -1, 0, 1], "seven", "plain"),
        "disseven/labeled": ([1, -1, 1, -1], "disseven", "squared"),
        "genseven/labeled": ([1, -1, 1, -1], "genseven", "squared"),
    }
    out = {}
    for case, (rel, variant, reg_norm) in cases.items():
        err = None
        for seed in range(200):
            err = _end_to_end_err(rel, base_seed + seed, variant=variant,
                                  reg_norm=reg_norm)
            if err is not None:
                break
        assert err is not None, f"{case}: no batch clear of kinks in 200 seeds"
        out[case] = err
    return out


def test_end_to_end_training_gradient():
    for case, err in run_end_to_end_checks().items():
        assert err < TOL, f"{case}: rel err {err:.3e}"
