import math

import numpy as np
import pytest
from pydantic import ValidationError

from granular_trainer.models import (
    LossWeights,
    ModelSpec,
    Variant,
    backbone_forward,
    features_and_logits,
    forward,
    init_params,
    total_loss,
)
from shared.errors import ShapeError
from shared.gradcheck import central_difference, relative_error
from shared.tensor_core import Tape, Tensor

CHAINS_234 = np.array([[0, 0, 0], [0, 1, 1], [1, 2, 2], [1, 2, 3], [0, 0, 0]])
WEIGHTS_3 = (1.0, 0.7, 1.3)


@pytest.fixture
def gradcheck_setup(rng):
    """Random ours model with d=6, D=6, K=3, C=(2,3,4) and a batch of 5."""
    spec = ModelSpec(
        variant=Variant.OURS,
        input_dim=6,
        hidden_widths=(5,),
        feature_dim=6,
        level_sizes=(2, 3, 4),
        seed=11,
    )
    params = init_params(spec)
    # Non-zero biases so no unit sits exactly at a ReLU kink.
    params = params.replace(
        {
            name: rng.normal(0.0, 0.1, params[name].shape)
            for name in params
            if params.info[name].is_bias
        }
    )
    return params, rng.standard_normal((5, 6))


def _loss(params, x, stop_gradient=True):
    tape = Tape()
    logits = forward(params, x, tape, stop_gradient=stop_gradient)
    return tape, total_loss(tape, logits, CHAINS_234, WEIGHTS_3)


def _pinned_branch_loss(params, base, x):
    """Total loss with every stop-gradient branch held at `base`'s features."""
    spec = params.spec
    tape = Tape()
    live = tape.split(backbone_forward(params, x, tape), spec.K)
    pinned = np.split(backbone_forward(base, x, Tape()).numpy(), spec.K, axis=1)
    logits = []
    for k in range(spec.K):
        parts = [live[k]] + [Tensor(p) for p in pinned[k + 1 :]]
        inp = parts[0] if len(parts) == 1 else tape.concat(parts)
        weight, bias = params.head(k + 1)
        logits.append(tape.add_bias(tape.matmul(inp, weight), bias))
    return total_loss(tape, logits, CHAINS_234, WEIGHTS_3).item()


def test_gated_gradients_match_finite_differences(gradcheck_setup):
    params, x = gradcheck_setup
    tape, loss = _loss(params, x)
    grads = tape.backward(loss)
    for name in params:
        numeric = central_difference(
            lambda v, name=name: _pinned_branch_loss(
                params.replace({name: v}), params, x
            ),
            params[name].numpy(),
        )
        assert relative_error(grads[params[name]], numeric) <= 1e-5, name


def test_ungated_gradients_match_finite_differences(gradcheck_setup):
    params, x = gradcheck_setup
    tape, loss = _loss(params, x, stop_gradient=False)
    grads = tape.backward(loss)
    for name in params:
        numeric = central_difference(
            lambda v, name=name: _loss(params.replace({name: v}), x, False)[1].item(),
            params[name].numpy(),
        )
        assert relative_error(grads[params[name]], numeric) <= 1e-5, name


def test_coarse_loss_leaves_finer_segments_untouched(gradcheck_setup):
    params, x = gradcheck_setup
    tape = Tape()
    (f,), logits = features_and_logits(params, x, tape)
    coarse_loss = tape.softmax_cross_entropy(logits[0], CHAINS_234[:, 0])
    grads = tape.backward(coarse_loss)

    width = params.spec.segment_width
    assert np.all(grads[f][:, width:] == 0.0)
    assert np.any(grads[f][:, :width] != 0.0)
    last_weight = params["backbone0.layer1.weight"]
    assert np.all(grads[last_weight][:, width:] == 0.0)

    ungated_tape = Tape()
    ungated = forward(params, x, ungated_tape, stop_gradient=False)
    np.testing.assert_array_equal(logits[0].data, ungated[0].data)


def test_ungated_coarse_loss_reaches_finer_segments(gradcheck_setup):
    params, x = gradcheck_setup
    tape = Tape()
    (f,), logits = features_and_logits(params, x, tape, stop_gradient=False)
    grads = tape.backward(tape.softmax_cross_entropy(logits[0], CHAINS_234[:, 0]))
    assert np.any(grads[f][:, params.spec.segment_width :] != 0.0)


def test_backbone_gradient_is_the_sum_of_level_gradients(gradcheck_setup):
    params, x = gradcheck_setup
    tape, loss = _loss(params, x)
    total = tape.backward(loss)

    summed = {name: np.zeros(params[name].shape) for name in params}
    for k, weight in enumerate(WEIGHTS_3):
        level_tape = Tape()
        logits = forward(params, x, level_tape)
        term = level_tape.softmax_cross_entropy(logits[k], CHAINS_234[:, k])
        grads = level_tape.backward(level_tape.weighted_sum([term], (weight,)))
        for name in params:
            summed[name] += grads[params[name]]

    for name in params:
        if name.startswith("backbone"):
            assert np.any(summed[name] != 0.0), name
        np.testing.assert_allclose(
            total[params[name]], summed[name], rtol=1e-12, atol=1e-15
        )


def test_heads_learn_weights_on_gated_segments(gradcheck_setup):
    params, x = gradcheck_setup
    width = params.spec.segment_width
    for k in range(1, params.spec.K):
        tape = Tape()
        logits = forward(params, x, tape)
        grads = tape.backward(
            tape.softmax_cross_entropy(logits[k - 1], CHAINS_234[:, k - 1])
        )
        weight, _ = params.head(k)
        assert weight.shape[0] == (params.spec.K - k + 1) * width
        assert np.any(grads[weight][width:] != 0.0), k


@pytest.mark.parametrize("variant", list(Variant), ids=lambda v: v.value)
def test_large_inputs_keep_logits_finite(make_spec, rng, variant):
    params = init_params(make_spec(variant))
    x = rng.uniform(-1.0e3, 1.0e3, size=(16, 6))
    x[0] = 1.0e3
    x[1] = -1.0e3
    chains = np.tile([[0, 0], [1, 3]], (8, 1))
    tape = Tape(check_finite=True)
    logits = forward(params, x, tape)
    assert all(np.all(np.isfinite(y.numpy())) for y in logits)
    assert math.isfinite(total_loss(tape, logits, chains, (1.0, 1.0)).item())


def test_single_level_variants_coincide(rng):
    x = rng.standard_normal((7, 4))
    labels = np.array([[0], [1], [2], [0], [1], [2], [0]])
    outputs = {}
    for variant in Variant:
        spec = ModelSpec(
            variant=variant,
            input_dim=4,
            hidden_widths=(6,),
            feature_dim=8,
            level_sizes=(3,),
            seed=5,
        )
        params = init_params(spec)
        tape = Tape()
        logits = forward(params, x, tape)
        loss = total_loss(tape, logits, labels, (1.0,))
        outputs[variant] = (logits[0].numpy(), loss.item())

    reference_logits, reference_loss = outputs[Variant.VANILLA_SINGLE]
    for variant in (Variant.OURS_SINGLE, Variant.OURS, Variant.VANILLA_MULTI):
        np.testing.assert_array_equal(outputs[variant][0], reference_logits)
        assert outputs[variant][1] == reference_loss


def test_default_feature_width():
    assert ModelSpec(input_dim=3, level_sizes=(2, 4)).feature_dim == 600
    assert ModelSpec(input_dim=3, level_sizes=(4,)).feature_dim == 512


def test_split_variants_need_divisible_width():
    with pytest.raises(ValidationError, match="divisible"):
        ModelSpec(input_dim=3, feature_dim=10, level_sizes=(2, 3, 4))
    # Full-feature heads do not split f.
    ModelSpec(
        variant="vanilla_single", input_dim=3, feature_dim=10, level_sizes=(2, 3, 4)
    )


def test_spec_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        ModelSpec(input_dim=3, level_sizes=())
    with pytest.raises(ValidationError):
        ModelSpec(input_dim=3, level_sizes=(2, 0))
    with pytest.raises(ValidationError):
        ModelSpec(input_dim=3, feature_dim=4, identity_backbone=True, level_sizes=(2,))
    with pytest.raises(ValidationError):
        ModelSpec(input_dim=3, level_sizes=(2,), dropout=0.5)


def test_head_widths_per_variant(make_spec):
    for variant, widths in [
        (Variant.VANILLA_SINGLE, [8, 8]),
        (Variant.VANILLA_MULTI, [8, 8]),
        (Variant.OURS_SINGLE, [4, 4]),
        (Variant.OURS, [8, 4]),
    ]:
        params = init_params(make_spec(variant))
        assert [params.head(k)[0].shape[0] for k in (1, 2)] == widths


def test_parameter_names_and_tags(make_spec):
    params = init_params(make_spec(Variant.VANILLA_MULTI))
    assert params.names() == [
        "backbone0.layer0.weight",
        "backbone0.layer0.bias",
        "backbone0.layer1.weight",
        "backbone0.layer1.bias",
        "backbone1.layer0.weight",
        "backbone1.layer0.bias",
        "backbone1.layer1.weight",
        "backbone1.layer1.bias",
        "head1.weight",
        "head1.bias",
        "head2.weight",
        "head2.bias",
    ]
    assert params.info["head2.bias"].kind == "head"
    assert params.info["head2.bias"].is_bias
    assert params.info["backbone1.layer0.weight"].backbone == 1


def test_init_is_glorot_and_deterministic(make_spec):
    spec = make_spec()
    first, second = init_params(spec), init_params(spec)
    for name in first:
        np.testing.assert_array_equal(first[name].data, second[name].data)
    weight = first["backbone0.layer0.weight"]
    assert np.all(np.abs(weight.data) <= math.sqrt(6.0 / (6 + 8)))
    assert np.all(first["head1.bias"].data == 0.0)


def test_identity_backbone_feeds_inputs_to_heads(rng):
    spec = ModelSpec(input_dim=4, identity_backbone=True, level_sizes=(2, 4))
    params = init_params(spec)
    assert spec.feature_dim == 4
    assert params.names() == [
        "head1.weight",
        "head1.bias",
        "head2.weight",
        "head2.bias",
    ]
    x = rng.standard_normal((3, 4))
    (f,), _ = features_and_logits(params, x, Tape())
    np.testing.assert_array_equal(f.data, x)


def test_forward_rejects_wrong_input_width(make_spec):
    params = init_params(make_spec())
    with pytest.raises(ShapeError, match="input_dim"):
        forward(params, np.ones((2, 5)), Tape())


def test_total_loss_weights_levels(make_spec, rng):
    params = init_params(make_spec())
    x = rng.standard_normal((4, 6))
    chains = np.array([[0, 0], [0, 1], [1, 2], [1, 3]])
    tape = Tape()
    logits = forward(params, x, tape)
    per_level = [
        tape.softmax_cross_entropy(y, chains[:, k]).item()
        for k, y in enumerate(logits)
    ]
    loss = total_loss(tape, logits, chains, LossWeights(values=(2.0, 0.5)))
    assert loss.item() == pytest.approx(2.0 * per_level[0] + 0.5 * per_level[1])


def test_total_loss_shape_checks(make_spec):
    params = init_params(make_spec())
    tape = Tape()
    logits = forward(params, np.zeros((2, 6)), tape)
    with pytest.raises(ShapeError):
        total_loss(tape, logits, np.zeros((2, 2), dtype=int), (1.0,))
    with pytest.raises(ShapeError):
        total_loss(tape, logits, np.zeros((2, 3), dtype=int), (1.0, 1.0))


@pytest.mark.parametrize("values", [(), (-1.0, 1.0), (0.0, 0.0), (float("nan"), 1.0)])
def test_loss_weights_validation(values):
    with pytest.raises(ValidationError):
        LossWeights(values=values)


def test_replace_checks_names_and_shapes(make_spec):
    params = init_params(make_spec())
    with pytest.raises(KeyError):
        params.replace({"head9.weight": np.zeros(1)})
    with pytest.raises(ShapeError):
        params.replace({"head1.bias": np.zeros(7)})
    updated = params.replace({"head1.bias": np.ones(2)})
    assert np.all(updated["head1.bias"].data == 1.0)
    assert np.all(params["head1.bias"].data == 0.0)
