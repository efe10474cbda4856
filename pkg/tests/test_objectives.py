"""Tests for objectives: exact gradients, batch streams, parameter groups."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdet.objectives import (
    Batch,
    NonFiniteParameterError,
    ObjectiveSpec,
    ParamGroupSet,
    build_objective,
    default_group_names,
    finite_diff_grad,
    load_params,
    sample_batch,
    save_params,
)

SPECS = {
    "quadratic": ObjectiveSpec(kind="quadratic", dim=12, noise_scale=0.3),
    "rosenbrock": ObjectiveSpec(kind="rosenbrock", dim=6),
    "synthetic_mlp": ObjectiveSpec(kind="synthetic_mlp", layer_sizes=(4, 8, 2),
                                   dataset_seed=3, n_samples=64, batch_size=8),
    "logistic": ObjectiveSpec(kind="logistic", dim=10, dataset_seed=5,
                              n_samples=64, batch_size=8, init_scale=0.5),
}


def rel_err(approx: ParamGroupSet, exact: ParamGroupSet) -> float:
    a, e = approx.flatten(), exact.flatten()
    return float(np.linalg.norm(a - e) / max(np.linalg.norm(e), 1e-12))


# ---------------------------------------------------------------------------
# gradient oracle


def test_finite_diff_matches_hand_value_on_square():
    # f(theta) = theta^2 (spectrum [2.0]); gradient at theta=3 is 6.
    obj = build_objective(ObjectiveSpec(kind="quadratic", dim=1, spectrum=(2.0,),
                                        group_count=1))
    params = ParamGroupSet([("theta", np.array([3.0]))])
    batch = sample_batch(0, 0, 1)
    loss, grad = obj.loss_and_grad(params, batch)
    assert loss == pytest.approx(9.0, abs=0)
    assert grad["theta"][0] == pytest.approx(6.0, abs=0)
    fd = finite_diff_grad(obj, params, batch, eps=1e-3)
    assert fd["theta"][0] == pytest.approx(6.0, abs=1e-6)


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_analytic_gradient_matches_finite_difference(kind):
    obj = build_objective(SPECS[kind])
    rng = np.random.default_rng(42)
    for trial in range(8):
        params = obj.init_params(global_seed=trial)
        flat = params.flatten() + rng.standard_normal(params.total_dim) * 0.5
        params = params.with_flat(flat)
        batch = sample_batch(7, rank=trial % 3, step=trial + 1)
        _, grad = obj.loss_and_grad(params, batch)
        fd = finite_diff_grad(obj, params, batch)
        assert rel_err(fd, grad) < 1e-4, f"{kind} trial {trial}"


def test_quadratic_noise_is_part_of_the_batch_loss():
    # The same batch must give consistent loss and gradient, noise included.
    obj = build_objective(ObjectiveSpec(kind="quadratic", dim=6, noise_scale=1.5))
    params = obj.init_params(0)
    batch = sample_batch(11, 2, 9)
    _, grad = obj.loss_and_grad(params, batch)
    fd = finite_diff_grad(obj, params, batch)
    assert rel_err(fd, grad) < 1e-6

    # Gradient noise is additive: grad - spectrum*theta equals the batch draw.
    clean = build_objective(ObjectiveSpec(kind="quadratic", dim=6, noise_scale=0.0))
    _, g0 = clean.loss_and_grad(params, batch)
    noise = grad.flatten() - g0.flatten()
    redraw = batch.rng().standard_normal(6) * 1.5
    np.testing.assert_allclose(noise, redraw, rtol=0, atol=1e-15)


def test_rosenbrock_optimum_at_ones():
    obj = build_objective(SPECS["rosenbrock"])
    params = obj.init_params(0).with_flat(np.ones(6))
    loss, grad = obj.loss_and_grad(params, sample_batch(0, 0, 1))
    assert loss == 0.0
    np.testing.assert_array_equal(grad.flatten(), np.zeros(6))


def test_quadratic_descent_stability_boundary():
    # Fixed-step descent on the noise-free quadratic: stable just under
    # 2/max(spectrum), divergent just above it.
    spec = ObjectiveSpec(kind="quadratic", dim=4, spectrum=(0.5, 1.0, 2.0, 4.0))
    obj = build_objective(spec)
    batch = sample_batch(0, 0, 1)

    def final_loss(step_size):
        params = obj.init_params(3)
        first = obj.loss_and_grad(params, batch)[0]
        for _ in range(400):
            _, grad = obj.loss_and_grad(params, batch)
            params = params.with_flat(params.flatten() - step_size * grad.flatten())
        return first, obj.loss_and_grad(params, batch)[0]

    threshold = 2.0 / 4.0
    first, stable = final_loss(0.95 * threshold)
    assert stable < first * 1e-3
    first, unstable = final_loss(1.05 * threshold)
    assert unstable > first * 10


# ---------------------------------------------------------------------------
# batch streams


def test_batches_are_pure_functions_of_identity():
    a = sample_batch(5, 1, 10).rng().standard_normal(8)
    b = sample_batch(5, 1, 10).rng().standard_normal(8)
    np.testing.assert_array_equal(a, b)


def test_batches_differ_across_ranks_and_steps():
    base = sample_batch(5, 0, 10).rng().standard_normal(8)
    other_rank = sample_batch(5, 1, 10).rng().standard_normal(8)
    other_step = sample_batch(5, 0, 11).rng().standard_normal(8)
    assert not np.array_equal(base, other_rank)
    assert not np.array_equal(base, other_step)


def test_sample_batch_validates_arguments():
    with pytest.raises(ValueError, match="step"):
        sample_batch(0, 0, 0)
    with pytest.raises(ValueError, match="rank"):
        sample_batch(0, -1, 1)


def test_logistic_epoch_covers_dataset_without_repetition():
    obj = build_objective(SPECS["logistic"])
    per_epoch = obj.n_samples // obj.batch_size
    for epoch in range(2):
        seen = []
        for k in range(per_epoch):
            step = epoch * per_epoch + k + 1
            seen.extend(obj.batch_indices(sample_batch(9, 1, step)))
        assert sorted(seen) == list(range(obj.n_samples)), f"epoch {epoch}"


def test_logistic_epoch_order_differs_across_ranks_and_epochs():
    obj = build_objective(SPECS["logistic"])
    per_epoch = obj.n_samples // obj.batch_size
    first = list(obj.batch_indices(sample_batch(9, 0, 1)))
    other_rank = list(obj.batch_indices(sample_batch(9, 1, 1)))
    next_epoch = list(obj.batch_indices(sample_batch(9, 0, per_epoch + 1)))
    assert first != other_rank
    assert first != next_epoch


# ---------------------------------------------------------------------------
# parameter groups


def test_default_group_names():
    assert default_group_names(2) == ("embedding", "transformer")
    assert default_group_names(4) == ("embedding", "no_decay", "non_embedding", "transformer")
    with pytest.raises(ValueError, match="group_count"):
        default_group_names(3)


def test_four_group_split_on_quadratic():
    obj = build_objective(ObjectiveSpec(kind="quadratic", dim=10, group_count=4))
    assert obj.group_sizes == (
        ("embedding", 3), ("no_decay", 3), ("non_embedding", 2), ("transformer", 2)
    )
    params = obj.init_params(0)
    assert params.total_dim == 10


def test_mlp_groups_split_first_layer_from_rest():
    obj = build_objective(SPECS["synthetic_mlp"])
    # layers (4, 8, 2): first layer 4*8+8 = 40, rest 8*2+2 = 18.
    assert obj.group_sizes == (("embedding", 40), ("transformer", 18))


def test_non_finite_parameters_raise_with_group_name():
    obj = build_objective(SPECS["quadratic"])
    params = obj.init_params(0)
    params["transformer"][0] = np.nan
    with pytest.raises(NonFiniteParameterError, match="transformer") as err:
        obj.loss_and_grad(params, sample_batch(0, 0, 1))
    assert err.value.group == "transformer"
    assert isinstance(err.value, OverflowError)


def test_param_group_set_roundtrips():
    params = ParamGroupSet([
        ("embedding", np.array([1.0, -2.5, 3.25])),
        ("transformer", np.array([4.0, 5.0])),
    ])
    assert params.total_dim == 5
    flat = params.flatten()
    rebuilt = params.with_flat(flat)
    assert rebuilt == params
    assert params.global_norm() == pytest.approx(np.linalg.norm(flat))
    # with_flat copies: mutating the rebuilt set leaves the source intact.
    rebuilt["embedding"][0] = 99.0
    assert params["embedding"][0] == 1.0


def test_param_group_set_rejects_bad_shapes():
    with pytest.raises(ValueError, match="flat"):
        ParamGroupSet([("w", np.ones((2, 2)))])
    params = ParamGroupSet([("w", np.ones(3))])
    with pytest.raises(ValueError, match="size"):
        params["w"] = np.ones(4)
    with pytest.raises(KeyError):
        params["missing"] = np.ones(3)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = ParamGroupSet([
        ("embedding", rng.standard_normal(17) * 1e-7),
        ("transformer", rng.standard_normal(23) * 1e9),
    ])
    path = tmp_path / "ckpt.txt"
    save_params(path, params)
    loaded = load_params(path)
    assert loaded == params
    assert loaded.sizes() == params.sizes()


def test_unknown_objective_kind_rejected():
    with pytest.raises(ValueError, match="unknown objective kind"):
        build_objective(ObjectiveSpec(kind="conv_net"))


@settings(max_examples=25, deadline=None)
@given(
    dim=st.integers(min_value=2, max_value=9),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
    scale=st.floats(min_value=0.1, max_value=3.0),
)
def test_gradient_check_property_random_quadratics(dim, seed, scale):
    rng = np.random.default_rng(seed)
    spectrum = tuple(rng.uniform(0.1, 5.0, dim))
    obj = build_objective(ObjectiveSpec(kind="quadratic", dim=dim, spectrum=spectrum,
                                        noise_scale=0.2))
    params = obj.init_params(seed).with_flat(rng.standard_normal(dim) * scale)
    batch = sample_batch(seed, 0, 1)
    _, grad = obj.loss_and_grad(params, batch)
    fd = finite_diff_grad(obj, params, batch)
    assert rel_err(fd, grad) < 1e-5
