import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatland.landscape import (Direction, LandscapeSlice, loss_slice_1d, loss_slice_2d, read_slice_csv,
                                sample_direction, sharpness, write_slice_csv, write_slice_svg, zero_direction)
from flatland.models import build_model
from flatland.pipeline import mean_loss
from flatland.regularizers import ShakeDropConfig
from flatland.tensor import Parameter


class Quadratic:
    """loss(theta) = sum(theta**2); a single float64 parameter vector."""

    def __init__(self, theta):
        self.theta = Parameter(np.atleast_1d(np.asarray(theta, dtype=np.float64)), name="theta", dtype=np.float64)

    def named_parameters(self):
        return {"theta": self.theta}


def quad_loss(model, data):
    return float(np.sum(model.theta.data ** 2))


def ones(model):
    return Direction({"theta": np.ones_like(model.theta.data)}, "none")


@pytest.fixture
def model_and_data(tiny_spec):
    model = build_model(tiny_spec, ShakeDropConfig(per_example=True), seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((16, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, 16)
    model(x)  # populate running statistics
    return model, (x, y)


def test_quadratic_closed_form():
    for theta in (0.0, 0.3, -1.7):
        m = Quadratic(theta)
        sl = loss_slice_1d(m, None, ones(m), r=1.0, steps=3, loss_fn=quad_loss)
        np.testing.assert_allclose(sl.values, [(theta - 1) ** 2, theta ** 2, (theta + 1) ** 2], rtol=0, atol=1e-12)


def test_quadratic_2d_closed_form():
    m = Quadratic([0.2, -0.4])
    d1 = Direction({"theta": np.array([1.0, 0.0])}, "none")
    d2 = Direction({"theta": np.array([0.0, 1.0])}, "none")
    sl = loss_slice_2d(m, None, d1, d2, r=0.5, steps=5, loss_fn=quad_loss)
    u = np.linspace(-0.5, 0.5, 5)
    want = (0.2 + u[:, None]) ** 2 + (-0.4 + u[None, :]) ** 2
    np.testing.assert_allclose(sl.values, want, rtol=0, atol=1e-12)


def test_quadratic_sharpness():
    m = Quadratic(0.0)
    assert sharpness(loss_slice_1d(m, None, ones(m), 1.0, 3, loss_fn=quad_loss)) == 1.0


def test_sharpness_constant_and_empty():
    sl = LandscapeSlice([np.linspace(-1, 1, 5)], np.full(5, 2.5), 2.5, 1.0, 5)
    assert sharpness(sl) == 0.0
    with pytest.raises(ValueError):
        sharpness(sl, 0.1)
    with pytest.raises(ValueError):
        sharpness(sl, -1)


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(-2, 2), frac=st.sampled_from([0.5, 1.0]))
def test_sharpness_monotone_under_refinement(theta, frac):
    m = Quadratic(theta)
    coarse = sharpness(loss_slice_1d(m, None, ones(m), 1.0, 5, loss_fn=quad_loss), frac)
    fine = sharpness(loss_slice_1d(m, None, ones(m), 1.0, 41, loss_fn=quad_loss), frac)
    assert fine >= coarse - 1e-12


def test_even_steps_rejected():
    m = Quadratic(0.0)
    with pytest.raises(ValueError):
        loss_slice_1d(m, None, ones(m), 1.0, 4, loss_fn=quad_loss)


def test_non_finite_loss_becomes_inf():
    m = Quadratic(0.0)
    sl = loss_slice_1d(m, None, ones(m), 1.0, 3, loss_fn=lambda mm, d: np.nan if mm.theta.data[0] > 0.5 else 1.0)
    assert sl.values[2] == np.inf and sl.values[1] == 1.0


def test_origin_identity_and_restoration(model_and_data):
    model, data = model_and_data
    before = {k: v.copy() for k, v in model.state_dict().items()}
    direct = mean_loss(model, *data)
    d = sample_direction(model, "filter", np.random.default_rng(1))
    sl = loss_slice_1d(model, data, d, 1.0, 5)
    assert sl.values[2] == direct == sl.base_loss
    d2 = sample_direction(model, "filter", np.random.default_rng(2))
    sl2 = loss_slice_2d(model, data, d, d2, 1.0, 3)
    assert sl2.values[1, 1] == direct and sl2.values.shape == (3, 3)
    for k, v in model.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert model.training


def test_zero_direction_constant(model_and_data):
    model, data = model_and_data
    sl = loss_slice_1d(model, data, zero_direction(model), 1.0, 5)
    assert np.all(sl.values == sl.values[2])


def test_swap_directions_transposes(model_and_data):
    model, data = model_and_data
    d1 = sample_direction(model, "filter", np.random.default_rng(1))
    d2 = sample_direction(model, "filter", np.random.default_rng(2))
    a = loss_slice_2d(model, data, d1, d2, 0.5, 3)
    b = loss_slice_2d(model, data, d2, d1, 0.5, 3)
    np.testing.assert_array_equal(a.values, b.values.T)


def test_filter_normalization(model_and_data):
    model, _ = model_and_data
    params = model.named_parameters()
    params["s1.b1.conv1.weight"].data[0] = 0.0
    d = sample_direction(model, "filter", np.random.default_rng(0))
    for name, p in params.items():
        dv = d.tensors[name]
        if name.endswith(".bias") or ".bn" in name:
            assert not np.any(dv)
            continue
        if p.data.ndim >= 2:
            dn = np.linalg.norm(dv.reshape(len(dv), -1), axis=1)
            pn = np.linalg.norm(p.data.astype(float).reshape(len(dv), -1), axis=1)
            np.testing.assert_allclose(dn, pn, rtol=1e-6, atol=1e-12)
    assert not np.any(d.tensors["s1.b1.conv1.weight"][0])


def test_none_and_global_modes(model_and_data):
    model, _ = model_and_data
    raw = sample_direction(model, "none", np.random.default_rng(3))
    rng = np.random.default_rng(3)
    for name, p in model.named_parameters().items():
        if name.endswith(".bias") or ".bn" in name:
            continue
        np.testing.assert_array_equal(raw.tensors[name], rng.standard_normal(p.shape))
    g = sample_direction(model, "global", np.random.default_rng(3))
    keys = [k for k in g.tensors if not (k.endswith(".bias") or ".bn" in k)]
    dn = np.sqrt(sum(np.sum(g.tensors[k] ** 2) for k in keys))
    pn = np.sqrt(sum(np.sum(model.named_parameters()[k].data.astype(float) ** 2) for k in keys))
    assert dn == pytest.approx(pn, rel=1e-9)
    with pytest.raises(ValueError):
        sample_direction(model, "layer")


def test_determinism(model_and_data):
    model, data = model_and_data
    a = loss_slice_1d(model, data, sample_direction(model, "filter", np.random.default_rng(5)), 1.0, 5)
    b = loss_slice_1d(model, data, sample_direction(model, "filter", np.random.default_rng(5)), 1.0, 5)
    np.testing.assert_array_equal(a.values, b.values)


def test_csv_and_svg(tmp_path):
    m = Quadratic(0.25)
    sl = loss_slice_1d(m, None, ones(m), 1.0, 5, loss_fn=quad_loss, seed=4)
    write_slice_csv(tmp_path / "a.csv", sl)
    back = read_slice_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.values, sl.values)
    assert (back.base_loss, back.r, back.steps, back.mode, back.seed, back.split) == (0.0625, 1.0, 5, "none", 4, "train")
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "t,loss,base_loss,r,steps,normalization,seed,split"
    d2 = Direction({"theta": np.array([0.5])}, "none")
    sl2 = loss_slice_2d(m, None, ones(m), d2, 1.0, 3, loss_fn=quad_loss)
    write_slice_csv(tmp_path / "b.csv", sl2)
    np.testing.assert_array_equal(read_slice_csv(tmp_path / "b.csv").values, sl2.values)
    for name, s in (("a.svg", sl), ("b.svg", sl2)):
        write_slice_svg(tmp_path / name, s)
        text = (tmp_path / name).read_text()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
