import dataclasses

import numpy as np
import pytest

from avrfn.analysis import block_extent, closed_form_count, count_params, erf_map, gate_param_total
from avrfn.layers import pixel_shuffle
from avrfn.model import (
    VARIANTS,
    ModelSpec,
    build_model,
    forward,
    residual_block,
    residual_group,
    rir_forward,
    upsampler,
)
from avrfn.tensor import Tensor, reduce
from gradcheck import check, rel_err

TINY = dict(groups=1, blocks=1, filters=8, reduction=4)


def zero_all(model):
    for p in model.parameters():
        p.data = np.zeros_like(p.data)


def zero_block(model, prefix):
    for name, p in model.params.items():
        if name.startswith(prefix + "."):
            p.data = np.zeros_like(p.data)


def test_defaults_match_published_configuration():
    spec = ModelSpec()
    assert (spec.variant, spec.groups, spec.blocks, spec.filters, spec.dilation_rates) == ("AVRFN", 3, 6, 64, (1, 2, 3))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(variant="EDSR")
    with pytest.raises(ValueError):
        ModelSpec(scale=5)
    with pytest.raises(ValueError):
        ModelSpec(dilation_rates=(1, 2, 2))
    with pytest.raises(ValueError):
        ModelSpec(dilation_rates=(1, 1, 2))
    with pytest.raises(ValueError):
        ModelSpec(groups=0)
    assert ModelSpec(variant="ddrr").variant == "DDRR"


def test_spec_dict_roundtrip():
    spec = ModelSpec(variant="CRCAN", scale=3, seed=5)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_default_spec_count_matches_closed_form():
    spec = ModelSpec()
    assert build_model(spec).num_parameters() == closed_form_count(spec)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("scale", [2, 3, 4])
def test_counts_match_closed_form(variant, scale):
    spec = ModelSpec(variant=variant, scale=scale, groups=2, blocks=2, filters=16)
    model = build_model(spec)
    assert count_params(model) == closed_form_count(spec) == count_params(spec)


def test_same_seed_bit_identical():
    a = build_model(ModelSpec(**TINY, seed=3)).state_dict()
    b = build_model(ModelSpec(**TINY, seed=3)).state_dict()
    c = build_model(ModelSpec(**TINY, seed=4)).state_dict()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("kernel"))


def test_name_set_is_deterministic_and_unique():
    names = list(build_model(ModelSpec(groups=2, blocks=2, filters=8)).params)
    assert names == list(build_model(ModelSpec(groups=2, blocks=2, filters=8, seed=9)).params)
    assert len(names) == len(set(names))


@pytest.mark.parametrize("variant", VARIANTS)
def test_minimal_model_shape(variant, rng):
    model = build_model(ModelSpec(variant=variant, **TINY))
    out = model(Tensor(rng.standard_normal((1, 12, 12, 1))))
    assert out.shape == (1, 48, 48, 1)


@pytest.mark.parametrize("scale", [2, 3])
def test_end_to_end_shape_other_scales(scale, rng):
    model = build_model(ModelSpec(scale=scale, **TINY))
    assert model(Tensor(rng.standard_normal((2, 5, 7, 1)))).shape == (2, 5 * scale, 7 * scale, 1)


def test_forward_rejects_multichannel():
    model = build_model(ModelSpec(**TINY))
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((1, 4, 4, 3))))


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_block_is_identity(variant, rng):
    model = build_model(ModelSpec(variant=variant, **TINY))
    zero_block(model, "body.g0.b0")
    x = Tensor(rng.standard_normal((2, 6, 6, 8)))
    out = residual_block(x, model, "body.g0.b0")
    assert np.array_equal(out.data, x.data)


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_group_and_body_are_identity(variant, rng):
    model = build_model(ModelSpec(variant=variant, groups=2, blocks=2, filters=8, reduction=4))
    zero_all(model)
    x = Tensor(rng.standard_normal((1, 5, 5, 8)))
    assert np.array_equal(residual_group(x, model, 1).data, x.data)
    assert np.array_equal(rir_forward(x, model).data, x.data)


@pytest.mark.parametrize("variant", VARIANTS)
def test_blocks_preserve_shape(variant, rng):
    model = build_model(ModelSpec(variant=variant, groups=2, blocks=3, filters=8, reduction=4))
    x = Tensor(rng.standard_normal((2, 7, 5, 8)))
    assert residual_block(x, model, "body.g1.b2").shape == x.shape
    assert rir_forward(x, model).shape == x.shape
    with pytest.raises(ValueError):
        residual_block(Tensor(np.zeros((1, 4, 4, 4))), model, "body.g0.b0")


def test_long_skip_matters(rng):
    model = build_model(ModelSpec(**TINY))
    x = Tensor(rng.standard_normal((1, 6, 6, 8)))
    with_skip = rir_forward(x, model).data
    without = rir_forward(x, model, long_skip=False).data
    np.testing.assert_allclose(with_skip - without, x.data, atol=1e-12)
    assert np.abs(with_skip - without).max() > 0.1


@pytest.mark.parametrize("scale,h", [(2, 24), (4, 12)])
def test_upsampler_shapes(scale, h, rng):
    model = build_model(ModelSpec(groups=1, blocks=1, filters=64, scale=scale))
    assert upsampler(Tensor(rng.standard_normal((1, h, h, 64))), model).shape == (1, 48, 48, 64)


def test_x4_upsampler_is_two_x2_stages(rng):
    m4 = build_model(ModelSpec(scale=4, **TINY))
    x = Tensor(rng.standard_normal((1, 5, 6, 8)))
    by_hand = pixel_shuffle(m4.convs["up.1"](pixel_shuffle(m4.convs["up.0"](x), 2)), 2)
    # two independent x2 upsamplers carrying the same parameters
    m2a = build_model(ModelSpec(scale=2, **TINY))
    m2b = build_model(ModelSpec(scale=2, **TINY))
    m2a.convs["up.0"] = m4.convs["up.0"]
    m2b.convs["up.0"] = m4.convs["up.1"]
    composed = upsampler(upsampler(x, m2a), m2b)
    assert np.array_equal(upsampler(x, m4).data, by_hand.data)
    assert np.array_equal(composed.data, by_hand.data)


def test_ddrr_differs_from_avrfn_by_gates():
    for kw in (dict(), dict(groups=2, blocks=3, filters=32, scale=2)):
        a = ModelSpec(variant="AVRFN", **kw)
        d = ModelSpec(variant="DDRR", **kw)
        assert closed_form_count(a) - closed_form_count(d) == gate_param_total(a)
    a = build_model(ModelSpec(variant="AVRFN", **TINY))
    d = build_model(ModelSpec(variant="DDRR", **TINY))
    gates = sum(p.size for n, p in a.params.items() if ".soca." in n)
    assert a.num_parameters() - d.num_parameters() == gates


def test_avrfn_block_gradcheck(rng):
    model = build_model(ModelSpec(filters=8, groups=1, blocks=1, reduction=4, seed=2))
    prefix = "body.g0.b0"
    x = Tensor(rng.standard_normal((1, 6, 6, 8)), requires_grad=True)
    w = rng.standard_normal((1, 6, 6, 8))
    block_params = [p for n, p in model.params.items() if n.startswith(prefix + ".")]
    f = lambda: reduce("sum", residual_block(x, model, prefix) * w)  # noqa: E731
    assert check(f, [x] + block_params, max_entries=12, seed=1) < 1e-3


@pytest.mark.parametrize("variant", ["RRSOCA", "CRCAN", "DDRR"])
def test_other_block_gradchecks(variant, rng):
    model = build_model(ModelSpec(variant=variant, **TINY))
    x = Tensor(rng.standard_normal((1, 6, 6, 8)), requires_grad=True)
    w = rng.standard_normal((1, 6, 6, 8))
    params = [p for n, p in model.params.items() if n.startswith("body.g0.b0.")]
    f = lambda: reduce("sum", residual_block(x, model, "body.g0.b0") * w)  # noqa: E731
    assert check(f, [x] + params, max_entries=10, seed=2) < 1e-3


def full_model_spot_check(model, x, target, count=20, seed=0, eps=1e-5):
    """Analytic vs central-difference gradient at ``count`` random scalar parameters."""
    def loss():
        d = forward(model, x) - target
        return reduce("mean", d * d)

    params = list(model.params.values())
    for p in params:
        p.grad = None
    loss().backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    flat_ids = rng.choice(sizes.sum(), size=count, replace=False)
    bounds = np.cumsum(sizes)
    ana, num = [], []
    for fid in flat_ids:
        k = int(np.searchsorted(bounds, fid, side="right"))
        i = int(fid - (bounds[k - 1] if k else 0))
        p = params[k]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = loss().item()
        flat[i] = orig - eps
        down = loss().item()
        flat[i] = orig
        num.append((up - down) / (2 * eps))
        ana.append(p.grad.reshape(-1)[i])
    return rel_err(np.array(ana), np.array(num))


@pytest.mark.parametrize("variant", VARIANTS)
def test_tiny_full_model_gradient_spot_check(variant, rng):
    model = build_model(ModelSpec(variant=variant, scale=2, **TINY))
    x = Tensor(rng.standard_normal((1, 5, 5, 1)))
    target = Tensor(rng.standard_normal((1, 10, 10, 1)))
    assert full_model_spot_check(model, x, target) < 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_block_erf_within_theoretical_window(seed):
    spec = ModelSpec(**TINY, seed=seed)
    model = build_model(spec)
    ext = block_extent(spec)
    assert ext == 9
    rep = erf_map(lambda t: residual_block(t, model, "body.g0.b0"), (1, 21, 21, 8), (10, 10, 0),
                  theoretical_rf=ext, seed=seed)
    # attention pools globally, so only the thresholded map is local
    ys, xs = np.nonzero(rep.erf_map > rep.tau * rep.erf_map.max())
    half = ext // 2
    assert ys.min() >= 10 - half and ys.max() <= 10 + half
    assert xs.min() >= 10 - half and xs.max() <= 10 + half
    assert rep.erf_area <= ext * ext


def test_ddrr_block_support_is_exactly_local():
    spec = ModelSpec(variant="DDRR", **TINY, seed=1)
    model = build_model(spec)
    rep = erf_map(lambda t: residual_block(t, model, "body.g0.b0"), (1, 21, 21, 8), (10, 10, 0))
    ys, xs = np.nonzero(rep.support)
    assert (ys.min(), ys.max(), xs.min(), xs.max()) == (6, 14, 6, 14)


def test_shared_parameters_allow_concurrent_inference(rng):
    from concurrent.futures import ThreadPoolExecutor

    from avrfn.tensor import no_grad

    model = build_model(ModelSpec(**TINY))
    xs = [Tensor(rng.standard_normal((1, 6, 6, 1))) for _ in range(4)]

    def run(x):
        with no_grad():
            return model(x).data

    serial = [run(x) for x in xs]
    with ThreadPoolExecutor(4) as ex:
        parallel = list(ex.map(run, xs))
    assert all(np.array_equal(a, b) for a, b in zip(serial, parallel))


def test_replace_keeps_spec_frozen():
    spec = ModelSpec(**TINY)
    with pytest.raises(dataclasses.FrozenInstanceError):
        spec.filters = 4
