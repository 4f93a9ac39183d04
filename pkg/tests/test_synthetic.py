import numpy as np
import pytest

from gatedfm.data_model import InteractionId
from gatedfm.errors import ConfigError, SchemaError
from gatedfm.synthetic import (
    generate_synthetic,
    load_spec,
    parse_planted,
    sample_synthetic_spec,
    save_spec,
    spec_from_text,
    spec_to_text,
)


@pytest.fixture
def spec():
    return sample_synthetic_spec(field_count=5, categories=8, planted=parse_planted("0,1;2,4"), seed=3, presamples=20000)


def test_parse_planted():
    assert parse_planted("0,1; 2,5;") == (InteractionId((0, 1)), InteractionId((2, 5)))
    assert parse_planted("1,2,3")[0].fields == (1, 2, 3)
    with pytest.raises(SchemaError):
        parse_planted("1,1")


def test_spec_shapes(spec):
    assert spec.field_probs.shape == (5, 8)
    np.testing.assert_allclose(spec.field_probs.sum(axis=1), 1.0, atol=1e-12)
    assert spec.interaction_weights[InteractionId((2, 4))].shape == (8, 8)
    assert spec.noise_sigma > 0
    assert spec.schema().cardinalities == (8,) * 5


def test_positive_ratio_is_near_half(spec):
    train, test = generate_synthetic(spec, 4000, 1000)
    assert train.size == 4000 and test.size == 1000
    assert 0.4 < train.positive_ratio() < 0.6


def test_generation_is_deterministic(spec):
    a, _ = generate_synthetic(spec, 300, 10)
    b, _ = generate_synthetic(spec, 300, 10)
    np.testing.assert_array_equal(a.one_hot_matrix(), b.one_hot_matrix())
    np.testing.assert_array_equal(a.labels, b.labels)


def test_spec_file_regenerates_identical_data(spec, tmp_path):
    path = tmp_path / "spec.cfg"
    save_spec(spec, str(path))
    loaded = load_spec(str(path))
    assert loaded.planted == spec.planted
    assert loaded.threshold == spec.threshold
    a, _ = generate_synthetic(spec, 500, 10)
    b, _ = generate_synthetic(loaded, 500, 10)
    np.testing.assert_array_equal(a.one_hot_matrix(), b.one_hot_matrix())
    np.testing.assert_array_equal(a.labels, b.labels)


def test_third_order_planting():
    spec = sample_synthetic_spec(field_count=4, categories=3, planted=parse_planted("0,1,3"), presamples=1000)
    assert spec.interaction_weights[InteractionId((0, 1, 3))].shape == (3, 3, 3)
    again = spec_from_text(spec_to_text(spec))
    np.testing.assert_array_equal(again.interaction_weights[InteractionId((0, 1, 3))],
                                  spec.interaction_weights[InteractionId((0, 1, 3))])


def test_planted_outside_fields_is_rejected():
    with pytest.raises(ConfigError, match="outside"):
        sample_synthetic_spec(field_count=3, categories=4, planted=parse_planted("1,3"), presamples=100)


def test_field_distributions_must_sum_to_one(spec):
    text = spec_to_text(spec).replace("[field_probs]\nf0 = ", "[field_probs]\nf0 = 0.5,")
    with pytest.raises(ConfigError):
        spec_from_text(text)


def test_spec_text_needs_every_section(spec):
    text = spec_to_text(spec).split("[linear]")[0]
    with pytest.raises(ConfigError, match="Malformed"):
        spec_from_text(text)


def test_split_sizes_must_be_positive(spec):
    with pytest.raises(ConfigError):
        generate_synthetic(spec, 0, 10)
