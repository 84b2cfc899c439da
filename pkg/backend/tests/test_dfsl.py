import numpy as np
import pytest

from drift_lab.core.dfsl import MAGIC, load_scalar, load_vector, read_dfsl, save_scalar, save_vector, write_dfsl
from drift_lab.core.errors import ShapeError, ValidationError
from drift_lab.core.grid import GridSpec, ScalarField, VectorField, derivative, displacement_from, fourier_mode
from drift_lab.core.tables import read_config_hash, read_table, write_table


def test_grid_rejects_bad_dimensions():
    with pytest.raises(ValidationError):
        GridSpec(n=4, points_per_axis=32, box_length=8.0)
    with pytest.raises(ValidationError):
        GridSpec(n=2, points_per_axis=33, box_length=8.0)
    with pytest.raises(ValidationError):
        GridSpec(n=2, points_per_axis=32, box_length=0.0)


def test_spectral_derivative_of_fourier_mode(grid2):
    u = fourier_mode(grid2, (2, 0)).values
    k = 2.0 * np.pi * 2 / grid2.box_length
    expected = -k * np.sin(k * grid2.coords[0])
    np.testing.assert_allclose(derivative(u, grid2, 0), expected, atol=1e-11)
    np.testing.assert_allclose(derivative(u, grid2, 1), 0.0, atol=1e-11)


def test_displacement_uses_minimum_image(grid2):
    d = displacement_from(grid2, (0.0, 0.0))
    assert d.min() >= -grid2.box_length / 2
    assert d.max() < grid2.box_length / 2


def test_scalar_file_keeps_grid_and_samples(tmp_path, grid2, rng):
    f = ScalarField(grid2, rng.standard_normal(grid2.shape))
    path = save_scalar(tmp_path / "u.dfsl", f)
    loaded = load_scalar(path)
    assert loaded.grid == grid2
    np.testing.assert_array_equal(loaded.values, f.values)


def test_vector_file_has_n_components(tmp_path, grid3, rng):
    b = VectorField(grid3, rng.standard_normal((3,) + grid3.shape))
    loaded = load_vector(save_vector(tmp_path / "b.dfsl", b))
    assert loaded.components.shape == (3,) + grid3.shape
    assert not loaded.div_free_certified
    with pytest.raises(ShapeError):
        load_scalar(tmp_path / "b.dfsl")


def test_header_layout(tmp_path, grid2):
    path = write_dfsl(tmp_path / "x.dfsl", grid2, np.zeros(grid2.shape))
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert len(raw) == 4 + 3 * 4 + 8 + 8 * 32 * 32


def test_bad_magic_is_rejected(tmp_path, grid2):
    path = write_dfsl(tmp_path / "x.dfsl", grid2, np.zeros(grid2.shape))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="magic"):
        read_dfsl(path)


def test_truncated_payload_is_rejected(tmp_path, grid2):
    path = write_dfsl(tmp_path / "x.dfsl", grid2, np.zeros(grid2.shape))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ShapeError):
        read_dfsl(path)


def test_wrong_shape_cannot_be_written(tmp_path, grid2):
    with pytest.raises(ShapeError):
        write_dfsl(tmp_path / "x.dfsl", grid2, np.zeros((16, 16)))


def test_table_header_records_config_hash(tmp_path):
    import pandas as pd

    path = write_table(pd.DataFrame({"a": [1.0, 2.5], "b": ["x", "y"]}), tmp_path / "t.csv", "abc123")
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert first == "# config_hash=abc123"
    assert read_config_hash(path) == "abc123"
    table = read_table(path)
    assert list(table.columns) == ["a", "b"]
    assert table["a"].tolist() == [1.0, 2.5]
