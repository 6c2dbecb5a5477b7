import pytest

from tripletad.synthetic import DefectSpec, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Small two-class synthetic dataset shared by the unit tests."""
    root = tmp_path_factory.mktemp("tinyds") / "dataset"
    generate_synthetic_dataset(
        root, seed=7, n_classes=2, images_per_class=6, image_size=128,
        n_test_good=3, defect_spec=DefectSpec(images_per_type=3))
    return root
