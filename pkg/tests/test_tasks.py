import numpy as np
import pytest

from prunekit.errors import ContractViolation
from prunekit.tasks import (
    PlantedTeacher,
    TaskSpec,
    accuracy,
    cache_key,
    cached_generate,
    generate_task,
    macro_average,
    pearson,
    task_metric,
)


@pytest.fixture(scope="module")
def teacher():
    return PlantedTeacher(model_dim=16, seq_len=8, latent_dim=4, seed=3)


def test_deterministic(teacher):
    spec = TaskSpec("a", train_size=64, seed=9)
    a = generate_task(spec, teacher, n_dev=32)
    b = generate_task(spec, PlantedTeacher(16, 8, latent_dim=4, seed=3), n_dev=32)
    for x, y in zip(a, b):
        assert x.inputs.tobytes() == y.inputs.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_train_dev_disjoint_streams(teacher):
    train, dev = generate_task(TaskSpec("a", train_size=32, seed=1), teacher, n_dev=32)
    assert not np.array_equal(train.inputs, dev.inputs)
    assert train.split == "train" and dev.split == "dev"


def test_labels_in_range_and_realizable(teacher):
    spec = TaskSpec("a", num_classes=4, train_size=256, seed=2)
    train, dev = generate_task(spec, teacher, n_dev=128)
    assert train.labels.min() >= 0 and train.labels.max() < 4
    # noise 0: the teacher itself is a perfect probe
    assert accuracy(teacher.label(train.inputs, spec), train.labels) == 1.0
    assert accuracy(teacher.label(dev.inputs, spec), dev.labels) == 1.0


def test_noise_changes_labels():
    noisy = PlantedTeacher(16, 8, latent_dim=4, noise_level=2.0, seed=3)
    clean = PlantedTeacher(16, 8, latent_dim=4, seed=3)
    spec = TaskSpec("a", train_size=512, seed=4)
    tn, _ = generate_task(spec, noisy, n_dev=8)
    assert accuracy(clean.label(tn.inputs, spec), tn.labels) < 1.0


@pytest.mark.parametrize("classes", [2, 3])
def test_label_balance(classes):
    teacher = PlantedTeacher(64, 16, seed=0)
    spec = TaskSpec("a", num_classes=classes, train_size=10000, seed=0)
    train, _ = generate_task(spec, teacher, n_dev=8)
    n, p = 10000, 1.0 / classes
    sd = np.sqrt(n * p * (1 - p))
    counts = np.bincount(train.labels, minlength=classes)
    assert np.all(np.abs(counts - n * p) <= 3 * sd), counts


def test_shared_fraction_controls_feature_sharing():
    teacher = PlantedTeacher(16, 8, latent_dim=4, seed=0)
    x = np.random.default_rng(0).standard_normal((500, 8, 16))
    s1 = TaskSpec("a", kind="regression", seed=1, shared_fraction=1.0)
    s0 = TaskSpec("b", kind="regression", seed=1, shared_fraction=0.0)
    z_shared = teacher._latent(x, teacher.shared_weights)
    a_priv, _, _ = teacher.private_weights(s0)
    z_priv = teacher._latent(x, a_priv)
    _, readout, _ = teacher.private_weights(s1)
    assert np.allclose(teacher.task_outputs(x, s1)[:, 0], z_shared @ readout[:, 0])
    assert np.allclose(teacher.task_outputs(x, s0)[:, 0], z_priv @ readout[:, 0])


def test_regression_labels_real(teacher):
    train, _ = generate_task(TaskSpec("r", kind="regression", num_classes=1, train_size=50, seed=5), teacher, n_dev=5)
    assert train.labels.dtype == np.float64 and train.labels.shape == (50,)


def test_spec_validation():
    with pytest.raises(ContractViolation):
        TaskSpec("a", num_classes=1)
    with pytest.raises(ContractViolation):
        TaskSpec("a", kind="ranking")
    with pytest.raises(ContractViolation):
        TaskSpec("a", shared_fraction=1.5)
    with pytest.raises(ContractViolation):
        PlantedTeacher(4, 2, latent_dim=6)


def test_cache_round_trip(tmp_path, teacher):
    spec = TaskSpec("a", train_size=40, seed=6)
    first = cached_generate(tmp_path, spec, teacher, n_dev=20)
    assert (tmp_path / cache_key(spec, teacher, 40, 20)).is_dir()
    second = cached_generate(tmp_path, spec, teacher, n_dev=20)
    for x, y in zip(first, second):
        assert np.array_equal(x.inputs, y.inputs) and np.array_equal(x.labels, y.labels)
    assert cache_key(spec, teacher, 40, 20) != cache_key(spec, teacher, 41, 20)


def test_metric_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert macro_average([0.8, 0.6, 1.0]) == pytest.approx(0.8)
    assert macro_average({"a": 0.5, "b": 1.0}) == 0.75
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert task_metric("regression", [1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_macro_ignores_dataset_size():
    small = accuracy([1, 0], [1, 1])
    big = accuracy([1, 0] * 50, [1, 1] * 50)
    assert macro_average([small, 1.0]) == macro_average([big, 1.0])


def test_metric_errors():
    with pytest.raises(ContractViolation):
        accuracy([], [])
    with pytest.raises(ContractViolation):
        accuracy([1], [1, 2])
    with pytest.raises(ContractViolation):
        macro_average([])
