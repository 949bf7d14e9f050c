import pytest

from prunekit.config import parse_config


def tiny_config(**overrides):
    data = {
        "model": {"num_layers": 1, "model_dim": 16, "ffn_dim": 32, "num_heads": 2, "seq_len": 8},
        "prune": {"final_density": 0.3, "epochs": 4, "warmup_epochs": 1, "cooldown_epochs": 1},
        "tasks": [{"id": "a", "train_size": 96, "seed": 1}, {"id": "b", "train_size": 64, "seed": 2}],
        "teacher": {"latent_dim": 4},
        "training": {"dev_size": 64},
        "output_dir": "out",
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data


@pytest.fixture
def tiny():
    return lambda **kw: parse_config(tiny_config(**kw))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
