import pytest

from fedhpl.config import config_from_dict


def small_raw(**top):
    """A few-second experiment: 3 tiny heterogeneous clients on 6-class blobs."""
    raw = {
        "global_rounds": 2,
        "batch_size": 16,
        "partition": {"scheme": "noniid", "alpha": 1.0},
        "dataset": {"n_classes": 6, "per_class": 30, "patch_count": 3, "patch_dim": 4, "noise": 0.5},
        "clients": [
            {"num_layers": 1, "embed_dim": 8, "num_heads": 2},
            {"num_layers": 2, "embed_dim": 16, "num_heads": 2, "mode": "shallow"},
            {"num_layers": 1, "embed_dim": 8, "num_heads": 2, "prompt_len": 2},
        ],
    }
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw


@pytest.fixture
def small_cfg():
    def make(**top):
        return config_from_dict(small_raw(**top))

    return make


# acceptance criteria append (number, title, passed, detail, seconds) here
ACCEPTANCE: list[tuple] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail, seconds in sorted(ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title} ({seconds:.1f}s): {detail}")
