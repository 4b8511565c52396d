import copy
import json

import pytest


def synthetic_config(**overrides) -> dict:
    """A small synthetic experiment; nested dicts in ``overrides`` replace whole sections."""
    cfg = {
        "name": "tiny",
        "id_dataset": {"kind": "synthetic", "n_per_class": 64, "seed": 0},
        "ood_datasets": [{"kind": "synthetic", "ood_kind": "ring"}],
        "architecture": "mlp",
        "pretrain": {"epochs": 15, "batch_size": 16, "seed": 0},
        "finetune": {"batch_size": 16, "seed": 0, "mixup": {"k": 4}},
        "detectors": ["msp", "mahalanobis"],
        "output_dir": "out",
    }
    cfg.update(copy.deepcopy(overrides))
    return cfg


@pytest.fixture
def write_config(tmp_path):
    def write(raw: dict, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(raw), encoding="utf-8")
        return path

    return write


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
