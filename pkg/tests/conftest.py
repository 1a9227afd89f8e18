import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crld import config as cfgmod

settings.register_profile("crld", deadline=None, max_examples=60, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("crld")

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

TINY_CONFIG = """\
data.kind=synthetic
data.num_classes=4
data.per_class_train=8
data.per_class_test=4
data.size=16
teacher.stage_channels=8,16
teacher.blocks_per_stage=1
teacher.num_classes=4
teacher.input_size=16,16
student.stage_channels=4,8
student.num_classes=4
student.input_size=16,16
distill.epochs=2
distill.batch_size=16
pretrain.epochs=2
pretrain.batch_size=16
run.preview_count=3
"""


def tiny_config(out, extra=""):
    """The tiny config with ``extra`` lines overriding or adding keys."""
    lines = dict(line.split("=", 1) for line in (TINY_CONFIG + extra + f"run.out={out}\n").splitlines())
    return cfgmod.parse("".join(f"{k}={v}\n" for k, v in lines.items()))


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(str(tmp_path / "run"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one line per acceptance criterion; printed in the terminal summary."""
    lines = getattr(request.config, "_crld_acceptance", None)
    if lines is None:
        lines = request.config._crld_acceptance = []

    def report(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_crld_acceptance", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
