import numpy as np
import pytest
from scipy.stats import ortho_group

from dectmultra import (DecompositionSystem, MassAttenuationMatrix, MultraModel, NoiseWeights,
                        PatchConfig, TransformUnion, UnionKind)

# Effective mass attenuation (cm^2/g) of water and cortical bone near 70 / 50 keV.
A0_VALUES = (0.193, 0.26, 0.227, 0.424)


@pytest.fixture
def A0():
    return MassAttenuationMatrix(*A0_VALUES)


@pytest.fixture
def weights():
    return NoiseWeights(0.004 ** 2, 0.004 ** 2)


def random_union(kind, d, K, seed):
    rng = np.random.default_rng(seed)
    mats = ortho_group.rvs(d, size=K, random_state=rng) if K > 1 else [
        ortho_group.rvs(d, random_state=rng)]
    return TransformUnion.from_stack(kind, np.asarray(mats).reshape(K, d, d))


def random_model(side=4, K1=4, K2=3, seed=0, stride=1):
    m = side * side
    return MultraModel(random_union(UnionKind.COMMON_2D, m, K1, seed),
                       random_union(UnionKind.CROSS_3D, 2 * m, K2, seed + 1),
                       PatchConfig(side, stride))


def make_system(A0, weights, side=4, stride=1):
    return DecompositionSystem(A0, weights, PatchConfig(side, stride))


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_report(request):
    """Callable recording one pass/fail line per acceptance criterion."""
    lines = request.config._acceptance_lines

    def report(number, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (
            f" ({detail})" if detail else "")
        print(line)
        lines.append(line)
    return report
