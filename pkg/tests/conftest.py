import numpy as np
import pytest

from laurentid.experiments import example1_plant, example4_plant
from laurentid.lti import StateSpaceModel, decompose

ACCEPTANCE_LINES = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ex1():
    model = example1_plant()
    return model, decompose(model)


@pytest.fixture(scope="session")
def ex4():
    model = example4_plant()
    return model, decompose(model)


def random_split_system(rng, n_s, n_u, p=1, m=1, margin=0.05):
    """Random real system with n_s eigenvalues inside |z| <= 1 - margin and n_u outside |z| >= 1 + margin."""
    def block(lo, hi, k):
        mods = rng.uniform(lo, hi, k)
        angles = rng.uniform(0, np.pi, k)
        blocks = []
        i = 0
        while i < k:
            if i + 1 < k and rng.random() < 0.5:
                a, b = mods[i] * np.cos(angles[i]), mods[i] * np.sin(angles[i])
                blocks.append(np.array([[a, b], [-b, a]]))
                i += 2
            else:
                blocks.append(np.array([[mods[i] * rng.choice([-1, 1])]]))
                i += 1
        return blocks

    blocks = block(0.0, 1 - margin, n_s) + block(1 + margin, 2.5, n_u)
    n = n_s + n_u
    J = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        J[i : i + k, i : i + k] = b
        i += k
    Q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    T = Q @ np.diag(rng.uniform(0.5, 2.0, n)) @ np.linalg.qr(rng.standard_normal((n, n)))[0]
    A = T @ J @ np.linalg.inv(T)
    return StateSpaceModel(A, rng.standard_normal((n, p)), rng.standard_normal((m, n)), rng.standard_normal((m, p)))
