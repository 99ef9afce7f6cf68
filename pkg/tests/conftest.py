import numpy as np
import pytest

from tvjlcm.data import Dataset, ModelSpec
from tvjlcm.model import ParamState, Priors

ACCEPTANCE_LINES: dict[int, str] = {}


def make_dataset(rng, n_subjects=6, visits=4, p1=2, p3=1, q=2, event_rate=0.5):
    """Small random dataset with (1, t) designs and sorted visits."""
    counts = rng.integers(1, visits + 1, size=n_subjects)
    subject = np.repeat(np.arange(n_subjects), counts)
    times = np.concatenate([np.sort(rng.uniform(0, 1, c)) for c in counts])
    times[np.r_[0, np.cumsum(counts)[:-1]]] = 0.0
    last = np.array([times[subject == i].max() for i in range(n_subjects)])
    X1 = np.column_stack([rng.standard_normal(subject.size), times])[:, :p1]
    X2 = np.column_stack([np.ones_like(times), times])
    Z = np.column_stack([np.ones_like(times), times])[:, :q]
    return Dataset(
        subject_ids=list(range(1, n_subjects + 1)),
        subject=subject,
        visit_time=times,
        y=rng.standard_normal(subject.size),
        X1=X1,
        X2=X2,
        Z=Z,
        followup=last + rng.uniform(0.05, 0.5, n_subjects),
        event=(rng.random(n_subjects) < event_rate).astype(int),
        X3=rng.integers(0, 2, size=(n_subjects, p3)).astype(float),
    )


def make_state(rng, data, spec, scale=0.5):
    K = spec.K
    xi = scale * rng.standard_normal((K, spec.dim_x1))
    if spec.reference_class_constraint:
        xi[-1] = 0
    return ParamState(
        xi=xi,
        beta=rng.standard_normal((K, spec.dim_x2)),
        omega=scale * rng.standard_normal((K, spec.dim_x3)),
        delta=scale * rng.standard_normal((K, spec.q)),
        tau=rng.uniform(0.2, 1.5, K),
        lambda0=rng.uniform(0.1, 1.0, (K, spec.n_steps)),
        sigma_u=np.eye(spec.q),
        u=scale * rng.standard_normal((data.N, spec.q)),
        r=rng.integers(0, K, data.n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture
def toy(rng):
    data = make_dataset(rng)
    spec = ModelSpec.for_data(data, 2)
    state = make_state(rng, data, spec)
    return data, spec, state, Priors.default(spec)


@pytest.fixture
def acceptance_report():
    def report(number: int, passed: bool, detail: str):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
