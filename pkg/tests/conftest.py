import numpy as np
import pytest

from paic.model import CovariateSet, TrialIPD


def make_trial(trial_id, arms, x, y, names=("x1", "x2")):
    """Small TrialIPD from plain lists."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return TrialIPD(trial_id, CovariateSet(names[: x.shape[1]], x), np.asarray(arms),
                    np.asarray(y, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def null_trials(rng):
    """Two trials drawn from one common covariate distribution."""
    def draw(label, arms, n_per_arm):
        x = rng.standard_normal((2 * n_per_arm, 2))
        arm = np.repeat(np.array(arms), n_per_arm)
        y = x[:, 0] + 2 * x[:, 1] + (arm == arms[0]) + rng.standard_normal(2 * n_per_arm)
        return TrialIPD(label, CovariateSet(("x1", "x2"), x), arm, y)
    return draw("a", ("A", "C"), 250), draw("b", ("B", "C"), 250)
