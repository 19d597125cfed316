import numpy as np
import pytest

from codac import autodiff as ad

# criterion number -> one-line verdict, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


class KinkProbe:
    """Watches relu activation patterns during finite-difference checks.

    Central differences are meaningless when a perturbation of size ``step``
    moves a relu input across zero, so gradient checks of composed models only
    count instances whose activation pattern is identical in every perturbed
    evaluation.
    """

    def __init__(self, monkeypatch):
        self.pattern: list[bytes] = []
        orig = ad.relu

        def relu(x):
            self.pattern.append((x.data > 0).tobytes())
            return orig(x)

        monkeypatch.setattr(ad, "relu", relu)

    def grad_errors(self, f, inputs, **kw):
        """(per-input worst relative errors, whether any relu flipped)."""
        seen = set()

        def wrapped(*ts):
            self.pattern = []
            out = f(*ts)
            seen.add(tuple(self.pattern))
            return out

        errs = ad.grad_errors(wrapped, inputs, **kw)
        return errs, len(seen) > 1

    def clean_instances(self, make, f, n=10, max_tries=200):
        """Worst errors for the first ``n`` instances with a stable relu pattern."""
        out = []
        for i in range(max_tries):
            inputs = make(i)
            if inputs is None:
                continue
            errs, flipped = self.grad_errors(f(i), inputs)
            if not flipped:
                out.append(max(errs))
            if len(out) == n:
                return out
        raise AssertionError(f"only {len(out)} kink-free instances in {max_tries} tries")


@pytest.fixture
def kink_probe(monkeypatch):
    return KinkProbe(monkeypatch)


@pytest.fixture(scope="session")
def stage_cache():
    """Trained stages shared by every test that needs a desk-scale run."""
    from codac.evaluation import StageCache

    return StageCache()


@pytest.fixture(scope="session")
def default_stage1(stage_cache):
    from codac.pipeline import TrainConfig

    cfg = TrainConfig(seed=0)
    return stage_cache.get_stage1(cfg, stage_cache.get_data(cfg))


@pytest.fixture(scope="session")
def default_final(stage_cache):
    """Seed-0 default run through full fine-tuning."""
    from codac.evaluation import run_seed
    from codac.pipeline import TrainConfig

    return run_seed(TrainConfig(seed=0), stage_cache)[1]
