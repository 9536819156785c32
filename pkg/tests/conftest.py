"""Shared fixtures.

The expensive pieces (two 2000-step toy trainings, a de-zeroed float64
micro bundle) are session-scoped so the whole suite pays for them once.
"""

import re
import time

import numpy as np
import pytest
import torch

try:
    from hypothesis import settings

    settings.register_profile("det", max_examples=25, deadline=None, derandomize=True)
    settings.load_profile("det")
except ImportError:
    pass

from labelbridge import (
    ClassifierBundle,
    PredictorConfig,
    TrainConfig,
    build_predictor,
    build_schedule,
    generate_codebook,
)
from labelbridge.bridge import classification_loss
from labelbridge.data import load_dataset
from labelbridge.training import bundle_from_checkpoint, train


def pytest_runtest_logreport(report):
    # one visible line per acceptance criterion, printed outside capture
    if report.when != "call":
        return
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    verdict = "PASS" if report.passed else ("FAIL" if report.failed else "SKIP")
    print(f"\nACCEPTANCE {int(m.group(1)):02d} {m.group(2)}: {verdict}")


@pytest.fixture(scope="session")
def tiny_bundle():
    """Float64 micro bundle on 4x4 single-channel images, K=3.

    A few optimizer steps move the zero-initialized layers off their exact
    symmetry point so finite-difference gradient checks are non-degenerate.
    """
    torch.manual_seed(0)
    config = PredictorConfig(
        model_channels=4,
        channel_multipliers=(1,),
        res_blocks=1,
        in_channels=1,
        out_channels=1,
        base_resolution=4,
    )
    predictor = build_predictor(config, rng=0).double()
    codebook = generate_codebook(3, (1, 4, 4), (-1.0, 1.0), seed=0)
    schedule = build_schedule(4, 1.0)
    opt = torch.optim.Adam(predictor.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(42)
    for _ in range(40):
        x = torch.rand((8, 1, 4, 4), generator=gen, dtype=torch.float64) * 2 - 1
        classes = torch.randint(0, 3, (8,), generator=gen).numpy()
        loss = classification_loss(schedule, predictor, (x, classes), codebook, 0.2, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return ClassifierBundle(schedule=schedule, predictor=predictor, codebook=codebook)


@pytest.fixture(scope="session")
def toy_dataset():
    return load_dataset("shapes-4")


@pytest.fixture(scope="session")
def trained_runs(toy_dataset):
    """The two end-to-end toy runs: alpha=0 and alpha=0.2, same seed."""
    runs = {}
    start = time.monotonic()
    for alpha in (0.0, 0.2):
        config = TrainConfig()
        config.train_steps = 2000
        config.alpha = alpha
        config.log_every = 500
        config.out_dir = None
        runs[alpha] = train(config)
    elapsed = time.monotonic() - start
    return {
        "checkpoints": runs,
        "bundles": {a: bundle_from_checkpoint(c) for a, c in runs.items()},
        "dataset": toy_dataset,
        "elapsed": elapsed,
    }
