import sys

import numpy as np
import pytest
import torch

from paranoise_sv.model import ModelConfig, ParaNoiseSV, tiny_model_config
from paranoise_sv.dual_unet import Variant


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    from paranoise_sv.synth import generate_corpus

    return generate_corpus(tmp_path_factory.mktemp("corpus"), seed=0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    from paranoise_sv.synth import generate_corpus

    return generate_corpus(tmp_path_factory.mktemp("small_corpus"), num_speakers=4,
                           utts_per_speaker=3, duration_s=1.5, noise_per_category=1,
                           noise_duration_s=2.0, seed=1)


def tiny(variant=Variant.ENC_ONLY, seed=0):
    torch.manual_seed(seed)
    return ParaNoiseSV(tiny_model_config(variant))


def perturb_(module, scale=0.1, seed=123):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.acceptance_lines():
        terminalreporter.write_line(line)
