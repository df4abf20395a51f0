import numpy as np
import pytest

from csmlab.config import MaskConfig, ModelConfig
from csmlab.phantom import PhantomSpec, SeriesTransform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    """d=8, two encoder blocks, f64; 2x2x2 grid of 2^3 patches (8 tokens/series)."""
    return ModelConfig(d_enc=8, d_dec=8, enc_depth=2, dec_depth=1, enc_heads=2, dec_heads=2,
                       patch_edge=2, s_max=2, n_max=8, precision="f64", init_std=0.5)


@pytest.fixture
def tiny_phantom_spec():
    return PhantomSpec(extents=(4, 4, 4), patch_edge=2,
                       series=(SeriesTransform(1.0, 0.0, "identity", 0.05),
                               SeriesTransform(1.5, -0.2, "tanh", 0.05)))


@pytest.fixture
def small_spec():
    """16^3 phantoms with p=8: 8 tokens per series, three series."""
    return PhantomSpec(extents=(16, 16, 16), patch_edge=8)


@pytest.fixture
def default_mask_cfg():
    return MaskConfig()


TINY_DOC = {
    "seed": 0,
    "data": {"extents": [8, 8, 8], "n_pretrain": 8, "n_labeled": 20,
             "series": [{"gain": 1.0, "bias": 0.0, "nonlinearity": "identity", "noise": 0.05},
                        {"gain": 1.5, "bias": -0.2, "nonlinearity": "tanh", "noise": 0.05}],
             "lesion_radius": [0.25, 0.35]},
    "model": {"d_enc": 8, "d_dec": 8, "enc_depth": 1, "dec_depth": 1, "enc_heads": 2,
              "dec_heads": 2, "patch_edge": 4, "s_max": 2, "n_max": 8},
    "pretrain": {"steps": 6, "batch_size": 2, "checkpoint_every": 3},
    "finetune": {"steps": 4, "batch_size": 2},
    "ablation": {"seeds": 1},
}


@pytest.fixture
def tiny_experiment():
    """8^3 volumes, two series, p=4 (8 tokens per series), width-8 model."""
    from csmlab.config import from_dict
    return from_dict(TINY_DOC)



# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
