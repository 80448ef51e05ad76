import numpy as np
import pytest
import torch

from msam.backbone import ModelConfig
from msam.model import build_model

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(label: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((label, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def tiny_cfg():
    """16³ volume, 2³ token grid, D=16: fast enough for finite differences."""
    return ModelConfig(
        volume_size=16,
        patch_size=8,
        embed_dim=16,
        encoder_depth=1,
        encoder_heads=2,
        decoder_depth=1,
        decoder_heads=2,
        mask_channels=(4, 8),
        mlp_ratio=2,
    )


@pytest.fixture
def toy_model():
    return build_model(ModelConfig(lora_rank=4)).eval()
