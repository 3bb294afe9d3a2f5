import pytest
import torch

from codecvc.model import BackboneConfig, ModelConfig, VoiceCloneLM
from codecvc.text_encoder import CharVocab, TextEncoderConfig
from codecvc.vocab import TokenVocabulary

ACCEPTANCE_LINES: list[str] = []


def micro_config(K: int = 3, layers: int = 2, width: int = 16) -> ModelConfig:
    return ModelConfig(
        TokenVocabulary(st_size=20, at_size=8, num_codebooks=K),
        BackboneConfig(layers=layers, width=width, ffn_width=2 * width, heads=2, text_budget=8, st_at_budget=48),
        TextEncoderConfig(width=width, layers=1, heads=2, ffn_width=2 * width, lora_rank=4, lora_alpha=4.0),
        CharVocab(tuple(" abcdeklmnorstu~")),
    )


@pytest.fixture
def micro_model():
    torch.manual_seed(0)
    return VoiceCloneLM(micro_config())


@pytest.fixture
def vocab3():
    return TokenVocabulary(st_size=20, at_size=8, num_codebooks=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
