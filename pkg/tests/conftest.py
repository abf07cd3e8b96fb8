import pytest

from vitkit import Rng, ViTConfig, build_model

# acceptance lines collected by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vit_b():
    # ~350 MB in f32; built once for every test that needs real ViT-B shapes
    return build_model(ViTConfig(width=768, depth=12, heads=12, image_size=32, num_classes=10), Rng(0))


@pytest.fixture
def tiny_cfg():
    return ViTConfig(width=16, depth=2, heads=2, image_size=32, num_classes=5, dtype="f64")
