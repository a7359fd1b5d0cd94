import dataclasses

import pytest

from densecl.augment import AugmentConfig
from densecl.data import SynthSpec, generate_synthetic
from densecl.encoder import HeadConfig, ModelConfig
from densecl.loss import LossConfig
from densecl.trainer import TrainConfig


def tiny_config(**overrides) -> TrainConfig:
    """A few-thousand-parameter model on 16px views: 8x8 backbone map, 4x4 grid."""
    base = dict(
        base_lr=0.05,
        batch_size=8,
        epochs=2,
        seed=0,
        global_queue_size=64,
        dense_queue_size=64,
        checkpoint_every=1,
        loss=LossConfig(),
        model=ModelConfig(channels=(8, 16), head=HeadConfig(hidden_dim=32, out_dim=16,
                                                            grid_size=4)),
        augment=AugmentConfig(out_size=16),
    )
    base.update(overrides)
    return TrainConfig(**base)


def with_loss(cfg: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, **kw))


@pytest.fixture(scope="session")
def tiny_images():
    return generate_synthetic(SynthSpec(n_images=24, image_size=24, n_classes=2, seed=3)).images


# acceptance criteria report: criterion -> list of (part, ok, detail)
ACCEPTANCE: dict = {}


def record(criterion: int, part: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}: {'ok' if ok else 'FAILED'} ({d})" for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
