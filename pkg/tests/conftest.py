import pytest
import torch

from deferred_diffusion.pipeline import SceneConfig, TrainConfig, synthesize_dataset

torch.set_num_threads(1)

TINY_SCENE = dict(num_cameras=3, num_frames=4, num_sequences=2, image_size=16, focal=18.75, azimuth_step=30.0)
TINY_TRAIN = dict(batch_size=4, steps=20, pretrain_steps=20, base_channels=8, channel_mult=(1, 2),
                  attention_levels=(1,), token_width=8, num_features=4, grid_size=16, schedule_steps=100,
                  log_every=0)


def tiny_train(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY_TRAIN, **kw})


@pytest.fixture(scope="session")
def tiny_corpus():
    return synthesize_dataset(SceneConfig(**TINY_SCENE))


# One line per acceptance criterion, printed in the terminal summary.
CRITERIA: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test gates a named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and not rep.passed):
        return
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    CRITERIA.append(f"{status}  {marker.args[0]}" + (f"  ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
