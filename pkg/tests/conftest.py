import dataclasses

import pytest

from nerfcl.scenes import CameraLayout, default_scene, generate_dataset, load_dataset


def tiny_scene():
    spec = default_scene("tiny")
    return dataclasses.replace(spec, cameras=CameraLayout(width=16, height=16, focal=22.5))


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(tiny_scene(), 8, 0, root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
