from pathlib import Path

import numpy as np
import pytest
from PIL import Image

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(criterion: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def _write_gray(path: Path, rng, h: int, w: int):
    Image.fromarray(rng.integers(0, 256, (h, w), dtype=np.uint8), mode="L").save(path)


def make_yaleb_tree(root: Path, subjects: int = 38, per_subject: int = 64, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    for s in range(1, subjects + 1):
        sub = root / f"yaleB{s:02d}"
        sub.mkdir(parents=True)
        for i in range(per_subject):
            _write_gray(sub / f"yaleB{s:02d}_P00A{i:03d}.pgm", rng, 192, 168)
        _write_gray(sub / f"yaleB{s:02d}_P00_Ambient.pgm", rng, 192, 168)
    return root


def make_orl_tree(root: Path, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    for s in range(1, 41):
        sub = root / f"s{s}"
        sub.mkdir(parents=True)
        for i in range(1, 11):
            _write_gray(sub / f"{i}.pgm", rng, 112, 92)
    return root


def make_coil_tree(root: Path, objects: int, seed: int = 0, size: int = 32, color: bool = False) -> Path:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True)
    for o in range(1, objects + 1):
        for v in range(72):
            name = root / f"obj{o}__{v * 5 if color else v}.png"
            if color:
                Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8), mode="RGB").save(name)
            else:
                _write_gray(name, rng, size, size)
    return root


@pytest.fixture(scope="session")
def yaleb_root(tmp_path_factory):
    return make_yaleb_tree(tmp_path_factory.mktemp("yaleb"))


@pytest.fixture(scope="session")
def orl_root(tmp_path_factory):
    return make_orl_tree(tmp_path_factory.mktemp("orl_parent") / "orl")
