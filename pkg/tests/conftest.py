import json
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import pytest

from eco.cli import main

FIXTURES = Path(__file__).parent / "fixtures"


@dataclass
class Pipeline:
    config: Path
    build: str
    root: Path

    @property
    def build_dir(self) -> Path:
        return self.root / "artifacts" / "builds" / self.build

    def run(self, *argv: str) -> int:
        return main([argv[0], "--config", str(self.config), *argv[1:]])

    def summary(self, command: str) -> dict:
        return json.loads((self.root / f"{command}.json").read_text())

    def clone(self, dest: Path) -> "Pipeline":
        """Independent copy, for tests that overwrite artifacts."""
        shutil.copytree(self.root, dest, dirs_exist_ok=True)
        return Pipeline(dest / self.config.name, self.build, dest)


def stage_config(dest: Path, name: str, **overrides) -> Path:
    """Copy a fixture config (and the docs it points at) into ``dest``."""
    dest.mkdir(parents=True, exist_ok=True)
    doc = json.loads((FIXTURES / name).read_text())
    doc.update(overrides)
    if "docs_dir" in doc and not overrides.get("docs_dir"):
        shutil.copytree(FIXTURES / doc["docs_dir"], dest / doc["docs_dir"], dirs_exist_ok=True)
    path = dest / name
    path.write_text(json.dumps(doc, indent=1))
    return path


def run_pipeline(dest: Path, name: str = "world_config.json", *explore_args: str) -> Pipeline:
    cfg = stage_config(dest, name)
    for argv in (["generate"], ["explore", *explore_args], ["analyze"], ["train"]):
        code = main([argv[0], "--config", str(cfg), *argv[1:], "--out", str(dest / f"{argv[0]}.json")])
        assert code == 0, f"{argv[0]} exited {code}"
    build = json.loads((dest / "explore.json").read_text())["build_id"]
    return Pipeline(cfg, build, dest)


@pytest.fixture(scope="session")
def world_build(tmp_path_factory) -> Pipeline:
    return run_pipeline(tmp_path_factory.mktemp("world"), "world_config.json", "--exhaustive")


@pytest.fixture(scope="session")
def docs_build(tmp_path_factory) -> Pipeline:
    return run_pipeline(tmp_path_factory.mktemp("docs"), "docs_config.json")


# -- acceptance verdicts -----------------------------------------------------------

VERDICTS: dict[int, tuple[str, str]] = {}


@contextmanager
def verdict(number: int, title: str):
    """Record PASS/FAIL for one acceptance criterion; failures still propagate."""
    try:
        yield
    except BaseException:
        VERDICTS[number] = ("FAIL", title)
        raise
    VERDICTS[number] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, (status, title) in sorted(VERDICTS.items()):
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
