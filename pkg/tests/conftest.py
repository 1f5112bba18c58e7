import json
import shutil
import subprocess
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
REPORTS = FIXTURES / "reports"
COVERAGE = FIXTURES / "coverage"
TRANSCRIPTS = FIXTURES / "transcripts"


def clang_available() -> bool:
    if shutil.which("clang") is None:
        return False
    try:
        probe = subprocess.run(
            ["clang", "--version"], capture_output=True, timeout=30
        )
    except (OSError, subprocess.TimeoutExpired):
        return False
    return probe.returncode == 0


requires_clang = pytest.mark.skipif(
    not clang_available(), reason="needs a clang toolchain"
)


@pytest.fixture(scope="session")
def golden_report():
    def load(name: str) -> str:
        return (REPORTS / f"{name}.txt").read_text()

    return load


@pytest.fixture(scope="session")
def export_doc():
    def load(name: str) -> dict:
        return json.loads((COVERAGE / f"export_{name}.json").read_text())

    return load


@pytest.fixture()
def tiny_repo(tmp_path):
    """A minimal buildable C project for task/spec and build tests."""
    repo = tmp_path / "repo"
    (repo / "src").mkdir(parents=True)
    (repo / "src" / "main.c").write_text(
        '#include <stdio.h>\nint main(void) { printf("ok\\n"); return 0; }\n'
    )
    (repo / "Makefile").write_text(
        "target_bin: src/main.c\n\t$(CC) $(CFLAGS) -o target_bin src/main.c\n"
    )
    (repo / "README.md").write_text("Build with `make`; the binary is ./target_bin\n")
    return repo


def write_task_doc(path: Path, repo: Path, **overrides) -> Path:
    doc = {
        "project_id": "tiny",
        "repo_path": str(repo),
        "v_location": {"file": "src/main.c", "line": 3},
        "v_effect": "heap-buffer-overflow",
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path
