import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

RESULTS: dict = {}


def record(criterion: int, ok: bool, detail: str):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[criterion] = line
    print(line, flush=True)


@pytest.fixture(scope="session")
def desk_base(tmp_path_factory):
    """The default-config base model, pretrained once per session.

    Set SPARSEMEM_BASE to a checkpoint path to reuse a base across sessions; it
    is written there if missing.
    """
    from sparsemem.harness import experiment as ex
    from sparsemem.harness.checkpoint import load_checkpoint, save_checkpoint

    cached = os.environ.get("SPARSEMEM_BASE")
    path = Path(cached) if cached else tmp_path_factory.mktemp("desk") / "base.ckpt"
    if path.exists():
        ckpt = load_checkpoint(path)
        cfg = ex.ExperimentConfig.from_dict(ckpt.extra["experiment"])
    else:
        cfg = ex.ExperimentConfig()
        _, ckpt, _ = ex.pretrain_base(ex.make_dataset(cfg), cfg)
        save_checkpoint(ckpt, path)
    return ckpt, cfg, ex.make_dataset(cfg), path


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
