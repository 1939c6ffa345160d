import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from waferqa.config import RunConfig, config_from_dict  # noqa: E402
from waferqa.evaluate import evaluate  # noqa: E402
from waferqa.metrics import EvalReport  # noqa: E402
from waferqa.trainer import TrainResult, save_checkpoint, train  # noqa: E402
from waferqa.wafersynth import generate_dataset, load_split  # noqa: E402


@dataclass
class Dataset:
    root: Path
    train: list
    test: list


@dataclass
class Run:
    cfg: RunConfig
    result: TrainResult
    report: EvalReport
    ckpt: Path
    out_dir: Path
    seconds: float


@pytest.fixture(scope="session")
def dataset(tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("wafers")
    generate_dataset(RunConfig().gen, root)
    return Dataset(root, load_split(root, "train"), load_split(root, "test"))


def _experiment(tmp_path_factory, data: Dataset, name: str, overrides: dict, with_qa: bool = True,
                max_steps: int | None = None) -> Run:
    cfg = config_from_dict(overrides)
    out = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    result = train(cfg, data.train, out_dir=out, max_steps=max_steps)
    seconds = time.perf_counter() - t0
    ckpt = out / "model.bin"
    save_checkpoint(result.model, result.optimizer, result.step, ckpt)
    report = evaluate(result.model, data.test, with_qa=with_qa, ckpt=ckpt)
    return Run(cfg, result, report, ckpt, out, seconds)


@pytest.fixture(scope="session")
def full_run(tmp_path_factory, dataset) -> Run:
    """Default desk configuration on the seed-0 dataset."""
    return _experiment(tmp_path_factory, dataset, "full", {})


@pytest.fixture(scope="session")
def repeat_run(tmp_path_factory, dataset) -> Run:
    return _experiment(tmp_path_factory, dataset, "repeat", {})


@pytest.fixture(scope="session")
def baseline_run(tmp_path_factory, dataset) -> Run:
    """Ungated naive instruction layout."""
    return _experiment(tmp_path_factory, dataset, "eq5", {"ablation": {"instruction_format": "eq5_baseline"}})


@pytest.fixture(scope="session")
def bare_run(tmp_path_factory, dataset) -> Run:
    """No prediction module and no prompt experts."""
    return _experiment(tmp_path_factory, dataset, "bare", {"ablation": {"use_pm": False, "use_experts": False}},
                       with_qa=False)


@pytest.fixture(scope="session")
def short_run(tmp_path_factory, dataset) -> Run:
    return _experiment(tmp_path_factory, dataset, "short", {}, with_qa=False, max_steps=300)
