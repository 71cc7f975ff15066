import numpy as np
import pytest

from gazeforge.backbone import Backbone, BackboneConfig
from gazeforge.dataset import make_dataset
from gazeforge.saliency import ReadoutParams, SaliencyModel


@pytest.fixture(scope="session")
def backbone():
    return Backbone(BackboneConfig())


@pytest.fixture(scope="session")
def items():
    return make_dataset(24, size=32, objects_per_image=2, seed=3)


def random_readout(backbone, seed=0, scale=0.3):
    """A readout whose last layer is non-zero, so predictions depend on the image."""
    readout = ReadoutParams.init(backbone.config.readout_channels, seed=seed)
    rng = np.random.default_rng(seed + 1)
    readout.weights[-1].data = rng.standard_normal(readout.weights[-1].shape) * scale
    return readout


@pytest.fixture(scope="session")
def model(backbone):
    m = SaliencyModel(backbone, random_readout(backbone))
    m.readout.set_trainable(False)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def run_cli(*argv):
    from gazeforge.cli import main

    return main([str(a) for a in argv])


def write_json(path, data):
    import json

    path.write_text(json.dumps(data))
    return path


def blob_fixations(rng, image, height, width, centre, sigma=3.0, subjects=4, per_subject=10):
    from gazeforge.fixations import FixationRecord

    out = []
    for s in range(subjects):
        for k in range(per_subject):
            x = float(np.clip(centre[0] + sigma * rng.standard_normal(), 0, width - 1e-6))
            y = float(np.clip(centre[1] + sigma * rng.standard_normal(), 0, height - 1e-6))
            out.append(FixationRecord(f"s{s}", image, 1, k + 1, x, y))
    return out


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """A small end-to-end run tree shared by the CLI and reproducibility tests."""
    from gazeforge.fixations import write_fixations

    root = tmp_path_factory.mktemp("workspace")
    assert run_cli("make-dataset", "--n", 12, "--size", 32, "--seed", 1, "--out", root / "data") == 0
    write_json(root / "pretrain.json", {"dataset": "data/manifest.json", "steps": 20, "batch_size": 4})
    assert run_cli("pretrain", "--config", root / "pretrain.json", "--out", root / "pre") == 0
    train_cfg = {"dataset": "data/manifest.json", "saliency": "pre/saliency", "steps": 3, "batch_size": 2,
                 "eval_images": 2}
    write_json(root / "train.json", train_cfg)
    assert run_cli("train", "--config", root / "train.json", "--out", root / "run") == 0

    rng = np.random.default_rng(0)
    stim = root / "stim"
    stim.mkdir()
    (stim / "masks").mkdir()
    import shutil

    shutil.copy(root / "data" / "images" / "img0000.ppm", stim / "a.ppm")
    shutil.copy(root / "data" / "images" / "img0001.ppm", stim / "b.ppm")
    shutil.copy(root / "data" / "masks" / "img0000_obj1.pgm", stim / "masks" / "a_obj.pgm")
    write_json(stim / "stimuli.json", {"format": "gazeforge-stimuli/1", "stimuli": [
        {"id": "a", "height": 32, "width": 32, "mask": "masks/a_obj.pgm", "image": "a.ppm"},
        {"id": "a_edit", "original": "a", "height": 32, "width": 32, "image": "b.ppm"},
        {"id": "b", "height": 32, "width": 32, "image": "b.ppm"},
    ]})
    records = (blob_fixations(rng, "a", 32, 32, (10, 12)) + blob_fixations(rng, "a_edit", 32, 32, (14, 12))
               + blob_fixations(rng, "b", 32, 32, (20, 20)))
    write_fixations(stim / "fixations.csv", records)
    return root


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion; printed at the end of the run."""

    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (passed, detail)
        print(f"acceptance {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"acceptance {number}: {'PASS' if passed else 'FAIL'}  {detail}")
