import numpy as np
import pytest

from avatarfield.config import config_from_dict
from avatarfield.flame import make_toy_asset
from avatarfield.pipeline import AvatarModel

TINY = {"triplane_res": 6, "render_h": 4, "render_w": 4, "patch": 4, "n_coarse": 6, "n_fine": 6,
        "point_count": 48, "plane_init_scale": 0.5}


def tiny_model(seed=0, **overrides):
    cfg = config_from_dict({**TINY, "seed": seed, **overrides})
    return AvatarModel(cfg, make_toy_asset(seed, P=cfg.point_count))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed as one line per criterion at the end of the run
CRITERIA = {
    1: "gradient integrity",
    2: "knn equals brute force",
    3: "compositing analytics",
    4: "pef invariants",
    5: "mta invariants",
    6: "end-to-end toy fit",
    7: "ablation directionality",
    8: "determinism",
    9: "expression acts through points only",
}
VERDICTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str):
    VERDICTS[criterion] = (bool(ok), detail)
    print(f"ACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'}: {CRITERIA[criterion]}: {detail}")


def pytest_terminal_summary(terminalreporter):
    ran = [item for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           + terminalreporter.stats.get("error", []) if "test_acceptance" in getattr(item, "nodeid", "")]
    if not ran and not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in VERDICTS:
            ok, detail = VERDICTS[n]
            terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} FAIL: {name}: not run or errored")
