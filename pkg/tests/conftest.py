import numpy as np
import pytest

from casd.data import generate_dataset

# criterion number -> (description, passed, detail); printed at the end of
# the run as one line each
_ACCEPTANCE = {}


def record_criterion(n, description, passed, detail=""):
    _ACCEPTANCE[n] = (description, bool(passed), str(detail))
    assert passed, f"criterion {n} ({description}) failed: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        desc, ok, detail = _ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {desc}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


def ref_nms(boxes, scores, thr):
    """Quadratic reference NMS: keep in score order, suppress IoU > thr."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    for i in order:
        ok = True
        for j in keep:
            if _ref_iou(boxes[i], boxes[j]) > thr:
                ok = False
                break
        if ok:
            keep.append(int(i))
    return keep


def _ref_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 train / 10 test images, enough for smoke-scale training tests."""
    root = tmp_path_factory.mktemp("tinydata")
    train = generate_dataset(root, 11, 24, "train")
    test = generate_dataset(root, 12, 10, "test")
    return {"root": root, "train": train, "test": test}
