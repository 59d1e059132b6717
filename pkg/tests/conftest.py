import pytest
import torch

from silsdf.fields import FieldNet, pretrain_sphere


def tiny_net(seed=0, **kw):
    """Small 64-bit net for gradient checks."""
    kw = {"width": 16, "enc_levels": 2, "hidden": 8, **kw}
    return FieldNet(seed=seed, **kw).double()


@pytest.fixture(scope="session")
def pretrained():
    """Sphere-pretrained default net (r = 0.5, 2000 iterations); shared, do not mutate."""
    torch.set_num_threads(1)
    return pretrain_sphere(FieldNet(seed=0), radius=0.5)


ACCEPTANCE = {}


def record_criterion(number: int, title: str, ok: bool, detail: str):
    """Store one acceptance line; the caller asserts ``ok`` afterwards."""
    ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
