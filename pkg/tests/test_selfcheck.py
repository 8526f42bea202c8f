from pvclient import autodiff as ad
from pvclient.selfcheck import CHECKS, check_gradients, run_selfcheck


def test_fresh_build_passes():
    lines = []
    assert run_selfcheck(lines.append)
    assert len(lines) == len(CHECKS) + 1
    assert lines[-1].startswith("PASS in ")
    assert sum(line.startswith(("PASS", "FAIL")) for line in lines) == 1


def test_injected_sign_error_fails_loudly(monkeypatch):
    original = ad.BACKWARD_RULES["softmax_rows"]

    def flipped(g, node):
        return tuple(None if x is None else -x for x in original(g, node))

    monkeypatch.setitem(ad.BACKWARD_RULES, "softmax_rows", flipped)
    assert not check_gradients().passed
    lines = []
    assert not run_selfcheck(lines.append)
    assert lines[-1].startswith("FAIL (gradients)")


def test_crashing_check_is_reported(monkeypatch):
    def boom():
        raise RuntimeError("kaput")

    monkeypatch.setitem(CHECKS, "revin-round-trip", boom)
    lines = []
    assert not run_selfcheck(lines.append)
    assert any("kaput" in line for line in lines)
    assert lines[-1].startswith("FAIL (revin-round-trip)")
