import numpy as np
import pytest

from bcnn import cli
from bcnn import encoders as E
from bcnn import gradcheck as G

FAST = ["matmul", "relu", "softmax", "signed_sqrt", "bilinear/A", "bilinear/B", "tv_prior/beta1.5"]


def flipped_backward(A, B, g):
    dA, dB = ORIGINAL(A, B, g)
    return -dA, dB


ORIGINAL = E.bilinear_backward


def test_covers_every_differentiable_op():
    names = set(G.CHECKS)
    for prefix in ("matmul", "relu", "softmax", "log_softmax", "signed_sqrt", "l2_normalize",
                   "soft_assign", "bilinear", "netvlad", "netfv", "netbovw", "backbone",
                   "tv_prior", "inversion_objective"):
        assert any(n == prefix or n.startswith(prefix + "/") for n in names), prefix


@pytest.mark.parametrize("name", FAST)
def test_fast_checks_pass(name):
    row = G.run_check(name, seed=1)
    assert row.passed and row.points == G.POINTS and row.max_rel_err <= G.TOLERANCE


def test_table_is_deterministic():
    a, b = [], []
    G.run_suite(3, FAST, emit=a.append)
    G.run_suite(3, FAST, emit=b.append)
    assert a == b and a[0] == G.HEADER and len(a) == len(FAST) + 1


def test_sign_error_in_bilinear_backward_is_caught(monkeypatch):
    monkeypatch.setattr(E, "bilinear_backward", flipped_backward)
    row = G.run_check("bilinear/A", seed=0)
    assert not row.passed and row.max_rel_err > 0.5
    assert "FAIL" in row.line()


def test_cli_exit_code_on_failure(monkeypatch, capsys):
    monkeypatch.setattr(E, "bilinear_backward", flipped_backward)
    assert cli.main(["gradcheck", "--seed", "0"]) == 1
    out = capsys.readouterr().out
    assert "bilinear/A" in out and "FAIL" in out
