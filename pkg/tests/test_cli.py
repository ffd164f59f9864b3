import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from relkl.cli import fmt, main, parse_stages
from relkl.errors import InputError
from relkl.toy import load_checkpoint


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_fmt():
    assert fmt(None) == "exact"
    assert fmt(3) == "3"
    assert fmt(0.1) == "0.1"


def test_verify_double_is_exact_level(capsys):
    code, out, _ = run(["verify", "--n", "64,256", "--d", "16"], capsys)
    table = rows(out)
    assert code == 0
    assert table[0] == ["n", "forward_rel_err", "backward_mean_rel_err", "backward_max_rel_err"]
    assert [r[0] for r in table[1:]] == ["64", "256"]
    assert all(float(v) <= 1e-11 for r in table[1:] for v in r[1:])


def test_verify_identical_reports_exact(capsys):
    code, out, _ = run(["verify", "--n", "32", "--d", "8", "--identical"], capsys)
    assert code == 0
    assert rows(out)[1] == ["32", "exact", "exact", "exact"]


def test_verify_single(capsys):
    code, out, _ = run(["verify", "--n", "512", "--precision", "single"], capsys)
    fwd, mean, mx = (float(v) for v in rows(out)[1][1:])
    assert code == 0 and fwd <= 1e-5 and mean <= 1e-5 and mx <= 1e-3
    assert mean > 0


def test_verify_refuses_large_n(capsys):
    code, out, err = run(["verify", "--n", "8192"], capsys)
    assert code == 2 and "8192" in err and out == ""


def test_bench_memory(capsys, tmp_path):
    path = tmp_path / "mem.csv"
    code, _, err = run(["bench-memory", "--n", "128,256", "--d", "8", "--tile", "32x16",
                        "--dense-cap", "128", "--out", str(path)], capsys)
    table = rows(path.read_text())
    assert code == 0
    assert table[0] == ["n", "d", "tr", "tc", "buffer", "elements"]
    peaks = {r[0]: r[5] for r in table if r[4] == "kernel.peak"}
    dense = {r[0]: r[5] for r in table if r[4] == "dense.peak"}
    assert set(peaks) == {"128", "256"}
    assert dense["256"] == "skipped" and int(dense["128"]) >= 4 * 128 * 128
    assert all(r[2:4] == ["32", "16"] for r in table[1:])
    for n in ("128", "256"):
        live = sum(int(r[5]) for r in table[1:] if r[0] == n and r[4] not in ("kernel.peak", "dense.peak"))
        assert live == int(peaks[n])
    assert "R^2" in err


def test_grad_check_passes_and_fault_fails(capsys):
    code, out, err = run(["grad-check"], capsys)
    table = rows(out)
    assert code == 0
    assert table[0] == ["case", "check", "rel_err", "tol", "status"]
    checks = {r[1] for r in table[1:]}
    assert {"kernel_dX", "fd_dX", "fd_dY", "fd_self_relation", "fd_wq", "fd_wk", "fd_wv"} <= checks
    assert all(r[4] == "pass" for r in table[1:])
    code, out, err = run(["grad-check", "--inject-fault", "sign-flip"], capsys)
    assert code == 1
    assert sum(r[4] == "FAIL" for r in rows(out)[1:]) >= 1


def test_grad_check_rejects_single(capsys):
    assert run(["grad-check", "--precision", "single"], capsys)[0] == 2


def test_distill_toy_zero_lr_keeps_checkpoint(capsys, tmp_path):
    code, out, _ = run(["distill-toy", "--steps", "1", "--lr", "0", "--checkpoint", str(tmp_path / "ck")], capsys)
    table = rows(out)
    assert code == 0
    assert table[0] == ["step", "relation_kl", "logit_kl", "lr", "grad_norm"]
    assert len(table) == 2
    from relkl.toy import ToyModel

    init = ToyModel.init(0, max_len=128, out_gain=8.0).with_rope_scale(4.0)
    back = load_checkpoint(tmp_path / "ck")
    for k, v in init.named_matrices().items():
        assert back.named_matrices()[k].tobytes() == v.tobytes()


def test_distill_toy_scale_one(capsys):
    code, out, _ = run(["distill-toy", "--steps", "3", "--scale", "1"], capsys)
    assert code == 0
    assert all(float(r[1]) <= 1e-12 for r in rows(out)[1:])


def test_distill_toy_bad_weights(capsys):
    assert run(["distill-toy", "--weights", "1,-1,1"], capsys)[0] == 2
    assert run(["distill-toy", "--steps", "0"], capsys)[0] == 2


def test_tokens(capsys):
    code, out, _ = run(["tokens", "--stages", "1024,2,4,100;4096,1,2,50", "-G", "2"], capsys)
    table = rows(out)
    assert code == 0
    assert table == [["stage", "L", "B", "A", "U", "G", "tokens"],
                     ["0", "1024", "2", "4", "100", "2", "1638400"],
                     ["1", "4096", "1", "2", "50", "2", "819200"],
                     ["total", "", "", "", "", "2", "2457600"]]
    code, out, _ = run(["tokens", "--stages", "", "--gpus", "8"], capsys)
    assert rows(out)[-1][-1] == "0"


@pytest.mark.parametrize("spec, field", [("1024,2,x,100", "A"), ("1,2,3", "expected 4 fields")])
def test_tokens_parse_errors(capsys, spec, field):
    code, _, err = run(["tokens", "--stages", spec], capsys)
    assert code == 2 and field in err
    with pytest.raises(InputError):
        parse_stages(spec)


def test_usage_errors(capsys):
    assert run([], capsys)[0] == 2
    assert run(["verify", "--tile", "64"], capsys)[0] == 2
    assert run(["verify", "--precision", "half"], capsys)[0] == 2
    assert run(["nope"], capsys)[0] == 2
    assert run(["--help"], capsys)[0] == 0


def test_degenerate_exit_code(capsys, monkeypatch):
    from relkl import checks
    from relkl.errors import DegenerateRowError

    def boom(*a, **k):
        raise DegenerateRowError(3)

    monkeypatch.setattr(checks, "verify_row", boom)
    code, _, err = run(["verify", "--n", "8"], capsys)
    assert code == 3 and "3" in err


DETERMINISM_CASES = [
    (["verify", "--n", "64,200", "--d", "8", "--tile", "16x16"], True),
    (["verify", "--n", "128", "--d", "8", "--precision", "single"], True),
    (["grad-check"], True),
    (["distill-toy", "--steps", "2"], True),
    (["tokens", "--stages", "1,2,3,4"], True),
    # Each worker owns a tile workspace, so the ledger itself depends on the thread count.
    (["bench-memory", "--n", "64,128", "--d", "8", "--tile", "16x16"], False),
]


def rerun(tmp_path, argv, threads):
    outputs = []
    for k in range(2):
        path = tmp_path / f"{threads}-{k}.csv"
        assert main(argv + ["--deterministic", "--threads", threads, "--out", str(path)]) == 0
        outputs.append(path.read_bytes())
    return outputs


@pytest.mark.parametrize("argv, across_threads", DETERMINISM_CASES)
def test_deterministic_byte_identical(tmp_path, argv, across_threads):
    one = rerun(tmp_path, argv, "1")
    four = rerun(tmp_path, argv, "4")
    assert one[0] == one[1]
    assert four[0] == four[1]
    if across_threads:
        assert one[0] == four[0]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "relkl", "tokens", "--stages", "1024,1,1,10"],
                         capture_output=True, text=True, check=True)
    assert res.stdout.splitlines()[-1] == "total,,,,,1,10240"
