import json

import pytest
import torch

from omninet import cli
from omninet.cnp import load_checkpoint
from omninet.trainer import MetricsLog
from omninet.tasks import CAPTION_VOCAB, TASK_NAMES, make_task


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_train_twice_gives_identical_metrics(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        code, _, _ = run(capsys, "train", "--tasks", "tagging", "--steps", "200", "--seed", "7", "--out", str(d))
        assert code == 0
    assert (a / "metrics.tsv").read_bytes() == (b / "metrics.tsv").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()


def test_async_all4_writes_four_streams(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--tasks", "all4", "--mode", "async", "--steps", "50",
                       "--eval-limit", "20", "--out", str(tmp_path))
    assert code == 0
    records = MetricsLog.read(tmp_path / "metrics.tsv")
    assert {r[1] for r in records if r[2] == "train"} == set(TASK_NAMES)
    assert {r[1] for r in records if r[2] == "val"} == set(TASK_NAMES)


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nsteps = 2\nseed=5\ntasks=tagging\neval_limit=10\n")
    code, _, _ = run(capsys, "train", "--config", str(cfg), "--steps", "1", "--out", str(tmp_path / "r"))
    assert code == 0
    spec = json.loads((tmp_path / "r" / "run.json").read_text())["spec"]
    assert spec["steps"] == 1  # flag beats file
    assert spec["seed"] == 5  # file beats default
    assert spec["tasks"] == ["tagging"] and spec["preset"] == "toy"


@pytest.mark.parametrize(
    "argv",
    [
        ("ablate", "--ablate", "no-link-array"),
        ("gradcheck", "--ablate", "no-spatial-cache"),
        ("inspect", "--ablate", "no-link-array"),
        ("train", "--tasks", "parsing"),
        ("train", "--steps", "many"),
        ("train", "--preset", "paper-base", "--tasks", "tagging"),
        ("evaluate",),
        ("evaluate", "--checkpoint", "missing.ckpt"),
        ("zeroshot", "--checkpoint", "missing.ckpt"),
        ("bogus",),
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    if argv[1:2] == ("--preset",) and torch.cuda.is_available():
        pytest.skip("override only required on CPU")
    code, _, _ = run(capsys, *argv)
    assert code == 2


def test_ablation_in_config_file_rejected_outside_train_eval(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("ablate=no-link-array\n")
    code, _, err = run(capsys, "ablate", "--config", str(cfg))
    assert code == 2 and "ablation" in err


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate=3\n")
    assert run(capsys, "train", "--config", str(cfg))[0] == 2
    assert run(capsys, "train", "--config", str(tmp_path / "none.cfg"))[0] == 2


def test_gradcheck_passes_and_is_deterministic(capsys):
    code, out, _ = run(capsys, "gradcheck", "--coords", "40", "--seed", "3")
    assert code == 0
    lines = out.splitlines()
    assert all(line.endswith("\tok") for line in lines)
    assert {line.split("\t")[1] for line in lines if line.startswith("model")} == set(TASK_NAMES)
    assert run(capsys, "gradcheck", "--coords", "40", "--seed", "3")[1] == out


def test_gradcheck_corrupted_adjoint_names_op(capsys):
    code, out, err = run(capsys, "gradcheck", "--coords", "10", "--corrupt-adjoint", "layer_norm")
    assert code == 1
    assert "layer_norm" in err
    failing = [line.split("\t")[1] for line in out.splitlines() if line.startswith("op") and line.endswith("FAIL")]
    assert failing == ["layer_norm"]


def test_inspect_dump_trace(capsys):
    code, out, _ = run(capsys, "inspect", "--task", "vqa", "--index", "0", "--dump-trace")
    assert code == 0
    question = make_task("vqa").split("val")[0].inputs[1]
    assert f"links\t[(1, 16), ({len(question)}, 1)]" in out
    trace = [line.split("\t") for line in out.splitlines() if line.startswith(("temporal\t", "spatial\t"))]
    assert sum(r[0] == "spatial" for r in trace) == 16
    assert run(capsys, "inspect", "--task", "vqa", "--index", "-1")[0] == 2


def test_evaluate_and_ablate_on_checkpoint(tmp_path, capsys):
    out_dir = tmp_path / "r"
    assert run(capsys, "train", "--tasks", "tagging,captioning", "--steps", "5", "--eval-limit", "10",
               "--out", str(out_dir))[0] == 0
    ckpt = str(out_dir / "model.ckpt")
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--eval-limit", "10", "--ablate", "no-link-array")
    assert code == 0 and out.startswith("tagging\taccuracy=")
    code, out, _ = run(capsys, "ablate", "--checkpoint", ckpt, "--eval-limit", "10")
    assert code == 0
    rows = [line.split("\t")[0] for line in out.splitlines()]
    assert rows == ["ablation", "none", "no-spatial-cache", "no-link-array"]
    assert run(capsys, "evaluate", "--checkpoint", ckpt, "--tasks", "vqa")[0] == 2


def test_zeroshot_report_contract(tmp_path, capsys):
    out_dir = tmp_path / "r"
    assert run(capsys, "train", "--tasks", "all4", "--steps", "3", "--eval-limit", "5", "--out", str(out_dir))[0] == 0
    code, out, _ = run(capsys, "zeroshot", "--checkpoint", str(out_dir / "model.ckpt"), "--samples", "12")
    assert code == 0
    clips = [line for line in out.splitlines() if line.startswith("clip\t")]
    assert clips
    for line in clips:
        caption = line.split("\tcaption\t")[1].split()
        assert caption[-1] == "<eos>"
        assert all(w in CAPTION_VOCAB.index for w in caption[:-1])
    report = json.loads(out[out.index("{"):])
    assert len(report["frame_gate_mass"]) == 6
    assert sum(report["frame_gate_mass"]) == pytest.approx(1.0, abs=1e-5)
    for key in ("attribute_rate", "baseline_attribute_rate", "color_rate", "shape_rate"):
        assert 0.0 <= report[key] <= 100.0

    tag_only = tmp_path / "t"
    assert run(capsys, "train", "--tasks", "tagging", "--steps", "1", "--eval-limit", "5", "--out", str(tag_only))[0] == 0
    assert run(capsys, "zeroshot", "--checkpoint", str(tag_only / "model.ckpt"))[0] == 2


def test_train_with_ablation_flag_builds_ablated_model(tmp_path, capsys):
    out_dir = tmp_path / "r"
    code, _, _ = run(capsys, "train", "--tasks", "captioning", "--ablate", "no-spatial-cache", "--steps", "2",
                     "--eval-limit", "5", "--out", str(out_dir))
    assert code == 0
    model = load_checkpoint(out_dir / "model.ckpt")
    assert model.cfg.spatial_cache is False and model.cfg.link_array is True
    assert json.loads((out_dir / "run.json").read_text())["spec"]["ablate"] == "no-spatial-cache"
