import subprocess
import sys

import numpy as np
import pytest

from text2face.cli import main
from text2face.imageio import load_image
from text2face.vectors import write_vectors

REFERENCE_MAN = ("The man has a chubby face. He sports a goatee with sideburns. His hair is black "
              "in color. He has narrow eyes and a slightly open mouth. The man looks young.")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "synth", "--n", "8", "--seed", "2", "--out", str(root / "ds"),
                 "--resolution", "8"]) == 0
    (root / "cfg.txt").write_text("# tiny run\nexperiment=5\nepochs=2\nresolution=8\nhidden=16\nbatch_size=4\n")
    assert main(["train", "--config", str(root / "cfg.txt"), "--data", str(root / "ds" / "manifest.tsv"),
                 "--out", str(root / "m.t2fl")]) == 0
    return root


@pytest.mark.parametrize("argv", [[], ["train"], ["generate"], ["manipulate"], ["evaluate"], ["caption"],
                                  ["caption", "parse"], ["caption", "render"], ["dataset"], ["dataset", "synth"],
                                  ["experiments"], ["metrics"], ["metrics", "fid"], ["metrics", "fsd"],
                                  ["metrics", "fss"]])
def test_help_exits_zero(capsys, argv):
    with pytest.raises(SystemExit) as exc:
        main(argv + ["--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    for argv in (["bogus"], ["caption", "parse", "--nope"], [], ["metrics", "fsd", "--features-a", "x"]):
        code, _, err = run(capsys, *argv)
        assert code == 1
        assert err.splitlines()[-1].startswith("error: usage: ")


def test_caption_parse_reference_man(capsys):
    code, out, err = run(capsys, "caption", "parse", REFERENCE_MAN)
    assert code == 0 and err == ""
    assert set(out.split()) == {"Male", "Chubby", "Goatee", "Sideburns", "Black_Hair", "Narrow_Eyes",
                                "Mouth_Slightly_Open", "Young"}


def test_caption_parse_failure_is_data_error(capsys):
    code, out, err = run(capsys, "caption", "parse", "Lorem ipsum.")
    assert code == 2 and out == ""
    assert len(err.splitlines()) == 1 and err.startswith("error: data: ")


def test_caption_render_round_trips(capsys):
    code, out, _ = run(capsys, "caption", "render", "--attrs", "Male,Bald,Eyeglasses")
    assert code == 0
    code, parsed, _ = run(capsys, "caption", "parse", out.strip())
    assert set(parsed.split()) == {"Male", "Bald", "Eyeglasses"}


def test_caption_render_random_is_seeded(capsys):
    a = run(capsys, "caption", "render", "--random", "3", "--seed", "4")[1]
    b = run(capsys, "caption", "render", "--random", "3", "--seed", "4")[1]
    c = run(capsys, "caption", "render", "--random", "3", "--seed", "5")[1]
    assert a == b != c and len(a.splitlines()) == 3


def test_metrics_identical_files(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_vectors(tmp_path / "a.txt", {f"r{i}": rng.normal(size=6) for i in range(20)})
    code, out, _ = run(capsys, "metrics", "fid", "--features-a", str(tmp_path / "a.txt"),
                       "--features-b", str(tmp_path / "a.txt"))
    assert code == 0 and abs(float(out.strip().split("=")[1])) < 1e-8
    code, out, _ = run(capsys, "metrics", "fss", "--features-a", str(tmp_path / "a.txt"),
                       "--features-b", str(tmp_path / "a.txt"))
    assert out.startswith("fss=") and float(out.split("=")[1]) == pytest.approx(100.0)
    code, out, _ = run(capsys, "metrics", "fsd", "--features-a", str(tmp_path / "a.txt"),
                       "--features-b", str(tmp_path / "a.txt"), "--mode", "mean_abs")
    assert out == "fsd=0.0\n"


def test_metrics_numeric_error_exit_three(tmp_path, capsys):
    write_vectors(tmp_path / "a.txt", {"x": np.zeros(3)})
    write_vectors(tmp_path / "b.txt", {"x": np.ones(3)})
    code, _, err = run(capsys, "metrics", "fss", "--features-a", str(tmp_path / "a.txt"),
                       "--features-b", str(tmp_path / "b.txt"))
    assert code == 3 and err.startswith("error: numeric: ") and len(err.splitlines()) == 1


def test_missing_file_exit_two(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--ckpt", str(tmp_path / "none.t2fl"), "--data", "x",
                       "--report", str(tmp_path / "r.txt"))
    assert code == 2 and len(err.splitlines()) == 1


def test_train_outputs(workspace):
    assert (workspace / "m.t2fl").exists()
    lines = (workspace / "m.t2fl.history.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss" and len(lines) == 3


def test_train_rejects_unknown_config_key(workspace, capsys):
    (workspace / "bad.txt").write_text("learning_rate=0.1\n")
    code, _, err = run(capsys, "train", "--config", str(workspace / "bad.txt"), "--data",
                       str(workspace / "ds" / "manifest.tsv"), "--out", str(workspace / "x.t2fl"))
    assert code == 2 and "learning_rate" in err


def test_generate_writes_image(workspace, capsys):
    out = workspace / "face.png"
    code, _, _ = run(capsys, "generate", "--ckpt", str(workspace / "m.t2fl"), "--caption", REFERENCE_MAN,
                     "--out", str(out))
    assert code == 0 and load_image(out).shape == (3, 8, 8)


def test_manipulate_panels_differ(workspace, capsys):
    out = workspace / "grid.ppm"
    code, stdout, _ = run(capsys, "manipulate", "--ckpt", str(workspace / "m.t2fl"), "--caption",
                          "The woman has brown hair. She is smiling.", "--flip", "Black_Hair=true",
                          "--out-grid", str(out))
    assert code == 0 and "black in colour" in stdout
    grid = load_image(out)
    assert grid.shape == (3, 8, 18)
    assert np.mean((grid[:, :, :8] - grid[:, :, 10:]) ** 2) > 0
    assert np.all(grid[:, :, 8:10] == 1.0)


def test_manipulate_bad_flip_is_usage_error(workspace, capsys):
    code, _, err = run(capsys, "manipulate", "--ckpt", str(workspace / "m.t2fl"), "--caption",
                       "The man is smiling.", "--flip", "Black_Hair", "--out-grid", str(workspace / "g.ppm"))
    assert code == 1 and "ATTR=BOOL" in err
    code, _, err = run(capsys, "manipulate", "--ckpt", str(workspace / "m.t2fl"), "--caption",
                       "The man is smiling.", "--flip", "Purple_Hair=true", "--out-grid", str(workspace / "g.ppm"))
    assert code == 2 and "Purple_Hair" in err


def test_evaluate_report_is_stable(workspace, capsys):
    args = ["evaluate", "--ckpt", str(workspace / "m.t2fl"), "--data", str(workspace / "ds" / "manifest.tsv")]
    assert run(capsys, *args, "--report", str(workspace / "r1.txt"))[0] == 0
    assert run(capsys, *args, "--report", str(workspace / "r2.txt"))[0] == 0
    text = (workspace / "r1.txt").read_text()
    assert text == (workspace / "r2.txt").read_text()
    assert "experiment=05" in text and "fid=" in text and "n=8" in text
    run(capsys, *args, "--report", str(workspace / "r3.txt"), "--self-check")
    values = dict(line.split("=") for line in (workspace / "r3.txt").read_text().splitlines())
    assert float(values["fid"]) < 1e-6 and float(values["fsd"]) == 0.0


def test_dataset_synth_is_seeded(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "dataset", "synth", "--n", "3", "--seed", "7", "--out", str(tmp_path / name),
            "--resolution", "8")
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()
    assert (tmp_path / "a" / "latents.txt").read_bytes() == (tmp_path / "b" / "latents.txt").read_bytes()


def test_experiments_command(workspace, capsys):
    code, out, _ = run(capsys, "experiments", "--data", str(workspace / "ds" / "manifest.tsv"), "--out",
                       str(workspace / "matrix"), "--config", str(workspace / "cfg.txt"), "--epochs", "1")
    assert code == 0
    rows = out.splitlines()[1:]
    assert [r.split("\t")[:2] for r in rows] == [["01", "Z"], ["02", "Z"], ["03", "Z"],
                                                  ["04", "W"], ["05", "W"], ["06", "W"]]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "text2face", "caption", "parse", REFERENCE_MAN],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "Goatee" in proc.stdout
