import json
import subprocess
import sys

from dgdet.cli import main


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_staged_subcommands(tmp_path, capsys):
    sc = str(tmp_path / "scenes.json")
    assert run(["simulate", "--num-scenes", "2", "--out", sc], capsys)[0] == 0
    assert run(["assign", "--scenes", sc, "--out", str(tmp_path / "a")], capsys)[0] == 0
    dets = [str(tmp_path / "a" / f"detections_seed_{s}.jsonl") for s in (0, 1)]
    kept = str(tmp_path / "kept.jsonl")
    assert run(["nms", "--detections", *dets, "--out", kept], capsys)[0] == 0
    code, out, _ = run(["evaluate", "--scenes", sc, "--detections", kept, "--out", str(tmp_path / "ev")], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["num_images"] == 2 and report["schema"] == "dgdet.eval/1"


def test_staged_matches_pipeline(tmp_path, capsys):
    run(["pipeline", "--num-scenes", "2", "--out", str(tmp_path / "p")], capsys)
    sc = str(tmp_path / "p" / "scenes.json")
    run(["assign", "--scenes", sc, "--out", str(tmp_path / "a")], capsys)
    dets = [str(tmp_path / "a" / f"detections_seed_{s}.jsonl") for s in (0, 1)]
    run(["nms", "--detections", *dets, "--out", str(tmp_path / "kept.jsonl")], capsys)
    kept = (tmp_path / "kept.jsonl").read_text().splitlines()
    piped = (tmp_path / "p" / "detections_seed_0.jsonl").read_text().splitlines()
    piped += (tmp_path / "p" / "detections_seed_1.jsonl").read_text().splitlines()[1:]
    assert kept == piped


def test_cli_byte_identical(tmp_path, capsys):
    outs = []
    for tag in ("x", "y"):
        code, out, _ = run(["pipeline", "--seed", "5", "--out", str(tmp_path / tag)], capsys)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    for name in sorted(p.name for p in (tmp_path / "x").iterdir()):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_errors_exit_nonzero_with_stage(tmp_path, capsys):
    code, _, err = run(["pipeline", "--set", "th_pos=0.9", "--set", "th_neg=0.8"], capsys)
    assert code != 0 and "[config]" in err
    code, _, err = run(["evaluate", "--scenes", str(tmp_path / "missing.json"), "--detections", "x",
                        "--out", str(tmp_path)], capsys)
    assert code != 0 and "[read]" in err
    code, _, err = run(["sweep", "--axis", "nope", "--values", "1"], capsys)
    assert code != 0 and "[config]" in err


def test_config_file_and_flags(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("radius: 3\nscene:\n  overlap: sparse\n")
    code, out, _ = run(["sweep", "--config", str(cfg), "--axis", "nms_variant",
                        "--values", "square", "linear", "sqrt", "--set", "scene.num_gts=10"], capsys)
    assert code == 0
    rows = out.strip().splitlines()
    assert len(rows) == 4 and rows[1].startswith("nms_variant,square,1,")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dgdet.cli", "simulate", "--out", str(tmp_path / "s.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "s.json").exists()
