import filecmp
from pathlib import Path

import numpy as np
import pytest

from floodkd.cli import COMMAND_KEYS, EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main, resolve
from floodkd.datagen import read_manifest
from floodkd.errors import ConfigError
from floodkd.raster import WATER, read_mask, read_raster


def run(cmd, **keys):
    argv = [cmd]
    for k, v in keys.items():
        argv += ["--set", f"{k}={v}"]
    return main(argv)


def tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("synth", out_dir=root / "scenes", n_scenes=6, size=32, seed=3) == EXIT_OK
    return root


def test_synth_deterministic(tmp_path):
    assert run("synth", out_dir=tmp_path / "a", n_scenes=4, size=32, seed=7) == EXIT_OK
    assert run("synth", out_dir=tmp_path / "b", n_scenes=4, size=32, seed=7) == EXIT_OK
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    a.pop("config.txt"), b.pop("config.txt")
    assert a == b and len(a) == 1 + 4 * 5
    assert run("synth", out_dir=tmp_path / "c", n_scenes=4, size=32, seed=8) == EXIT_OK
    assert tree(tmp_path / "c")["scenes/scene00000.s1.fsr"] != a["scenes/scene00000.s1.fsr"]


def test_synth_empty_and_size(tmp_path):
    assert run("synth", out_dir=tmp_path / "e", n_scenes=0) == EXIT_OK
    assert (tmp_path / "e/manifest.csv").read_text().count("\n") == 1
    assert read_manifest(tmp_path / "e/manifest.csv") == []
    assert run("synth", out_dir=tmp_path / "s", n_scenes=2, size=64) == EXIT_OK
    for r in read_manifest(tmp_path / "s/manifest.csv"):
        assert read_raster(r.s1_path).shape == (64, 64)
        assert read_raster(r.s2_path).shape == (64, 64)


def _water(manifest):
    return sum(np.count_nonzero(read_mask(r.label_path).codes == WATER)
               for r in read_manifest(manifest))


def test_weaklabel_improve_monotone(corpus, tmp_path):
    m = corpus / "scenes/manifest.csv"
    common = dict(manifest=m, corrupt_mode="river_dropout", corrupt_severity=0.5, seed=1)
    assert run("weaklabel", out_dir=tmp_path / "raw", **common) == EXIT_OK
    assert run("weaklabel", out_dir=tmp_path / "imp", improve="true", **common) == EXIT_OK
    assert run("weaklabel", out_dir=tmp_path / "noop", improve="true", occ_threshold=1.1,
               **common) == EXIT_OK
    raw = _water(tmp_path / "raw/manifest.csv")
    assert _water(tmp_path / "imp/manifest.csv") > raw
    assert _water(tmp_path / "noop/manifest.csv") == raw
    for a, b in zip(read_manifest(tmp_path / "raw/manifest.csv"),
                    read_manifest(tmp_path / "noop/manifest.csv")):
        assert filecmp.cmp(a.label_path, b.label_path, shallow=False)


def test_weaklabel_clean_matches_truth_outside_clouds(corpus, tmp_path):
    assert run("weaklabel", manifest=corpus / "scenes/manifest.csv", out_dir=tmp_path) == EXIT_OK
    truth = read_manifest(corpus / "scenes/manifest.csv")
    for t, w in zip(truth, read_manifest(tmp_path / "manifest.csv")):
        a, b = read_mask(t.label_path).codes, read_mask(w.label_path).codes
        clear = b < 2
        assert np.array_equal(a[clear], b[clear])


def test_eval_identical_predictions(corpus, tmp_path):
    m = corpus / "scenes/manifest.csv"
    assert run("eval", manifest=m, pred_manifest=m, out_dir=tmp_path) == EXIT_OK
    row = (tmp_path / "report.csv").read_text().splitlines()[1].split(",")
    assert row[6] == "1.000000" and row[7] == "0.000000"


def test_otsu_and_render(corpus, tmp_path):
    assert run("otsu", manifest=corpus / "scenes/manifest.csv", out_dir=tmp_path / "o") == 0
    rec = read_manifest(tmp_path / "o/manifest.csv")[0]
    assert run("render", input=rec.label_path, output=tmp_path / "m.png") == EXIT_OK
    assert (tmp_path / "m.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_run_directory(corpus, tmp_path):
    m = corpus / "scenes/manifest.csv"
    code = run("train", train_manifest=m, val_manifest=m, out_dir=tmp_path, total_steps=2,
               batch=2, base_width=2, eval_every=1)
    assert code == EXIT_OK
    assert {"config.txt", "history.csv", "best.ckpt", "last.ckpt"} <= set(tree(tmp_path))
    assert (tmp_path / "history.csv").read_text().count("\n") == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(corpus, tmp_path, capsys):
    m = corpus / "scenes/manifest.csv"
    assert run("train", bogus=1) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    assert run("train", train_manifest=m, out_dir=tmp_path, lr0="abc") == EXIT_CONFIG
    assert run("train", train_manifest=m, out_dir=tmp_path, loss="dice") == EXIT_CONFIG
    assert run("eval", manifest=tmp_path / "missing.csv", out_dir=tmp_path,
               pred_manifest=m) == EXIT_DATA
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX")
    assert run("eval", manifest=m, out_dir=tmp_path, checkpoint=bad) == EXIT_DATA
    assert run("train", train_manifest=m, out_dir=tmp_path, total_steps=3, batch=2,
               base_width=2, lr0=1e30) == 4


def test_config_file_paths_relative_to_file(tmp_path, monkeypatch):
    sub = tmp_path / "cfg"
    sub.mkdir()
    (sub / "run.txt").write_text("# comment\nout_dir = here\nn_scenes = 3  # trailing\n")
    monkeypatch.chdir(tmp_path)
    v = resolve("synth", str(sub / "run.txt"), ["size=16"])
    assert v["out_dir"] == str(sub / "here") and v["n_scenes"] == 3 and v["size"] == 16
    with pytest.raises(ConfigError):
        resolve("synth", None, [])
    (sub / "broken.txt").write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        resolve("synth", str(sub / "broken.txt"), [])


@pytest.mark.parametrize("command", sorted(COMMAND_KEYS))
def test_help_lists_every_key(command, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in COMMAND_KEYS[command]:
        assert f"  {key.name} = " in out
