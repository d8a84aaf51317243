import csv
import json

import numpy as np
import pytest
from conftest import tiny_config

from ummdiff import imageio
from ummdiff.cli import main
from ummdiff.config import RunConfig, desk_config
from ummdiff.numerics import load_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Config, corpus and a three-stage checkpoint chain built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    model = tiny_config(img_size=16, max_len=12)
    model.denoiser.image_size = 16
    cfg = RunConfig(candidates=40, model=model)
    for name in ("pretrain", "phase1", "phase2"):
        tc = getattr(cfg, name)
        tc.iterations, tc.batch_size, tc.lr, tc.ema_decay = 2, 4, 1e-3, 0.9
    cfg.sampler.steps = 3
    cfg.save(root / "run.json")
    c = str(root / "run.json")
    assert main(["build-data", "--config", c, "--out", str(root / "corpus")]) == 0
    assert main(["pretrain", "--config", c, "--corpus", str(root / "corpus"), "--out", str(root / "pre.npz"),
                 "--metrics", str(root / "metrics.csv")]) == 0
    assert main(["train1", "--config", c, "--corpus", str(root / "corpus"), "--checkpoint", str(root / "pre.npz"),
                 "--out", str(root / "p1.npz")]) == 0
    assert main(["train2", "--config", c, "--corpus", str(root / "corpus"), "--checkpoint", str(root / "p1.npz"),
                 "--out", str(root / "p2.npz")]) == 0
    return root


def echoed(out: str) -> dict:
    line = next(x for x in out.splitlines() if x.startswith("config: "))
    return json.loads(line[len("config: "):])


def test_pipeline_artifacts(workdir):
    for name in ("corpus/manifest.jsonl", "corpus/vocab.txt", "pre.npz", "p1.npz", "p2.npz", "metrics.csv"):
        assert (workdir / name).exists(), name


def test_sample_writes_an_image_and_echoes_the_config(workdir, capsys):
    crop = workdir / "subject.png"
    imageio.save_png(crop, np.zeros((6, 6, 3), np.float32))
    rc = main(["sample", "--config", str(workdir / "run.json"), "--checkpoint", str(workdir / "p2.npz"),
               "--prompt", "a circle on sky", "--subject", f"{crop}@2", "--alpha", "0.5", "--guidance", "7.5",
               "--steps", "3", "--out", str(workdir / "s.png"), "--seed", "4"])
    assert rc == 0
    doc = echoed(capsys.readouterr().out)
    assert doc["command"] == "sample" and doc["weights"] == "ema"
    assert doc["config"]["sampler"] == {"alpha": 0.5, "guidance": 7.5, "steps": 3, "eta": 0.0, "seed": 4}
    assert imageio.load_png(workdir / "s.png").shape == (16, 16, 3)


def test_sample_defaults_are_the_published_values(workdir, capsys, tmp_path):
    # the run config fixes steps=3 for speed; check the resolved defaults without a config file
    from ummdiff.cli import _sampler, build_parser
    args = build_parser().parse_args(["sample", "--checkpoint", "x", "--prompt", "a", "--out", "o"])
    s = _sampler(RunConfig(), args, seed=0)
    assert (s.alpha, s.guidance, s.steps, s.eta) == (0.5, 7.5, 50, 0.0)


def test_alpha_out_of_range_is_rejected_before_work(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--checkpoint", str(workdir / "missing.npz"), "--prompt", "a circle on sky",
              "--alpha", "1.5", "--out", str(workdir / "never.png")])
    assert exc.value.code != 0
    err = capsys.readouterr().err
    assert "usage" in err and "alpha" in err
    assert not (workdir / "never.png").exists()


def test_omitted_seed_is_generated_and_printed(workdir, capsys):
    rc = main(["sample", "--checkpoint", str(workdir / "p2.npz"), "--prompt", "a square on grass",
               "--steps", "2", "--out", str(workdir / "noseed.png")])
    assert rc == 0
    out = capsys.readouterr().out
    seed = int(out.split("seed: ")[1].split()[0])
    assert echoed(out)["config"]["sampler"]["seed"] == seed


def test_rerun_from_echo_is_bit_identical(workdir, capsys):
    args = ["sample", "--checkpoint", str(workdir / "p2.npz"), "--prompt", "a red cross on sand",
            "--steps", "3", "--out", str(workdir / "first.png")]
    assert main(args) == 0
    echo_file = workdir / "echo.txt"
    echo_file.write_text(next(x for x in capsys.readouterr().out.splitlines() if x.startswith("config: ")))
    args[-1] = str(workdir / "second.png")
    assert main(args[:-2] + ["--config", str(echo_file), "--out", args[-1]]) == 0
    assert (workdir / "first.png").read_bytes() == (workdir / "second.png").read_bytes()


def test_trajectory_dump(workdir):
    rc = main(["sample", "--config", str(workdir / "run.json"), "--checkpoint", str(workdir / "p2.npz"),
               "--prompt", "a circle on sky", "--out", str(workdir / "t.png"),
               "--trajectory", str(workdir / "traj.npz")])
    assert rc == 0
    arrays, meta = load_checkpoint(workdir / "traj.npz")
    assert meta["kind"] == "trajectory"
    assert arrays["x"].shape == (3, 1, 16, 16, 3) and arrays["eps"].shape == arrays["x"].shape
    assert arrays["t"].tolist() == sorted(arrays["t"].tolist(), reverse=True)


def test_ablate_alpha_table_and_grid(workdir, capsys):
    out = workdir / "ablation"
    rc = main(["ablate-alpha", "--config", str(workdir / "run.json"), "--checkpoint", str(workdir / "p2.npz"),
               "--alphas", "0,0.5,1", "--fixtures", "3", "--out", str(out)])
    assert rc == 0
    rows = list(csv.reader(open(out / "alpha_sweep.csv")))
    assert rows[0] == ["alpha", "subject_fidelity", "text_alignment", "background_leakage"]
    assert [float(r[0]) for r in rows[1:]] == [0.0, 0.5, 1.0]
    # 3x3 tiles of 16 pixels with one-pixel borders
    assert imageio.load_png(out / "alpha_grid.png").shape == (52, 52, 3)
    first = (out / "alpha_sweep.csv").read_bytes()
    assert main(["ablate-alpha", "--config", str(workdir / "run.json"), "--checkpoint", str(workdir / "p2.npz"),
                 "--alphas", "0,0.5,1", "--fixtures", "3", "--out", str(out)]) == 0
    assert (out / "alpha_sweep.csv").read_bytes() == first


def test_export_embeddings(workdir, capsys):
    path = workdir / "emb.tsv"
    rc = main(["export-embeddings", "--config", str(workdir / "run.json"), "--checkpoint", str(workdir / "p1.npz"),
               "--per-class", "4", "--out", str(path)])
    assert rc == 0
    assert "separation_ratio:" in capsys.readouterr().out
    lines = path.read_text().splitlines()
    assert len(lines) == 17 and lines[0].split("\t")[0] == "label"
    assert len(lines[1].split("\t")) == 1 + 16


def test_export_embeddings_needs_enough_images(workdir, capsys):
    rc = main(["export-embeddings", "--config", str(workdir / "run.json"), "--checkpoint", str(workdir / "p1.npz"),
               "--per-class", "2", "--out", str(workdir / "few.tsv")])
    assert rc != 0
    assert "fewer" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train1", "--corpus", "nowhere", "--checkpoint", "nowhere.npz", "--out", "x.npz"],
    ["sample", "--checkpoint", "nowhere.npz", "--prompt", "a circle on sky", "--out", "x.png", "--seed", "1"],
    ["sample", "--config", "nowhere.json", "--checkpoint", "x", "--prompt", "a", "--out", "x.png"],
])
def test_missing_inputs_exit_nonzero(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) != 0
    assert "error" in capsys.readouterr().err


def test_bad_flags_print_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--subject", "no-position", "--checkpoint", "x", "--prompt", "a", "--out", "o"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_init_config_presets(tmp_path):
    assert main(["init-config", "--preset", "desk", "--out", str(tmp_path / "desk.json")]) == 0
    assert RunConfig.load(tmp_path / "desk.json").to_dict() == desk_config().to_dict()
    assert main(["init-config", "--out", str(tmp_path / "published.json")]) == 0
    published = RunConfig.load(tmp_path / "published.json")
    assert published.phase2.lr == 1e-5 and published.phase2.ema_decay == 0.9999


def test_config_schema_is_enforced(tmp_path):
    doc = RunConfig().to_dict()
    doc["schema_version"] = 2
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="schema"):
        RunConfig.load(tmp_path / "c.json")
    doc["schema_version"] = 1
    doc["surprise"] = 1
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.load(tmp_path / "c.json")
