import json
import subprocess
import sys

import numpy as np
import pytest

from scl_lle.cli import main
from scl_lle.enhancer import save_params, zero_params
from scl_lle.imageio import load_image


@pytest.fixture
def zero_ckpt(tmp_path):
    path = tmp_path / "zero.ckpt"
    save_params(path, zero_params())
    return path


def _manifest(d):
    return json.loads((d / "run_manifest.json").read_text())


def test_enhance_zero_checkpoint_is_identity(tmp_path, corpus, zero_ckpt):
    out = tmp_path / "out"
    assert main(["enhance", "--ckpt", str(zero_ckpt), "--in", str(corpus / "inputs"), "--out", str(out)]) == 0
    for src in sorted((corpus / "inputs").iterdir()):
        a, b = load_image(src), load_image(out / src.name)
        assert float((a - b).abs().max()) <= 1 / 255
    m = _manifest(out)
    assert m["command"] == "enhance" and len(m["checkpoint_sha256"]) == 64 and m["finished"]


def test_enhance_is_deterministic(tmp_path, corpus):
    from scl_lle.enhancer import init_params
    ckpt = tmp_path / "r.ckpt"
    save_params(ckpt, init_params(5, std=0.1))
    for name in ("a", "b"):
        main(["enhance", "--ckpt", str(ckpt), "--in", str(corpus / "inputs"), "--out", str(tmp_path / name)])
    for f in (tmp_path / "a").glob("*.png"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_enhance_empty_dir(tmp_path, zero_ckpt, caplog):
    (tmp_path / "empty").mkdir()
    rc = main(["enhance", "--ckpt", str(zero_ckpt), "--in", str(tmp_path / "empty"), "--out", str(tmp_path / "o")])
    assert rc == 0
    assert (tmp_path / "o" / "run_manifest.json").exists()
    assert "no images" in caplog.text


def test_enhance_bad_file_exit_1(tmp_path, zero_ckpt):
    d = tmp_path / "in"
    d.mkdir()
    (d / "broken.png").write_bytes(b"junk")
    assert main(["enhance", "--ckpt", str(zero_ckpt), "--in", str(d), "--out", str(tmp_path / "o")]) == 1
    assert _manifest(tmp_path / "o")["failed"] == ["broken.png"]


def test_corrupt_checkpoint_surfaces_offset(tmp_path, zero_ckpt, corpus, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(zero_ckpt.read_bytes()[:100])
    rc = main(["enhance", "--ckpt", str(bad), "--in", str(corpus / "inputs"), "--out", str(tmp_path / "o")])
    assert rc == 1 and "offset" in capsys.readouterr().err
    assert main(["selftest", "--quick", "--check-archive", str(bad)]) == 1


def test_darken_gamma_one_is_byte_identity(tmp_path, corpus):
    assert main(["darken", "--gamma", "1", "--in", str(corpus / "inputs"), "--out", str(tmp_path / "d")]) == 0
    for f in (corpus / "inputs").iterdir():
        assert f.read_bytes() == (tmp_path / "d" / f.name).read_bytes()


def test_darken_gamma_two(tmp_path, corpus):
    main(["darken", "--gamma", "2", "--in", str(corpus / "inputs"), "--out", str(tmp_path / "d")])
    src = sorted((corpus / "inputs").iterdir())[0]
    expected = np.floor(load_image(src).double().numpy() ** 2 * 255 + 0.5) / 255
    assert np.allclose(load_image(tmp_path / "d" / src.name).numpy(), expected, atol=1e-7)


def test_darken_rejects_brightening(tmp_path, corpus):
    assert main(["darken", "--gamma", "0.5", "--in", str(corpus / "inputs"), "--out", str(tmp_path / "d")]) == 2


def test_ablate_unknown_switch(tmp_path, corpus):
    rc = main(["ablate", "--data-root", str(corpus), "--out-dir", str(tmp_path / "a"), "--switches", "no-foo"])
    assert rc == 2


def test_ablate_runs_and_tags(tmp_path, small_corpus):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seg_backend": "oracle", "num_classes": 3, "image_size": 16,
                               "augment": False, "width": 8, "iterations": 2}))
    out = tmp_path / "ab"
    rc = main(["ablate", "--config", str(cfg), "--data-root", str(small_corpus), "--out-dir", str(out),
               "--switches", "no-lc,no-neg", "--max-steps", "2"])
    assert rc == 0
    lc, neg = _manifest(out / "no-lc"), _manifest(out / "no-neg")
    assert lc["config"]["w_c"] == 0.0 and lc["config"]["tag"] == "no-lc" and lc["switch"] == "no-lc"
    assert not neg["config"]["use_neg_over"] and not neg["config"]["use_neg_under"]
    assert (out / "no-neg" / "final.ckpt").exists()
    assert _manifest(out)["switches"] == ["no-lc", "no-neg"]


def test_train_flags_override_config(tmp_path, small_corpus):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 1, "lr": 0.5, "seg_backend": "oracle", "num_classes": 3,
                               "image_size": 16, "augment": False, "width": 8, "iterations": 2}))
    out = tmp_path / "t"
    rc = main(["train", "--config", str(cfg), "--data-root", str(small_corpus), "--out-dir", str(out),
               "--seed", "9", "--max-steps", "3"])
    assert rc == 0
    m = _manifest(out)
    assert m["seed"] == 9 and m["config"]["lr"] == 0.5 and m["config"]["max_steps"] == 3
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 3


def test_train_config_errors_exit_2(tmp_path, small_corpus):
    base = ["train", "--data-root", str(small_corpus), "--out-dir", str(tmp_path / "t")]
    assert main(base + ["--epochs", "0"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"learning_rate": 1}')
    assert main(base + ["--config", str(bad)]) == 2
    assert main(["train", "--data-root", str(tmp_path / "nowhere"), "--out-dir", str(tmp_path / "t")]) == 2


def test_eval_and_fit_niqe(tmp_path):
    from scl_lle.imageio import save_image
    from scl_lle.synthetic import smooth_texture
    import torch
    rng = np.random.default_rng(0)
    for i in range(4):
        img = torch.from_numpy(np.stack([0.15 + 0.7 * smooth_texture(rng, 128)] * 3))
        save_image(img, tmp_path / "pristine" / f"p{i}.png")
        save_image(img, tmp_path / "ref" / f"p{i}.png")
    model = tmp_path / "m.niqe"
    assert main(["fit-niqe", "--in", str(tmp_path / "pristine"), "--out", str(model), "--patch-size", "32"]) == 0
    rc = main(["eval", "--metrics", "psnr,ssim,niqe", "--pred", str(tmp_path / "pristine"),
               "--ref", str(tmp_path / "ref"), "--out", str(tmp_path / "ev"), "--niqe-model", str(model)])
    assert rc == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["mean"]["psnr"] == "inf" and rep["mean"]["niqe"] >= 0
    assert (tmp_path / "ev" / "run_manifest.json").exists()


def test_eval_missing_niqe_model(tmp_path):
    rc = main(["eval", "--metrics", "niqe", "--pred", str(tmp_path), "--ref", str(tmp_path),
               "--out", str(tmp_path / "o"), "--niqe-model", str(tmp_path / "none.niqe")])
    assert rc == 2


def test_selftest_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "scl_lle", "selftest", "--quick"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = proc.stdout.splitlines()
    assert any(line.startswith("torch ") for line in lines)
    assert {l.split()[1] for l in lines if l.startswith("grad ")} >= {"l_c", "l_sc", "l_fr", "l_cc"}
    assert sum(l.startswith("invariant ") for l in lines) >= 6


def test_long_flags_only():
    with pytest.raises(SystemExit):
        main(["darken", "-g", "2", "--in", "x", "--out", "y"])
